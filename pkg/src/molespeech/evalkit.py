"""Objective metrics: character error rate via the exact transcriber, text
QA accuracy, codec SNR, and the four-row text-retention report.

CER and SNR stand in for listener ratings; every report says so in its
header so nobody mistakes them for perceptual scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .acoustic import AcousticLm
from .audio import Waveform, oracle_transcribe
from .codec import RvqCodec, SemanticCodebook
from .data import PromptedSample
from .errors import ContractError, SynthesisError
from .pipeline import synthesize

REPORT_HEADER = (
    "objective desk-scale metrics (oracle transcription CER and codec SNR), not perceptual listener scores"
)

# Full-scale text-QA retention pattern this report's ordering mirrors:
# base 67.1 -> speech expert 27.2 -> text expert 56.7 -> fused 54.8.
REFERENCE_PATTERN = {"base_lm": 67.1, "tts_expert": 27.2, "text_expert": 56.7, "mole": 54.8}


def levenshtein(a: str, b: str) -> int:
    """Two-row edit distance (insert/delete/substitute, unit costs)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def char_error_rate(hyp: str, ref: str) -> float:
    if not ref:
        raise ContractError("reference string must be non-empty")
    return levenshtein(hyp, ref) / len(ref)


def codec_snr(reference: Waveform, reconstruction: Waveform, cap_db: float = 300.0) -> float:
    """10*log10(signal/error) in dB; exact match reports the cap sentinel."""
    if reference.samples.shape != reconstruction.samples.shape:
        raise ContractError(
            f"length mismatch: {reference.samples.shape} vs {reconstruction.samples.shape}"
        )
    sig = float((reference.samples.astype("f8") ** 2).sum())
    if sig == 0.0:
        raise ContractError("reference waveform is all-zero")
    err = float(((reference.samples.astype("f8") - reconstruction.samples.astype("f8")) ** 2).sum())
    if err == 0.0:
        return cap_db
    return min(10.0 * math.log10(sig / err), cap_db)


def text_accuracy(view, qa_set: list[PromptedSample]) -> float:
    """Greedy decoding, exact match of the answer segment, in percent."""
    if not qa_set:
        raise ContractError("empty QA set")
    vocab = view.vocab
    hits = 0
    for sample in qa_set:
        out = view.generate(sample.input_ids, max_new=len(sample.answer) + 2, stop_ids={vocab.eos})
        body = [t for t in out if t != vocab.eos]
        try:
            answer = vocab.decode_chars(body)
        except Exception:
            continue
        hits += answer == sample.answer
    return 100.0 * hits / len(qa_set)


def tts_cer(view, book: SemanticCodebook, codec: RvqCodec, aclm: AcousticLm, strings: list[str]) -> float:
    """Mean oracle-transcription CER of synthesized speech, in percent.

    A synthesis failure (no semantic tokens emitted) scores as CER 1 for
    that string rather than aborting the evaluation.
    """
    if not strings:
        raise ContractError("empty evaluation set")
    total = 0.0
    for text in strings:
        try:
            wave = synthesize(view, book, codec, aclm, text)
            total += char_error_rate(oracle_transcribe(wave), text)
        except SynthesisError:
            total += 1.0
    return 100.0 * total / len(strings)


@dataclass
class ReportRow:
    name: str
    source: str
    text_accuracy: float
    tts_cer: float | None = None


@dataclass
class ForgettingReport:
    rows: list = field(default_factory=list)

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def check_pattern(self) -> list[tuple[str, bool, str]]:
        """Desk-scale restatement of the retention ordering as checks."""
        base = self.row("base_lm").text_accuracy
        tts = self.row("tts_expert").text_accuracy
        text = self.row("text_expert").text_accuracy
        mole = self.row("mole").text_accuracy
        tts_c = self.row("tts_expert").tts_cer
        mole_c = self.row("mole").tts_cer
        return [
            ("base_text_accuracy>=99", base >= 99.0, f"{base:.1f}%"),
            ("tts_expert_forgets>=30pts", tts <= base - 30.0, f"{tts:.1f}% vs base {base:.1f}%"),
            ("text_expert_restores>=95", text >= 95.0, f"{text:.1f}%"),
            ("mole_within_5pts_of_text_expert", abs(mole - text) <= 5.0, f"{mole:.1f}% vs {text:.1f}%"),
            ("mole_cer_within_2pts_of_tts_expert", mole_c <= tts_c + 2.0, f"{mole_c:.2f}% vs {tts_c:.2f}%"),
        ]

    def to_text(self) -> str:
        lines = [f"# {REPORT_HEADER}"]
        lines.append(f"{'model':<14}{'text_accuracy%':>16}{'tts_cer%':>12}  source")
        for r in self.rows:
            cer = f"{r.tts_cer:.2f}" if r.tts_cer is not None else "-"
            lines.append(f"{r.name:<14}{r.text_accuracy:>16.1f}{cer:>12}  {r.source}")
        lines.append("")
        ref = " -> ".join(f"{k} {v}" for k, v in REFERENCE_PATTERN.items())
        lines.append(f"full-scale text-QA pattern for comparison (ordering only): {ref}")
        for name, ok, detail in self.check_pattern():
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["model,text_accuracy_pct,tts_cer_pct,source"]
        for r in self.rows:
            cer = f"{r.tts_cer:.4f}" if r.tts_cer is not None else ""
            lines.append(f"{r.name},{r.text_accuracy:.4f},{cer},{r.source}")
        return "\n".join(lines) + "\n"


def forgetting_report(
    views: dict,
    sources: dict,
    qa_set: list[PromptedSample],
    tts_strings: list[str],
    book: SemanticCodebook,
    codec: RvqCodec,
    aclm: AcousticLm,
) -> ForgettingReport:
    """Fill the four-row report; TTS CER only where the row can speak."""
    required = ("base_lm", "tts_expert", "text_expert", "mole")
    missing = [n for n in required if n not in views]
    if missing:
        raise ContractError(f"missing checkpoints for report rows: {missing}")
    report = ForgettingReport()
    for name in required:
        view = views[name]
        cer = tts_cer(view, book, codec, aclm, tts_strings) if name in ("tts_expert", "mole") else None
        report.rows.append(
            ReportRow(name=name, source=sources.get(name, "?"), text_accuracy=text_accuracy(view, qa_set), tts_cer=cer)
        )
    return report
