"""Prompted training samples for the three toy tasks.

Every sample is [<bos>, system id, <user>, payload, <assistant>] followed
by its target ids; loss applies to target positions only. Targets:

  tts       semantic ids of the rendered text, then <eos>
  text_qa   the answer character, then <eos>
  speech_qa answer characters, <speech>, semantic ids of the rendered
            answer, then <eos> (text first, speech conditioned on it)

The text-QA domain is the full set of 100 single-digit mod-10 additions
"a+b=?" -> digit; TTS strings are random over the tone alphabet.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import ALPHABET, render
from .codec import SemanticCodebook, semantic_encode
from .errors import ContractError, DataError, DependencyError
from .prng import Prng
from .vocab import UnifiedVocab

KINDS = ("tts", "text_qa", "speech_qa")


@dataclass
class PromptedSample:
    kind: str
    input_ids: list
    target_ids: list
    text: str  # payload for tts, question for qa kinds
    answer: str = ""

    @property
    def tokens(self) -> list:
        return self.input_ids + self.target_ids


def toy_strings(rng: Prng, n: int, lo: int = 3, hi: int = 12) -> list[str]:
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        out.append("".join(ALPHABET[int(i)] for i in rng.integers(0, len(ALPHABET), size=length)))
    return out


def qa_items() -> list[tuple[str, str]]:
    return [(f"{a}+{b}=?", str((a + b) % 10)) for a in range(10) for b in range(10)]


def _prompt(vocab: UnifiedVocab, system_id: int, payload: str) -> list:
    return [vocab.bos, system_id, vocab.user, *vocab.encode_chars(payload), vocab.assistant]


def tts_sample(text: str, vocab: UnifiedVocab, book: SemanticCodebook) -> PromptedSample:
    sem = semantic_encode(render(text), book).tolist()
    return PromptedSample(
        kind="tts",
        input_ids=_prompt(vocab, vocab.sys_tts, text),
        target_ids=sem + [vocab.eos],
        text=text,
    )


def text_qa_sample(question: str, answer: str, vocab: UnifiedVocab) -> PromptedSample:
    return PromptedSample(
        kind="text_qa",
        input_ids=_prompt(vocab, vocab.sys_qa, question),
        target_ids=vocab.encode_chars(answer) + [vocab.eos],
        text=question,
        answer=answer,
    )


def speech_qa_sample(question: str, answer: str, vocab: UnifiedVocab, book: SemanticCodebook) -> PromptedSample:
    sem = semantic_encode(render(answer), book).tolist()
    return PromptedSample(
        kind="speech_qa",
        input_ids=_prompt(vocab, vocab.sys_sqa, question),
        target_ids=vocab.encode_chars(answer) + [vocab.speech] + sem + [vocab.eos],
        text=question,
        answer=answer,
    )


def build_dataset(
    kind: str,
    n_samples: int,
    rng: Prng,
    vocab: UnifiedVocab,
    book: SemanticCodebook | None = None,
) -> list[PromptedSample]:
    """Synthesize one task's sample list.

    tts draws n_samples random strings; the QA kinds always cover the full
    100-item addition table (the domain is the dataset). The speech kinds
    need a fitted semantic codebook.
    """
    if kind not in KINDS:
        raise ContractError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if kind in ("tts", "speech_qa") and book is None:
        raise DependencyError(f"dataset kind {kind!r} needs a fitted semantic codebook")
    if kind == "tts":
        if n_samples < 1:
            raise DataError("n_samples must be positive for tts data")
        return [tts_sample(s, vocab, book) for s in toy_strings(rng, n_samples)]
    if kind == "text_qa":
        return [text_qa_sample(q, a, vocab) for q, a in qa_items()]
    return [speech_qa_sample(q, a, vocab, book) for q, a in qa_items()]


@dataclass
class Batch:
    inputs: np.ndarray  # (B, L) model input ids
    labels: np.ndarray  # (B, L) next-token targets, pad id where no loss
    prompt_lens: np.ndarray  # (B,) length of each sample's prompt section


def collate(samples: list[PromptedSample], pad_id: int, max_len: int) -> Batch:
    """Right-pad to the longest sample; labels cover target positions only."""
    if not samples:
        raise DataError("empty batch")
    full = [s.tokens for s in samples]
    longest = max(len(f) for f in full)
    if longest > max_len:
        raise DataError(f"sample length {longest} exceeds max sequence length {max_len}")
    length = longest - 1
    inputs = np.full((len(samples), length), pad_id, dtype=np.int64)
    labels = np.full((len(samples), length), pad_id, dtype=np.int64)
    for i, (s, f) in enumerate(zip(samples, full)):
        inputs[i, : len(f) - 1] = f[:-1]
        first_target = len(s.input_ids) - 1
        labels[i, first_target : len(f) - 1] = f[first_target + 1 :]
    return Batch(inputs=inputs, labels=labels, prompt_lens=np.array([len(s.input_ids) for s in samples]))


class BatchSampler:
    """Length-bucketed batch sampling: each step picks one bucket with
    probability proportional to its size, then draws with replacement
    inside it, so padding waste stays small without skewing coverage."""

    def __init__(self, samples: list[PromptedSample], batch_size: int, rng: Prng, bucket: int = 8):
        if not samples:
            raise DataError("no samples to train on")
        self.samples = samples
        self.batch_size = batch_size
        self.rng = rng
        buckets: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            key = -(-len(s.tokens) // bucket)
            buckets.setdefault(key, []).append(i)
        self.groups = [np.array(v) for _, v in sorted(buckets.items())]
        sizes = np.array([len(g) for g in self.groups], dtype=np.float64)
        self.group_p = sizes / sizes.sum()

    def next(self) -> list[PromptedSample]:
        g = self.groups[int(self.rng.choice(len(self.groups), 1, p=self.group_p)[0])]
        idx = self.rng.integers(0, len(g), size=self.batch_size)
        return [self.samples[int(g[i])] for i in idx]


class MixedSampler:
    """Task-ratio batch sampling: pick the task first at the configured
    ratio, then a length bucket inside it. Batches are homogeneous per
    step; coverage across steps follows the ratio."""

    def __init__(self, per_kind: dict, ratio, batch: int, rng: Prng):
        kinds = sorted(per_kind)
        weights = np.asarray(list(ratio), dtype=np.float64)
        if weights.size != len(kinds):
            raise DataError(f"ratio has {weights.size} weights for kinds {kinds}")
        self.p = weights / weights.sum()
        self.samplers = [BatchSampler(per_kind[k], batch, rng.child(f"mix-{k}")) for k in kinds]
        self.rng = rng

    def next(self) -> list[PromptedSample]:
        return self.samplers[int(self.rng.choice(len(self.samplers), 1, p=self.p)[0])].next()
