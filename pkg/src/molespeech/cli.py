"""Command-line entry point.

One config file drives everything; every command is re-runnable and writes
only under --out. Exit codes: 0 success, 1 validation/dependency problems,
2 runtime or numeric failures. Diagnostics go to stderr; machine-readable
output goes to files.

Commands: gen-data, fit-codec, pretrain, stage1 (also trains the acoustic
model), stage2, stage3, synth, qa, eval, report. `--preset paper` never
trains; it prints the full-scale reference hyperparameters and exits.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import DEFAULT_CONFIG, PAPER_PRESET, FullConfig, validate_config
from .errors import (
    AlphabetError,
    ConfigError,
    ContractError,
    DataError,
    DependencyError,
    FormatError,
    NumericError,
    SynthesisError,
)
from .prng import Prng

_VALIDATION_ERRORS = (ConfigError, ContractError, DataError, DependencyError, AlphabetError, FormatError)

COMMANDS = ("gen-data", "fit-codec", "pretrain", "stage1", "stage2", "stage3", "synth", "qa", "eval", "report")


class RunLock:
    """One process per run directory; stale locks from dead pids are reclaimed."""

    def __init__(self, out: Path):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid = self._holder()
            if pid is not None and _alive(pid):
                raise ContractError(f"run directory is locked by running process {pid} ({self.path})")
            self.path.unlink(missing_ok=True)
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def _holder(self):
        try:
            return int(self.path.read_text().strip())
        except (OSError, ValueError):
            return None

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molespeech", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config (defaults to the built-in desk config)")
        p.add_argument("--out", type=Path, required=True, help="run directory; all outputs land here")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        if name == "synth":
            p.add_argument("--text", required=True, help="text over the tone alphabet")
            p.add_argument("--model", choices=("auto", "tts", "mole"), default="auto")
            p.add_argument("--wav", default="out.wav", help="output WAV name under --out")
        if name == "qa":
            p.add_argument("--question", required=True, help='toy question, e.g. "3+4=?"')
            p.add_argument("--model", choices=("auto", "speech_qa", "mole"), default="auto")
    return parser


def load_document(args) -> dict:
    if args.config is None:
        doc = json.loads(json.dumps(DEFAULT_CONFIG))
    else:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
    if args.seed is not None:
        doc["seed"] = args.seed
    return doc


def resolve_config(args) -> FullConfig:
    cfg, errors = validate_config(load_document(args))
    if errors:
        raise ConfigError("invalid config:\n" + "\n".join(f"  - {e}" for e in errors))
    return cfg


def _pick_view(bundle, wanted: str, speech: bool):
    if wanted == "mole" or (wanted == "auto" and bundle.mole is not None and not speech):
        if bundle.mole is None:
            raise DependencyError("no router checkpoint; run stage3 first")
        return bundle.view("mole"), "stage3.ckpt"
    if speech:
        name = "speech_qa" if wanted == "auto" else wanted
        if not bundle.experts or name not in bundle.experts:
            raise DependencyError(f"expert {name!r} not found; run stage2 with it enabled")
        return bundle.view(name), "stage2.ckpt"
    if not bundle.experts or "tts" not in bundle.experts:
        raise DependencyError("no tts expert; run stage1 first")
    return bundle.view("tts"), "stage1.ckpt"


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 1 if err.code not in (0, None) else 0
    try:
        if args.preset == "paper":
            print(json.dumps(PAPER_PRESET, indent=2, sort_keys=True))
            print(f"paper preset documents full-scale values; `{args.command}` not run", file=sys.stderr)
            return 0
        cfg = resolve_config(args)
        with RunLock(args.out):
            return _dispatch(args, cfg)
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (NumericError, SynthesisError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports, not crashes
        print(f"unexpected error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def _dispatch(args, cfg: FullConfig) -> int:
    from . import pipeline as pl

    paths = pl.RunPaths(args.out)
    if args.command == "fit-codec":
        pl.run_fit_codec(cfg, paths)
        print(f"codec fitted -> {paths.checkpoint('codec')}", file=sys.stderr)
    elif args.command == "pretrain":
        pl.run_pretrain(cfg, paths)
        print(f"base model -> {paths.checkpoint('stage0')}", file=sys.stderr)
    elif args.command == "stage1":
        pl.run_stage1(cfg, paths)
        print(f"speech expert -> {paths.checkpoint('stage1')}; acoustic model -> {paths.checkpoint('aclm')}", file=sys.stderr)
    elif args.command == "stage2":
        pl.run_stage2(cfg, paths)
        print(f"text experts -> {paths.checkpoint('stage2')}", file=sys.stderr)
    elif args.command == "stage3":
        pl.run_stage3(cfg, paths)
        print(f"router -> {paths.checkpoint('stage3')}", file=sys.stderr)
    elif args.command == "gen-data":
        _gen_data(cfg, paths)
    elif args.command == "synth":
        _synth(args, cfg, paths)
    elif args.command == "qa":
        _qa(args, cfg, paths)
    elif args.command == "eval":
        _eval(cfg, paths)
    elif args.command == "report":
        _report(cfg, paths)
    return 0


def _gen_data(cfg: FullConfig, paths) -> None:
    from . import pipeline as pl

    out = paths.ensure().root / "datasets"
    out.mkdir(exist_ok=True)
    book = None
    if paths.checkpoint("codec").exists():
        _, book = pl.load_codec(paths, cfg)
    for kind in ("text_qa", "tts", "speech_qa"):
        if kind != "text_qa" and book is None:
            print(f"skipping {kind}: no codec checkpoint yet (run fit-codec)", file=sys.stderr)
            continue
        rng = Prng(cfg.seed).child(f"data-{kind}")
        from .data import build_dataset

        samples = build_dataset(kind, cfg.stage(1).n_tts, rng, cfg.vocab, book)
        with (out / f"{kind}.jsonl").open("w") as fh:
            for s in samples:
                fh.write(
                    json.dumps(
                        {"kind": s.kind, "text": s.text, "answer": s.answer, "input_ids": s.input_ids, "target_ids": s.target_ids}
                    )
                    + "\n"
                )
        print(f"{kind}: {len(samples)} samples -> {out / (kind + '.jsonl')}", file=sys.stderr)


def _synth(args, cfg: FullConfig, paths) -> None:
    from . import pipeline as pl
    from .audio import write_wav

    bundle = pl.load_bundle(cfg, paths)
    view, source = _pick_view(bundle, args.model, speech=False)
    wave = pl.synthesize(view, bundle.book, bundle.codec, bundle.aclm, args.text)
    dest = paths.ensure().root / args.wav
    write_wav(dest, wave)
    print(f"synthesized {args.text!r} with {source} -> {dest}", file=sys.stderr)


def _qa(args, cfg: FullConfig, paths) -> None:
    from . import pipeline as pl
    from .audio import write_wav

    bundle = pl.load_bundle(cfg, paths)
    view, source = _pick_view(bundle, args.model, speech=True)
    result = pl.speech_qa_infer(view, bundle.book, bundle.codec, bundle.aclm, args.question)
    root = paths.ensure().root
    (root / "answer.txt").write_text(result.text + "\n")
    if result.wave is not None:
        write_wav(root / "answer.wav", result.wave)
    if not result.format_ok:
        print("warning: reply violated the text-then-speech layout; text-only fallback", file=sys.stderr)
    print(f"answer {result.text!r} from {source} -> {root / 'answer.txt'}", file=sys.stderr)


def _eval(cfg: FullConfig, paths) -> None:
    from . import evalkit as ek
    from . import pipeline as pl
    from .data import build_dataset

    bundle = pl.load_bundle(cfg, paths)
    qa = build_dataset("text_qa", 0, Prng(cfg.seed).child("data-text_qa"), cfg.vocab, None)
    strings = pl.held_out_strings(cfg, 50)
    metrics: dict = {"held_out_strings": len(strings)}
    if bundle.base_lm is not None:
        metrics["base_lm.text_accuracy"] = ek.text_accuracy(bundle.view("base"), qa)
    if bundle.experts:
        for name in bundle.experts:
            metrics[f"{name}.text_accuracy"] = ek.text_accuracy(bundle.view(name), qa)
        if "tts" in bundle.experts:
            metrics["tts.cer"] = ek.tts_cer(bundle.view("tts"), bundle.book, bundle.codec, bundle.aclm, strings)
    if bundle.mole is not None:
        metrics["mole.text_accuracy"] = ek.text_accuracy(bundle.view("mole"), qa)
        metrics["mole.cer"] = ek.tts_cer(bundle.view("mole"), bundle.book, bundle.codec, bundle.aclm, strings)
    dest = paths.ensure().reports / "eval.json"
    dest.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"metrics -> {dest}", file=sys.stderr)


def _report(cfg: FullConfig, paths) -> None:
    from . import evalkit as ek
    from . import pipeline as pl
    from .data import build_dataset

    bundle = pl.load_bundle(cfg, paths)
    if bundle.mole is None or bundle.base_lm is None or not bundle.experts:
        raise DependencyError("the report needs stage0 through stage3 checkpoints")
    qa = build_dataset("text_qa", 0, Prng(cfg.seed).child("data-text_qa"), cfg.vocab, None)
    strings = pl.held_out_strings(cfg, 50)
    views = {
        "base_lm": bundle.view("base"),
        "tts_expert": bundle.view("tts"),
        "text_expert": bundle.view("text_qa"),
        "mole": bundle.view("mole"),
    }
    sources = {"base_lm": "stage0.ckpt", "tts_expert": "stage1.ckpt", "text_expert": "stage2.ckpt", "mole": "stage3.ckpt"}
    report = ek.forgetting_report(views, sources, qa, strings, bundle.book, bundle.codec, bundle.aclm)
    root = paths.ensure().reports
    (root / "forgetting.txt").write_text(report.to_text())
    (root / "forgetting.csv").write_text(report.to_csv())
    print(report.to_text(), file=sys.stderr)
    print(f"report -> {root / 'forgetting.txt'}", file=sys.stderr)


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
