"""One JSON config document drives every stage of a run.

Sections: vocab, lm, lora, mole, codec, acoustic_lm, stages[], seed.
Validation collects every problem (unknown keys included, with their paths)
instead of stopping at the first, and cross-checks section consistency
(semantic vocabulary size vs codebook size, adapter rank vs model widths).

The "paper" preset records the full-scale hyperparameters for reference:
it is documentation, not a trainable configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .codec import CodecConfig
from .errors import ConfigError
from .model import LmConfig
from .vocab import UnifiedVocab

STAGE_KINDS = ("tts", "text_qa", "speech_qa")

PAPER_PRESET = {
    "lora": {"rank": 128, "alpha": 64},
    "vocab": {"n_new_semantic_tokens": 4096},
    "optimizer": {"lr_initial": 3e-4, "lr_stage3": 1e-4, "beta1": 0.9, "beta2": 0.98, "schedule": "cosine"},
    "training": {"batch_size": 256, "sequence_length": 2048, "max_steps": 20000},
    "note": "full-scale reference values; the desk preset is what this package trains",
}

DEFAULT_CONFIG = {
    "seed": 1234,
    "vocab": {"n_text": 64, "n_semantic": 64},
    "lm": {"d_model": 128, "n_layers": 4, "n_heads": 4, "d_ff": 512, "max_seq_len": 256},
    "lora": {"rank": 8, "alpha": 16.0, "stage2_init": "continue"},
    "mole": {"router_hidden": 64, "experts": ["tts", "text_qa"], "hard_gates": False},
    "codec": {
        "k_semantic": 64,
        "semantic_iters": 25,
        "rvq_stages": 4,
        "rvq_entries": 64,
        "rvq_iters": 20,
        "d_latent": 16,
        "ae_steps": 1500,
        "ae_batch": 128,
        "ae_lr": 0.01,
        "decoder_ft_steps": 500,
        "fit_strings": 160,
    },
    "acoustic_lm": {
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 2,
        "d_ff": 256,
        "max_seq_len": 128,
        "steps": 2500,
        "batch": 32,
        "lr_max": 3e-4,
        "lr_min": 1e-5,
    },
    "stages": [
        {"stage": 0, "kinds": ["text_qa"], "steps": 2000, "batch": 32, "lr_max": 3e-4, "lr_min": 1e-5},
        {"stage": 1, "kinds": ["tts"], "steps": 5000, "batch": 32, "lr_max": 3e-4, "lr_min": 1e-5, "n_tts": 512},
        {
            "stage": 2,
            "kinds": ["text_qa", "speech_qa"],
            "steps": 2000,
            "batch": 32,
            "lr_max": 3e-4,
            "lr_min": 1e-5,
            "experts": ["text_qa", "speech_qa"],
        },
        {
            "stage": 3,
            "kinds": ["tts", "text_qa"],
            "steps": 1000,
            "batch": 32,
            "lr_max": 1e-4,
            "lr_min": 1e-5,
            "ratio": [0.5, 0.5],
        },
    ],
}


@dataclass
class LoraSettings:
    rank: int
    alpha: float
    stage2_init: str  # "continue" (from the stage-1 adapters) or "fresh"


@dataclass
class MoleSettings:
    router_hidden: int
    experts: list
    hard_gates: bool


@dataclass
class AcousticTrainSettings:
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    steps: int
    batch: int
    lr_max: float
    lr_min: float


@dataclass
class StageSpec:
    stage: int
    kinds: list
    steps: int
    batch: int
    lr_max: float
    lr_min: float
    n_tts: int = 512
    ratio: list = field(default_factory=lambda: [0.5, 0.5])
    experts: list = field(default_factory=list)


@dataclass
class FullConfig:
    seed: int
    vocab: UnifiedVocab
    lm: LmConfig
    lora: LoraSettings
    mole: MoleSettings
    codec: CodecConfig
    codec_fit_strings: int
    acoustic: AcousticTrainSettings
    stages: dict
    raw: dict

    def stage(self, n: int) -> StageSpec:
        return self.stages[n]


_SCHEMA = {
    "seed": int,
    "vocab": {"n_text": int, "n_semantic": int},
    "lm": {"d_model": int, "n_layers": int, "n_heads": int, "d_ff": int, "max_seq_len": int},
    "lora": {"rank": int, "alpha": (int, float), "stage2_init": str},
    "mole": {"router_hidden": int, "experts": list, "hard_gates": bool},
    "codec": {
        "k_semantic": int,
        "semantic_iters": int,
        "rvq_stages": int,
        "rvq_entries": int,
        "rvq_iters": int,
        "d_latent": int,
        "ae_steps": int,
        "ae_batch": int,
        "ae_lr": (int, float),
        "decoder_ft_steps": int,
        "fit_strings": int,
    },
    "acoustic_lm": {
        "d_model": int,
        "n_layers": int,
        "n_heads": int,
        "d_ff": int,
        "max_seq_len": int,
        "steps": int,
        "batch": int,
        "lr_max": (int, float),
        "lr_min": (int, float),
    },
}

_STAGE_SCHEMA = {
    "stage": int,
    "kinds": list,
    "steps": int,
    "batch": int,
    "lr_max": (int, float),
    "lr_min": (int, float),
    "n_tts": int,
    "ratio": list,
    "experts": list,
}
_STAGE_OPTIONAL = {"n_tts", "ratio", "experts"}


def _check_section(doc: dict, schema: dict, path: str, errors: list, optional=frozenset()):
    for key, value in doc.items():
        if key not in schema:
            errors.append(f"{path}{key}: unknown key")
            continue
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                errors.append(f"{path}{key}: expected an object")
            else:
                _check_section(value, expected, f"{path}{key}.", errors)
        elif expected is bool:
            if not isinstance(value, bool):
                errors.append(f"{path}{key}: expected a boolean")
        elif not isinstance(value, expected) or isinstance(value, bool):
            name = expected.__name__ if isinstance(expected, type) else "number"
            errors.append(f"{path}{key}: expected {name}")
    for key in schema:
        if key not in doc and key not in optional:
            errors.append(f"{path}{key}: missing required key")


def validate_config(document: dict) -> tuple[FullConfig | None, list]:
    """Normalize a config document; returns (config, []) or (None, errors)."""
    errors: list = []
    if not isinstance(document, dict):
        return None, ["config root must be a JSON object"]
    top_known = set(_SCHEMA) | {"stages"}
    for key in document:
        if key not in top_known:
            errors.append(f"{key}: unknown key")
    for key, schema in _SCHEMA.items():
        if key not in document:
            errors.append(f"{key}: missing required section")
        elif isinstance(schema, dict):
            if not isinstance(document[key], dict):
                errors.append(f"{key}: expected an object")
            else:
                _check_section(document[key], schema, f"{key}.", errors)
        elif not isinstance(document[key], schema):
            errors.append(f"{key}: expected {schema.__name__}")

    stages_doc = document.get("stages")
    if not isinstance(stages_doc, list):
        errors.append("stages: missing or not a list")
        stages_doc = []
    for i, entry in enumerate(stages_doc):
        if not isinstance(entry, dict):
            errors.append(f"stages[{i}]: expected an object")
            continue
        _check_section(entry, _STAGE_SCHEMA, f"stages[{i}].", errors, optional=_STAGE_OPTIONAL)
        for kind in entry.get("kinds", []):
            if kind not in STAGE_KINDS:
                errors.append(f"stages[{i}].kinds: unknown dataset kind {kind!r}")
    if errors:
        return None, errors

    # Range and cross-section checks on a structurally sound document.
    doc = document
    if doc["seed"] < 0:
        errors.append("seed: must be non-negative")
    if doc["lora"]["rank"] < 1:
        errors.append("lora.rank: must be >= 1")
    if doc["lora"]["alpha"] <= 0:
        errors.append("lora.alpha: must be positive")
    if doc["lora"]["stage2_init"] not in ("continue", "fresh"):
        errors.append("lora.stage2_init: must be 'continue' or 'fresh'")
    if doc["vocab"]["n_semantic"] != doc["codec"]["k_semantic"]:
        errors.append(
            f"vocab.n_semantic ({doc['vocab']['n_semantic']}) must equal codec.k_semantic"
            f" ({doc['codec']['k_semantic']}): one LM id per semantic centroid"
        )
    for sec in ("lm", "acoustic_lm"):
        if doc[sec]["d_model"] % doc[sec]["n_heads"] != 0:
            errors.append(f"{sec}.d_model: must be divisible by {sec}.n_heads")
    if doc["lora"]["rank"] > min(doc["lm"]["d_model"], doc["lm"]["d_ff"]):
        errors.append("lora.rank: exceeds the smallest adapted matrix dimension")
    if len(doc["mole"]["experts"]) < 2:
        errors.append("mole.experts: a mixture needs at least 2 experts")
    for name in doc["mole"]["experts"]:
        if name not in STAGE_KINDS:
            errors.append(f"mole.experts: unknown expert {name!r}")
    seen_stages = [e["stage"] for e in stages_doc]
    if sorted(seen_stages) != [0, 1, 2, 3]:
        errors.append(f"stages: must cover stages 0..3 exactly once, got {seen_stages}")
    longest_tts = 4 + 12 + 4 * 12 + 1  # controls + chars + semantic targets + eos
    if doc["lm"]["max_seq_len"] < longest_tts:
        errors.append(f"lm.max_seq_len: must be >= {longest_tts} to fit the longest sample")
    need_ac = 2 * 4 * 12 + doc["codec"]["rvq_stages"] - 1
    if doc["acoustic_lm"]["max_seq_len"] < need_ac:
        errors.append(f"acoustic_lm.max_seq_len: must be >= {need_ac} for 12-symbol utterances")
    for i, entry in enumerate(stages_doc):
        if entry["steps"] < 0 or entry["batch"] < 1:
            errors.append(f"stages[{i}]: steps must be >= 0 and batch >= 1")
        if entry["lr_max"] <= 0 or entry["lr_min"] < 0 or entry["lr_min"] > entry["lr_max"]:
            errors.append(f"stages[{i}]: need 0 <= lr_min <= lr_max and lr_max > 0")
    if errors:
        return None, errors

    vocab = UnifiedVocab(n_text=doc["vocab"]["n_text"], n_semantic=doc["vocab"]["n_semantic"])
    lm_cfg = LmConfig(vocab=vocab, **doc["lm"])
    codec_doc = dict(doc["codec"])
    fit_strings = codec_doc.pop("fit_strings")
    codec_cfg = CodecConfig(semantic_id_base=vocab.n_text, **codec_doc)
    stages = {}
    for entry in stages_doc:
        entry = dict(entry)
        n = entry.pop("stage")
        stages[n] = StageSpec(stage=n, **entry)
    cfg = FullConfig(
        seed=doc["seed"],
        vocab=vocab,
        lm=lm_cfg,
        lora=LoraSettings(**doc["lora"]),
        mole=MoleSettings(**doc["mole"]),
        codec=codec_cfg,
        codec_fit_strings=fit_strings,
        acoustic=AcousticTrainSettings(**doc["acoustic_lm"]),
        stages=stages,
        raw=document,
    )
    return cfg, []


def load_config(path) -> FullConfig:
    try:
        document = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    cfg, errors = validate_config(document)
    if errors:
        raise ConfigError("invalid config:\n" + "\n".join(f"  - {e}" for e in errors))
    return cfg


def default_config() -> FullConfig:
    cfg, errors = validate_config(DEFAULT_CONFIG)
    assert not errors, errors
    return cfg
