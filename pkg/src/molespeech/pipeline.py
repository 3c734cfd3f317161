"""Run orchestration: codec fitting, the four training stages, synthesis,
speech QA inference, and artifact persistence.

A run directory holds one checkpoint per stage plus an append-only
JSON-lines metrics log. Every stage re-derives its randomness from the
config seed and its stage tag, so re-running a completed stage writes
byte-identical artifacts. Stage n loads stage n-1 artifacts from disk and
refuses to run without them.

Stage map: 0 pretrains the text-only base model; 1 extends the vocabulary
with semantic ids and trains the speech-synthesis expert (and the acoustic
model, which completes the audio path); 2 trains the text-restoration
expert (and optionally a speech-QA expert) over the frozen stage-1
backbone; 3 trains the expert router on mixed-task data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acoustic import AcousticLm, AcousticLmConfig, acoustic_generate, train_acoustic_lm
from .audio import Waveform, render, spectra
from .autodiff import Tensor, cross_entropy
from .checkpoint import checkpoint_load, checkpoint_save
from .codec import (
    RvqCodec,
    SemanticCodebook,
    acoustic_encode,
    codec_from_state,
    codec_state,
    fit_acoustic_codec,
    fit_semantic_codebook,
    vocoder_decode,
)
from .config import FullConfig, StageSpec
from .data import BatchSampler, MixedSampler, PromptedSample, build_dataset, collate, toy_strings
from .errors import DependencyError, SynthesisError
from .lora import Expert, LoraAdapter, TrainablePolicy, apply_policy, collect_params, expert_deltas, inject_lora
from .mole import MoleModel, init_router, mole_generate, train_router
from .model import LanguageModel, LmConfig, extend_vocabulary, generate, lm_forward
from .optim import AdamWConfig
from .prng import Prng
from .training import train_steps
from .vocab import UnifiedVocab

LOG_EVERY = 50


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.ckpt"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def ensure(self) -> "RunPaths":
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        self.reports.mkdir(parents=True, exist_ok=True)
        return self

    def require(self, name: str) -> Path:
        path = self.checkpoint(name)
        if not path.exists():
            raise DependencyError(f"missing {path.name}; run the producing step first")
        return path


class MetricsLog:
    def __init__(self, path: Path, stage: str):
        self.path = Path(path)
        self.stage = stage

    def append(self, record: dict) -> None:
        record = {"stage": self.stage, **record}
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def step_hook(self, steps: int):
        def hook(rec: dict) -> None:
            if rec["step"] % LOG_EVERY == 0 or rec["step"] == steps - 1:
                self.append(rec)

        return hook


def stage_opt(spec: StageSpec) -> AdamWConfig:
    return AdamWConfig(lr_max=spec.lr_max, lr_min=spec.lr_min, total_steps=max(spec.steps, 1))


# -- dataset assembly ---------------------------------------------------------


def stage_datasets(cfg: FullConfig, spec: StageSpec, book: SemanticCodebook | None) -> dict[str, list[PromptedSample]]:
    """Deterministic per-kind sample lists for one stage."""
    out = {}
    for kind in spec.kinds:
        rng = Prng(cfg.seed).child(f"data-{kind}")
        out[kind] = build_dataset(kind, spec.n_tts, rng, cfg.vocab, book)
    return out


def held_out_strings(cfg: FullConfig, n: int, tag: str = "eval") -> list[str]:
    """Evaluation strings disjoint from every training string."""
    train = set(toy_strings(Prng(cfg.seed).child("data-tts"), cfg.stage(1).n_tts))
    rng = Prng(cfg.seed).child(f"data-{tag}")
    out: list[str] = []
    while len(out) < n:
        for s in toy_strings(rng, n):
            if s not in train and len(out) < n:
                out.append(s)
    return out


# -- model training -----------------------------------------------------------


def next_token_loss(model: LanguageModel, batch, deltas=None) -> Tensor:
    logits = lm_forward(model, batch.inputs, deltas)
    return cross_entropy(
        logits.reshape(-1, model.n_vocab_rows), batch.labels.reshape(-1), ignore_id=model.cfg.vocab.pad
    )


def pretrain_base_lm(
    corpus: list[PromptedSample],
    lm_cfg: LmConfig,
    opt_cfg: AdamWConfig,
    steps: int,
    rng: Prng,
    batch_size: int = 32,
    on_step=None,
) -> LanguageModel:
    """Stage-0: train the text-only base model from scratch on the QA corpus."""
    model = LanguageModel.init(lm_cfg, rng.child("model"))
    if steps == 0:
        return model
    trainable = apply_policy(model.params, TrainablePolicy.everything(model.params))
    sampler = BatchSampler(corpus, batch_size, rng.child("batches"))

    def loss_fn(step):
        return next_token_loss(model, collate(sampler.next(), lm_cfg.vocab.pad, lm_cfg.max_seq_len))

    train_steps(loss_fn, trainable, opt_cfg, steps, on_step=on_step)
    return model


def train_expert(
    model: LanguageModel,
    expert: Expert,
    policy: TrainablePolicy,
    samples: list[PromptedSample],
    opt_cfg: AdamWConfig,
    steps: int,
    rng: Prng,
    batch_size: int = 32,
    on_step=None,
) -> None:
    """Adapter training under a stage policy (stage-1 or stage-2)."""
    all_params = collect_params(model, [expert])
    trainable = apply_policy(all_params, policy)
    if steps == 0:
        return
    sampler = BatchSampler(samples, batch_size, rng.child("batches"))
    deltas = expert_deltas(expert)

    def loss_fn(step):
        return next_token_loss(model, collate(sampler.next(), model.cfg.vocab.pad, model.cfg.max_seq_len), deltas)

    train_steps(loss_fn, trainable, opt_cfg, steps, on_step=on_step)


# -- inference views ----------------------------------------------------------


class LmView:
    """A language model plus a fixed adaptation, behind one generate()."""

    def __init__(self, model: LanguageModel, expert: Expert | None = None, label: str = "base"):
        self.model = model
        self.deltas = expert_deltas(expert) if expert is not None else None
        self.label = label

    @property
    def vocab(self) -> UnifiedVocab:
        return self.model.cfg.vocab

    def generate(self, prompt, max_new: int, **kw) -> list[int]:
        return generate(self.model, prompt, max_new, deltas=self.deltas, **kw)


class MoleView:
    """Routes each prompt, then decodes with the gated expert mixture."""

    def __init__(self, mole: MoleModel, label: str = "mole"):
        self.mole = mole
        self.label = label

    @property
    def vocab(self) -> UnifiedVocab:
        return self.mole.base.cfg.vocab

    def generate(self, prompt, max_new: int, **kw) -> list[int]:
        return mole_generate(self.mole, prompt, max_new, **kw)


# -- end-to-end inference -----------------------------------------------------


def tts_prompt(vocab: UnifiedVocab, text: str) -> list[int]:
    return [vocab.bos, vocab.sys_tts, vocab.user, *vocab.encode_chars(text), vocab.assistant]


def synthesize(view, book: SemanticCodebook, codec: RvqCodec, aclm: AcousticLm, text: str) -> Waveform:
    """Text -> semantic ids (LM, restricted decoding) -> code grid -> audio."""
    if not text:
        raise SynthesisError("empty text")
    vocab = view.vocab
    allowed = set(range(vocab.semantic_start, vocab.semantic_start + book.k)) | {vocab.eos}
    prompt = tts_prompt(vocab, text)
    max_new = 4 * len(text) + 16
    sem = view.generate(prompt, max_new, stop_ids={vocab.eos}, allowed_ids=allowed)
    sem = [t for t in sem if t != vocab.eos]
    if not sem:
        raise SynthesisError(f"model produced no semantic tokens for {text!r}")
    grid = acoustic_generate(aclm, np.asarray(sem, dtype=np.int64))
    return vocoder_decode(grid, codec)


@dataclass
class SpeechQaResult:
    text: str
    wave: Waveform | None
    format_ok: bool
    raw_ids: list


def speech_qa_infer(view, book: SemanticCodebook, codec: RvqCodec, aclm: AcousticLm, question: str) -> SpeechQaResult:
    """One decoding pass: text answer, then <speech>, then semantic tokens.

    A reply with no <speech> id before <eos> is reported as a format
    violation and falls back to text only.
    """
    vocab = view.vocab
    prompt = [vocab.bos, vocab.sys_sqa, vocab.user, *vocab.encode_chars(question), vocab.assistant]
    out = view.generate(prompt, max_new=32, stop_ids={vocab.eos})
    body = out[:-1] if out and out[-1] == vocab.eos else list(out)
    char_limit = vocab.semantic_start
    if vocab.speech in body:
        cut = body.index(vocab.speech)
        text_ids, sem_ids = body[:cut], body[cut + 1 :]
        format_ok = (
            out[-1] == vocab.eos
            and all(vocab.role(t) in ("renderable", "operator") for t in text_ids)
            and all(vocab.is_semantic(t) for t in sem_ids)
            and body.count(vocab.speech) == 1
            and len(sem_ids) > 0
        )
    else:
        text_ids, sem_ids, format_ok = body, [], False
    text = "".join(
        vocab.decode_chars([t]) if vocab.role(t) in ("renderable", "operator") else "" for t in text_ids
    )
    wave = None
    if sem_ids:
        wave = vocoder_decode(acoustic_generate(aclm, np.asarray(sem_ids, dtype=np.int64)), codec)
    return SpeechQaResult(text=text, wave=wave, format_ok=format_ok, raw_ids=out)


# -- artifact (de)serialization -------------------------------------------------


def lm_state(model: LanguageModel) -> dict[str, np.ndarray]:
    return {f"lm.{name}": arr for name, arr in model.state().items()}


def lm_from_state(state: dict[str, np.ndarray], cfg: FullConfig) -> LanguageModel:
    params = {
        name[3:]: Tensor(state[name].copy(), requires_grad=True) for name in sorted(state) if name.startswith("lm.")
    }
    if not params:
        raise DependencyError("checkpoint holds no language-model parameters")
    return LanguageModel(cfg.lm, params, n_vocab_rows=params["embed.tok"].data.shape[0])


def expert_from_state(state: dict[str, np.ndarray], name: str, model: LanguageModel, alpha: float) -> Expert:
    prefix = f"experts.{name}."
    adapters: dict[str, LoraAdapter] = {}
    rank = None
    for key in sorted(state):
        if not (key.startswith(prefix) and key.endswith(".A")):
            continue
        target = key[len(prefix) : -2]
        a = state[key]
        b = state[prefix + target + ".B"]
        rank = a.shape[1]
        adapters[target] = LoraAdapter(
            target=target,
            a=Tensor(a.copy(), requires_grad=True),
            b=Tensor(b.copy(), requires_grad=True),
            rank=rank,
            alpha=alpha,
        )
    if not adapters:
        raise DependencyError(f"checkpoint holds no adapters for expert {name!r}")
    expert = Expert(name=name, rank=rank, alpha=alpha, adapters=adapters)
    model.experts[name] = expert
    return expert


def aclm_config(cfg: FullConfig) -> AcousticLmConfig:
    return AcousticLmConfig(
        n_stages=cfg.codec.rvq_stages,
        n_entries=cfg.codec.rvq_entries,
        n_semantic=cfg.vocab.n_semantic,
        sem_offset=cfg.vocab.n_text,
        d_model=cfg.acoustic.d_model,
        n_layers=cfg.acoustic.n_layers,
        n_heads=cfg.acoustic.n_heads,
        d_ff=cfg.acoustic.d_ff,
        max_seq_len=cfg.acoustic.max_seq_len,
    )


def aclm_from_state(state: dict[str, np.ndarray], cfg: FullConfig) -> AcousticLm:
    params = {
        name[5:]: Tensor(state[name].copy(), requires_grad=True) for name in sorted(state) if name.startswith("aclm.")
    }
    if not params:
        raise DependencyError("checkpoint holds no acoustic-model parameters")
    return AcousticLm(aclm_config(cfg), params)


def load_codec(paths: RunPaths, cfg: FullConfig) -> tuple[RvqCodec, SemanticCodebook]:
    state, _ = checkpoint_load(paths.require("codec"))
    return codec_from_state(state, id_base=cfg.vocab.n_text)


# -- stage runners --------------------------------------------------------------


def run_fit_codec(cfg: FullConfig, paths: RunPaths) -> None:
    paths.ensure()
    rng = Prng(cfg.seed).child("codec")
    strings = toy_strings(rng.child("strings"), cfg.codec_fit_strings)
    frames = np.concatenate([render(s).frames() for s in strings] + [np.zeros((64, 64), dtype=np.float32)], axis=0)
    codec = fit_acoustic_codec(frames, cfg.codec, rng.child("fit"))
    book = fit_semantic_codebook(
        spectra(Waveform(frames.reshape(-1))),
        cfg.codec.k_semantic,
        cfg.codec.semantic_iters,
        rng.child("semantic"),
        id_base=cfg.vocab.n_text,
    )
    checkpoint_save(paths.checkpoint("codec"), codec_state(codec, book), cfg.raw)
    MetricsLog(paths.metrics, "codec").append({"step": 0, "semantic_objective": book.objective_history[-1]})


def run_pretrain(cfg: FullConfig, paths: RunPaths) -> None:
    paths.ensure()
    spec = cfg.stage(0)
    log = MetricsLog(paths.metrics, "stage0")
    samples = stage_datasets(cfg, spec, None)["text_qa"]
    model = pretrain_base_lm(
        samples,
        cfg.lm,
        stage_opt(spec),
        spec.steps,
        Prng(cfg.seed).child("stage0"),
        spec.batch,
        on_step=log.step_hook(spec.steps),
    )
    checkpoint_save(paths.checkpoint("stage0"), lm_state(model), cfg.raw)


def run_stage1(cfg: FullConfig, paths: RunPaths) -> None:
    paths.ensure()
    spec = cfg.stage(1)
    base_state, _ = checkpoint_load(paths.require("stage0"))
    codec, book = load_codec(paths, cfg)
    rng = Prng(cfg.seed).child("stage1")

    model = extend_vocabulary(lm_from_state(base_state, cfg), cfg.vocab.n_semantic, 0.02, rng.child("extend"))
    expert = inject_lora(model, "tts", cfg.lora.rank, cfg.lora.alpha, rng.child("inject"))
    samples = stage_datasets(cfg, spec, book)["tts"]
    log = MetricsLog(paths.metrics, "stage1")
    train_expert(
        model,
        expert,
        TrainablePolicy.stage1(expert),
        samples,
        stage_opt(spec),
        spec.steps,
        rng.child("train"),
        spec.batch,
        on_step=log.step_hook(spec.steps),
    )
    state = {**lm_state(model), **{k: v.data for k, v in expert.params().items()}}
    checkpoint_save(paths.checkpoint("stage1"), state, cfg.raw)

    # The acoustic half of the speech path trains here too: stage-1 is what
    # makes the system able to speak at all.
    aclm = AcousticLm.init(aclm_config(cfg), rng.child("aclm"))
    pairs = []
    for s in samples:
        wave = render(s.text)
        pairs.append((np.asarray(s.target_ids[:-1], dtype=np.int64), acoustic_encode(wave, codec)))
    opt = AdamWConfig(lr_max=cfg.acoustic.lr_max, lr_min=cfg.acoustic.lr_min, total_steps=max(cfg.acoustic.steps, 1))
    alog = MetricsLog(paths.metrics, "acoustic_lm")
    train_acoustic_lm(
        aclm,
        pairs,
        opt,
        cfg.acoustic.steps,
        rng.child("aclm-train"),
        cfg.acoustic.batch,
        on_step=alog.step_hook(cfg.acoustic.steps),
    )
    checkpoint_save(paths.checkpoint("aclm"), {f"aclm.{k}": v for k, v in aclm.state().items()}, cfg.raw)


def _clone_adapters(src: Expert, dst: Expert) -> None:
    for target, ad_ in src.adapters.items():
        dst.adapters[target].a.data[...] = ad_.a.data
        dst.adapters[target].b.data[...] = ad_.b.data


def run_stage2(cfg: FullConfig, paths: RunPaths) -> None:
    paths.ensure()
    spec = cfg.stage(2)
    state, _ = checkpoint_load(paths.require("stage1"))
    codec, book = load_codec(paths, cfg)
    model = lm_from_state(state, cfg)
    tts = expert_from_state(state, "tts", model, cfg.lora.alpha)
    rng = Prng(cfg.seed).child("stage2")
    datasets = stage_datasets(cfg, spec, book)

    experts = spec.experts or ["text_qa"]
    out_state = dict(state)
    for name in experts:
        expert = inject_lora(model, name, cfg.lora.rank, cfg.lora.alpha, rng.child(f"inject-{name}"))
        if cfg.lora.stage2_init == "continue":
            _clone_adapters(tts, expert)
        log = MetricsLog(paths.metrics, f"stage2-{name}")
        train_expert(
            model,
            expert,
            TrainablePolicy.stage2(expert),
            datasets[name],
            stage_opt(spec),
            spec.steps,
            rng.child(f"train-{name}"),
            spec.batch,
            on_step=log.step_hook(spec.steps),
        )
        out_state.update({k: v.data for k, v in expert.params().items()})
    checkpoint_save(paths.checkpoint("stage2"), out_state, cfg.raw)


def run_stage3(cfg: FullConfig, paths: RunPaths) -> None:
    paths.ensure()
    spec = cfg.stage(3)
    state, _ = checkpoint_load(paths.require("stage2"))
    _, book = load_codec(paths, cfg)
    model = lm_from_state(state, cfg)
    experts = [expert_from_state(state, name, model, cfg.lora.alpha) for name in cfg.mole.experts]
    rng = Prng(cfg.seed).child("stage3")
    router = init_router(cfg.lm.d_model, len(experts), rng.child("router"), hidden=cfg.mole.router_hidden)
    mole = MoleModel(base=model, experts=experts, router=router, hard_gates=cfg.mole.hard_gates)

    datasets = stage_datasets(cfg, spec, book)
    mixed = [s for kind in spec.kinds for s in datasets[kind]]
    log = MetricsLog(paths.metrics, "stage3")
    sampler = MixedSampler({k: datasets[k] for k in spec.kinds}, spec.ratio, spec.batch, rng.child("mix"))
    train_router(
        mole,
        mixed,
        stage_opt(spec),
        spec.steps,
        rng.child("train"),
        spec.batch,
        sampler=sampler,
        on_step=log.step_hook(spec.steps),
    )
    out_state = dict(state)
    out_state.update({k: v.data for k, v in router.items()})
    checkpoint_save(paths.checkpoint("stage3"), out_state, cfg.raw)


# -- loading bundles for evaluation --------------------------------------------


@dataclass
class Bundle:
    cfg: FullConfig
    codec: RvqCodec
    book: SemanticCodebook
    aclm: AcousticLm
    base_lm: LanguageModel | None = None
    lm: LanguageModel | None = None
    experts: dict | None = None
    mole: MoleModel | None = None

    def view(self, which: str):
        if which == "base":
            return LmView(self.base_lm, label="base")
        if which == "mole":
            return MoleView(self.mole)
        return LmView(self.lm, expert=self.experts[which], label=which)


def load_bundle(cfg: FullConfig, paths: RunPaths, upto: int = 3) -> Bundle:
    codec, book = load_codec(paths, cfg)
    aclm = aclm_from_state(checkpoint_load(paths.require("aclm"))[0], cfg)
    bundle = Bundle(cfg=cfg, codec=codec, book=book, aclm=aclm)
    if upto >= 0:
        bundle.base_lm = lm_from_state(checkpoint_load(paths.require("stage0"))[0], cfg)
    top = max(n for n in (1, 2, 3) if n <= upto and paths.checkpoint(f"stage{n}").exists()) if upto >= 1 else None
    if top is None:
        return bundle
    state, _ = checkpoint_load(paths.require(f"stage{top}"))
    bundle.lm = lm_from_state(state, cfg)
    names = sorted({key.split(".")[1] for key in state if key.startswith("experts.")})
    bundle.experts = {name: expert_from_state(state, name, bundle.lm, cfg.lora.alpha) for name in names}
    if any(key.startswith("router.") for key in state):
        router = {k: Tensor(state[k].copy(), requires_grad=True) for k in sorted(state) if k.startswith("router.")}
        bundle.mole = MoleModel(
            base=bundle.lm,
            experts=[bundle.experts[n] for n in cfg.mole.experts],
            router=router,
            hard_gates=cfg.mole.hard_gates,
        )
    return bundle
