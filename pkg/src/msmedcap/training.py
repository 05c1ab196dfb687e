"""Two-stage training: mixed-semantic Q-Former pre-training, then prefix
fine-tuning against the frozen LM; plus caption generation and the
ablation grid."""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import BRANCHES, RunConfig, StagePlan
from .data import (
    CLS,
    BatchSampler,
    CaptionSample,
    Manifest,
    MixSpec,
    Tokenizer,
    build_tokenizer,
    load_manifest,
    pad_batch,
)
from .encoders import get_encoder
from .errors import ArtifactError, ConfigError, DataError, FingerprintMismatchError, FrozenParameterError, MSMedCapError, NumericError
from .layers import fingerprint_tensors
from .lm import FrozenLM, beam_decode, build_prefix, greedy_decode, lm_loss, pretrain_toy_lm
from .metrics import EvalPair, evaluate
from .qformer import QFormer, pretrain_loss, project_queries

log = logging.getLogger(__name__)

BRANCH_ENCODER = {"clip": "general", "sam": "detail"}
PRETRAIN_GROUPS = ("queries", "text_embed", "qformer", "heads")
FINETUNE_GROUPS = ("queries", "qformer", "proj")


def derive_seed(*parts) -> int:
    ints = [p if isinstance(p, int) else int.from_bytes(str(p).encode(), "little") % (2**32) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Data plumbing


@dataclass
class CorpusData:
    """Training manifests named ``general`` and ``medical``, the medical test split and the tokenizer."""

    general: Manifest
    medical: Manifest
    test: Manifest
    tokenizer: Tokenizer
    max_caption_tokens: int = 32

    @classmethod
    def from_manifest(cls, manifest: Manifest, cfg: RunConfig, tokenizer: Tokenizer | None = None) -> "CorpusData":
        general = manifest.filter("general", "train", "general")
        medical = manifest.filter("medical", "train", "medical")
        test = manifest.filter("medical", "test", "test")
        if tokenizer is None:
            corpus = [s.caption for s in general.samples + medical.samples] + [cfg.prompt]
            tokenizer = build_tokenizer(corpus)
        return cls(general, medical, test, tokenizer, cfg.max_caption_tokens)

    @classmethod
    def load(cls, data_dir: str | Path, cfg: RunConfig, tokenizer: Tokenizer | None = None) -> "CorpusData":
        return cls.from_manifest(load_manifest(Path(data_dir) / "manifest.jsonl"), cfg, tokenizer)

    def manifests(self) -> list[Manifest]:
        return [self.general, self.medical]

    def by_name(self, name: str) -> Manifest:
        return {"general": self.general, "medical": self.medical, "test": self.test}[name]

    def resolve_mix(self, mix, seed: int) -> MixSpec:
        """Mix labels G, M and G+M; G+M weights the two datasets by size."""
        if isinstance(mix, dict):
            return MixSpec(dict(mix), seed)
        if mix == "G":
            return MixSpec({"general": 1.0}, seed)
        if mix == "M":
            return MixSpec({"medical": 1.0}, seed)
        if mix == "G+M":
            return MixSpec.proportional(self.manifests(), seed)
        raise ConfigError(f"unknown mix {mix!r}")

    def pool_size(self, mix: MixSpec) -> int:
        return sum(len(self.by_name(k)) for k, w in mix.weights.items() if w > 0)

    def text_ids(self, captions: Sequence[str], first: int) -> torch.Tensor:
        return torch.as_tensor(pad_batch([self.tokenizer.encode(c, self.max_caption_tokens, first) for c in captions]))


class FeatureStore:
    """Caches frozen encoder outputs per image (encoders never change)."""

    def __init__(self, cfg: RunConfig):
        self.encoders = {"clip": get_encoder(cfg.general_encoder), "sam": get_encoder(cfg.detail_encoder)}
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def features(self, branch: str, manifest: Manifest, sample: CaptionSample) -> np.ndarray:
        path = str(manifest.image_path(sample))
        key = (branch, path)
        if key not in self._cache:
            self._cache[key] = self.encoders[branch](manifest.load_image(sample)).astype(np.float32)
        return self._cache[key]

    def batch(self, branch: str, items: Sequence[tuple[Manifest, CaptionSample]]) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.features(branch, m, s) for m, s in items]))

    def fingerprints(self) -> dict[str, str]:
        return {
            f"encoder_{BRANCH_ENCODER[b]}": enc.fingerprint() for b, enc in sorted(self.encoders.items())
        }


def encoder_fingerprints(cfg: RunConfig) -> dict[str, str]:
    return {
        "encoder_general": get_encoder(cfg.general_encoder).fingerprint(),
        "encoder_detail": get_encoder(cfg.detail_encoder).fingerprint(),
    }


class JsonlLog:
    def __init__(self, path: str | Path | None = None, echo: Callable[[dict], None] | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self.echo = echo
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if self.echo:
            self.echo(rec)


# ---------------------------------------------------------------------------
# Model container


class CaptionModel(torch.nn.Module):
    """The trainable side: one Q-Former (with query bank and output projection) per active branch."""

    def __init__(self, cfg: RunConfig, vocab_size: int, branches: Iterable[str], seed: int):
        super().__init__()
        self.cfg = cfg
        self.branches = torch.nn.ModuleDict()
        dims = {"clip": cfg.general_encoder.dims, "sam": cfg.detail_encoder.dims}
        for b in BRANCHES:
            if b in branches:
                torch.manual_seed(derive_seed(seed, "init", b))
                self.branches[b] = QFormer(cfg.qformer, dims[b], vocab_size, cfg.lm.width)

    @property
    def active(self) -> list[str]:
        return list(self.branches.keys())

    def blobs(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in self.branches.state_dict().items()}

    def load_blobs(self, params: dict[str, np.ndarray]) -> None:
        state = {k: torch.from_numpy(np.array(v)) for k, v in params.items() if k.split(".")[0] in self.branches}
        missing, unexpected = self.branches.load_state_dict(state, strict=True), None
        del missing, unexpected

    def group_fingerprints(self) -> dict[str, str]:
        out: dict[str, list] = {}
        for b, qf in self.branches.items():
            for n, p in qf.named_parameters():
                out.setdefault(f"{b}.{QFormer.param_group(n)}", []).append((n, p))
        return {k: fingerprint_tensors(v) for k, v in sorted(out.items())}

    def prefix(self, feats: dict[str, torch.Tensor], lm: FrozenLM, prompt_ids: Sequence[int]) -> torch.Tensor:
        rows = {}
        for b, qf in self.branches.items():
            q, _ = qf(feats[b], None, "caption")
            rows[b] = project_queries(qf, q)
        return build_prefix(rows.get("clip"), rows.get("sam"), prompt_ids, lm)


def _changed_groups(before: dict[str, str], after: dict[str, str]) -> set[str]:
    return {k for k in after if before.get(k) != after[k]}


def _check_deltas(stage: str, before: dict[str, str], after: dict[str, str], trainable: Sequence[str]) -> set[str]:
    changed = _changed_groups(before, after)
    illegal = sorted(g for g in changed if g.split(".", 1)[1] not in trainable)
    if illegal:
        raise FrozenParameterError(f"{stage}: frozen parameter groups changed: {illegal}")
    return changed


def _optimizer(params, plan: StagePlan) -> torch.optim.Optimizer:
    o = plan.optimizer
    return torch.optim.AdamW(params, lr=o.lr, betas=tuple(o.betas), weight_decay=o.weight_decay)


def _planned_steps(plan: StagePlan, pool: int) -> tuple[int, int]:
    per_epoch = math.ceil(pool / plan.batch_size)
    total = plan.epochs * per_epoch
    if plan.max_steps is not None:
        total = min(total, plan.max_steps)
    return per_epoch, total


# ---------------------------------------------------------------------------
# Stage 1: mixed-semantic pre-training


class PretrainBranchTrainer:
    """Trains one branch's Q-Former with ITC + ITM + ITG on its own mix."""

    def __init__(self, model: CaptionModel, branch: str, mix: MixSpec, plan: StagePlan, data: CorpusData, store: FeatureStore):
        self.qf = model.branches[branch]
        self.branch = branch
        self.data = data
        self.store = store
        self.opt = _optimizer(self.qf.group_params(PRETRAIN_GROUPS), plan)
        self.sampler = BatchSampler(mix, data.manifests(), plan.batch_size)
        self.steps = 0

    def step(self) -> dict:
        batch = self.sampler.next_batch()
        items = [(self.data.by_name(name), s) for name, s in batch]
        feats = self.store.batch(self.branch, items)
        captions = [s.caption for _, s in batch]
        cls_ids = self.data.text_ids(captions, CLS)
        bos_ids = self.data.text_ids(captions, 1)
        parts = pretrain_loss(self.qf, feats, cls_ids, bos_ids, self.sampler.rng)
        if not torch.isfinite(parts["total"]):
            raise NumericError(f"non-finite pretraining loss at step {self.steps} ({self.branch} branch)")
        self.opt.zero_grad()
        parts["total"].backward()
        self.opt.step()
        with torch.no_grad():
            self.qf.temp.clamp_(0.001, 0.5)
        self.steps += 1
        domains = {}
        for name, _ in batch:
            domains[name] = domains.get(name, 0) + 1
        rec = {"stage": "pretrain", "branch": self.branch, "step": self.steps}
        rec.update({k: float(v.detach()) for k, v in parts.items()})
        rec["domains"] = domains
        return rec


def pretrain_branch(
    cfg: RunConfig, data: CorpusData, store: FeatureStore, branch: str, mix, plan: StagePlan, seed: int, log_fn=None
) -> tuple[dict[str, np.ndarray], list[float], dict]:
    """Pre-train a single branch from its seeded initialization; returns its blobs."""
    model = CaptionModel(cfg, len(data.tokenizer), [branch], seed)
    spec = data.resolve_mix(mix, derive_seed(seed, "pretrain", branch))
    trainer = PretrainBranchTrainer(model, branch, spec, plan, data, store)
    per_epoch, total = _planned_steps(plan, data.pool_size(spec))
    before = model.group_fingerprints()
    epoch_losses, running = [], []
    for _ in range(total):
        rec = trainer.step()
        rec["epoch"] = (trainer.steps - 1) // per_epoch + 1
        running.append(rec["total"])
        if log_fn:
            log_fn(rec)
        if trainer.steps % per_epoch == 0 or trainer.steps == total:
            epoch_losses.append(float(np.mean(running)))
            running = []
    _check_deltas("pretrain", before, model.group_fingerprints(), PRETRAIN_GROUPS)
    return model.blobs(), epoch_losses, trainer.sampler.rng.bit_generator.state


def run_pretrain(
    plan: StagePlan, cfg: RunConfig, data: CorpusData, store: FeatureStore | None = None, log_fn=None, seed: int | None = None
) -> Checkpoint:
    """Train each named branch independently on its mix; encoders stay frozen."""
    plan.validate()
    if plan.stage != "pretrain":
        raise ConfigError("run_pretrain needs a pretrain plan")
    seed = cfg.seed if seed is None else seed
    store = store or FeatureStore(cfg)
    enc_before = encoder_fingerprints(cfg)
    params, epoch_losses, rng_state = {}, {}, {}
    for branch in BRANCHES:
        if branch not in plan.branch_mixes:
            continue
        blobs, losses, state = pretrain_branch(cfg, data, store, branch, plan.branch_mixes[branch], plan, seed, log_fn)
        params.update(blobs)
        epoch_losses[branch] = losses
        rng_state[branch] = state
    if encoder_fingerprints(cfg) != enc_before:
        raise FrozenParameterError("pretrain: encoder fingerprint drifted")
    return Checkpoint(
        params=params,
        config=cfg.to_dict(),
        fingerprints=enc_before,
        step=sum(len(v) for v in epoch_losses.values()),
        rng_state=_jsonable_state(rng_state),
        meta={
            "stage": "pretrain",
            "seed": seed,
            "branches": [b for b in BRANCHES if b in plan.branch_mixes],
            "mixes": plan.branch_mixes,
            "epoch_losses": epoch_losses,
            "tokenizer": data.tokenizer.to_list(),
        },
    )


def _jsonable_state(x):
    if isinstance(x, dict):
        return {k: _jsonable_state(v) for k, v in x.items()}
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


# ---------------------------------------------------------------------------
# Stage 2: captioning with the frozen LM


class FinetuneTrainer:
    """Optimizes query banks, Q-Former bodies and projections against the LM loss."""

    def __init__(self, model: CaptionModel, lm: FrozenLM, mix: MixSpec, plan: StagePlan, data: CorpusData, store: FeatureStore, prompt_ids):
        self.model = model
        self.lm = lm
        self.data = data
        self.store = store
        self.prompt_ids = list(prompt_ids)
        self.named = [
            (f"{b}.{n}", p)
            for b, qf in model.branches.items()
            for n, p in qf.named_parameters()
            if QFormer.param_group(n) in FINETUNE_GROUPS
        ]
        self.opt = _optimizer([p for _, p in self.named], plan)
        self.sampler = BatchSampler(mix, data.manifests(), plan.batch_size)
        self.steps = 0

    def loss_on(self, batch) -> torch.Tensor:
        items = [(self.data.by_name(name), s) for name, s in batch]
        feats = {b: self.store.batch(b, items) for b in self.model.active}
        prefix = self.model.prefix(feats, self.lm, self.prompt_ids)
        return lm_loss(self.lm, prefix, self.data.text_ids([s.caption for _, s in batch], 1))

    def step(self) -> dict:
        loss = self.loss_on(self.sampler.next_batch())
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite finetuning loss at step {self.steps}")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.steps += 1
        return {"stage": "finetune", "step": self.steps, "lm": float(loss.detach())}

    # resumable state -------------------------------------------------------
    def optimizer_blobs(self) -> tuple[dict[str, np.ndarray], dict[str, float]]:
        blobs, steps = {}, {}
        state = self.opt.state
        for name, p in self.named:
            st = state.get(p)
            if not st:
                continue
            blobs[f"optim.{name}.exp_avg"] = st["exp_avg"].numpy().astype(np.float32)
            blobs[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy().astype(np.float32)
            steps[name] = float(st["step"])
        return blobs, steps

    def load_optimizer_blobs(self, blobs: dict[str, np.ndarray], steps: dict[str, float]) -> None:
        for name, p in self.named:
            if name not in steps:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(steps[name], dtype=torch.float32),
                "exp_avg": torch.from_numpy(np.array(blobs[f"optim.{name}.exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(blobs[f"optim.{name}.exp_avg_sq"])),
            }


def prompt_ids(data: CorpusData, cfg: RunConfig) -> list[int]:
    return data.tokenizer.encode(cfg.prompt)[1:-1]


def lm_fingerprint(lm: FrozenLM) -> str:
    return lm.fingerprint()


def run_finetune(
    plan: StagePlan,
    pretrain_ckpt: Checkpoint,
    lm: FrozenLM,
    cfg: RunConfig,
    data: CorpusData,
    store: FeatureStore | None = None,
    log_fn=None,
    seed: int | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
) -> tuple[Checkpoint, CaptionModel]:
    """Fine-tune the Q-Formers and projections through the frozen LM.

    `resume` continues from a finetune checkpoint (parameters, optimizer
    moments, sampler RNG and step count); `stop_after` ends the run early after
    that many total steps (used to produce resumable checkpoints).
    """
    plan.validate()
    if plan.stage != "finetune":
        raise ConfigError("run_finetune needs a finetune plan")
    if not lm.frozen:
        raise ArtifactError("the language model must be frozen before fine-tuning")
    seed = cfg.seed if seed is None else seed
    store = store or FeatureStore(cfg)
    live = encoder_fingerprints(cfg)
    for key, fp in live.items():
        if pretrain_ckpt.fingerprints.get(key) != fp:
            raise FingerprintMismatchError(f"pretrain checkpoint was made with a different {key}")
    if pretrain_ckpt.meta.get("tokenizer") not in (None, data.tokenizer.to_list()):
        raise ArtifactError("pretrain checkpoint tokenizer does not match the corpus tokenizer")
    branches = pretrain_ckpt.meta.get("branches") or sorted({k.split(".")[0] for k in pretrain_ckpt.params})
    model = CaptionModel(cfg, len(data.tokenizer), branches, seed)
    model.load_blobs({k: v for k, v in pretrain_ckpt.params.items() if not k.startswith("optim.")})

    mix = data.resolve_mix(plan.mix, derive_seed(seed, "finetune"))
    trainer = FinetuneTrainer(model, lm, mix, plan, data, store, prompt_ids(data, cfg))
    per_epoch, total = _planned_steps(plan, data.pool_size(mix))
    epoch_losses: list[float] = []
    baseline = pretrain_ckpt.meta.get("group_fingerprints") or model.group_fingerprints()
    if resume is not None:
        if resume.meta.get("stage") != "finetune":
            raise ArtifactError("resume checkpoint is not a finetune checkpoint")
        model.load_blobs({k: v for k, v in resume.params.items() if not k.startswith("optim.")})
        trainer.load_optimizer_blobs(resume.params, resume.meta["optimizer_steps"])
        trainer.sampler.rng.bit_generator.state = resume.rng_state["sampler"]
        trainer.steps = resume.step
        epoch_losses = list(resume.meta.get("epoch_losses", []))
        baseline = resume.meta["baseline_group_fingerprints"]

    lm_before = lm.fingerprint()
    running: list[float] = list(resume.meta.get("running", [])) if resume is not None else []
    end = total if stop_after is None else min(total, stop_after)
    while trainer.steps < end:
        rec = trainer.step()
        rec["epoch"] = (trainer.steps - 1) // per_epoch + 1
        running.append(rec["lm"])
        if log_fn:
            log_fn(rec)
        if trainer.steps % per_epoch == 0 or trainer.steps == total:
            epoch_losses.append(float(np.mean(running)))
            running = []

    if lm.fingerprint() != lm_before:
        raise FrozenParameterError("finetune: language model parameters changed")
    if encoder_fingerprints(cfg) != live:
        raise FrozenParameterError("finetune: encoder fingerprint drifted")
    after = model.group_fingerprints()
    changed = _check_deltas("finetune", baseline, after, FINETUNE_GROUPS)

    opt_blobs, opt_steps = trainer.optimizer_blobs()
    params = model.blobs()
    params.update(opt_blobs)
    ckpt = Checkpoint(
        params=params,
        config=cfg.to_dict(),
        fingerprints={**live, "lm": lm_before},
        step=trainer.steps,
        rng_state={"sampler": _jsonable_state(trainer.sampler.rng.bit_generator.state)},
        meta={
            "stage": "finetune",
            "seed": seed,
            "branches": model.active,
            "tokenizer": data.tokenizer.to_list(),
            "epoch_losses": epoch_losses,
            "running": running,
            "optimizer_steps": opt_steps,
            "baseline_group_fingerprints": baseline,
            "changed_groups": sorted(changed),
            "complete": trainer.steps >= total,
        },
    )
    return ckpt, model


def model_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig, data: CorpusData) -> CaptionModel:
    branches = ckpt.meta.get("branches") or sorted({k.split(".")[0] for k in ckpt.params if not k.startswith("optim.")})
    model = CaptionModel(cfg, len(data.tokenizer), branches, ckpt.meta.get("seed", cfg.seed))
    model.load_blobs({k: v for k, v in ckpt.params.items() if not k.startswith("optim.")})
    return model


def train_lm(cfg: RunConfig, data: CorpusData, seed: int | None = None) -> FrozenLM:
    """Fit the toy LM on all training captions and freeze it."""
    captions = [s.caption for s in data.general.samples + data.medical.samples]
    seed = cfg.seed if seed is None else seed
    return pretrain_toy_lm(captions, data.tokenizer, cfg.lm, derive_seed(seed, "lm"), cfg.max_caption_tokens)


def lm_checkpoint(lm: FrozenLM, cfg: RunConfig, data: CorpusData) -> Checkpoint:
    params = {k: v.detach().numpy().astype(np.float32) for k, v in lm.state_dict().items()}
    return Checkpoint(
        params=params,
        config=cfg.to_dict(),
        fingerprints={"lm": lm.fingerprint()},
        step=cfg.lm.steps,
        meta={"stage": "lm", "tokenizer": data.tokenizer.to_list()},
    )


def lm_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig, data: CorpusData) -> FrozenLM:
    if ckpt.meta.get("stage") != "lm":
        raise ArtifactError("not a language-model checkpoint")
    if ckpt.meta.get("tokenizer") != data.tokenizer.to_list():
        raise ArtifactError("language-model checkpoint was trained with a different vocabulary")
    lm = FrozenLM(cfg.lm, len(data.tokenizer))
    try:
        lm.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.params.items()})
    except RuntimeError as exc:
        raise ArtifactError(f"language-model checkpoint does not fit the configured LM: {exc}") from None
    lm.freeze()
    if lm.fingerprint() != ckpt.fingerprints.get("lm"):
        raise FingerprintMismatchError("language-model parameters do not match the recorded fingerprint")
    return lm


# ---------------------------------------------------------------------------
# Generation and evaluation


def caption_manifest(
    model: CaptionModel, lm: FrozenLM, cfg: RunConfig, data: CorpusData, manifest: Manifest, store: FeatureStore | None = None
) -> list[dict]:
    """Caption every sample of `manifest`; returns ``{image, prediction}`` records in manifest order."""
    store = store or FeatureStore(cfg)
    ids = prompt_ids(data, cfg)
    out = []
    with torch.no_grad():
        for s in manifest.samples:
            feats = {b: store.batch(b, [(manifest, s)]) for b in model.active}
            prefix = model.prefix(feats, lm, ids)[0]
            d = cfg.decode
            if d.strategy == "greedy":
                toks = greedy_decode(lm, prefix, d.max_len)
            else:
                toks = beam_decode(lm, prefix, d.beam_size, d.max_len, d.alpha)
            out.append({"image": s.image_ref, "prediction": data.tokenizer.decode(toks)})
    return out


def write_predictions(records: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps({"image": r["image"], "prediction": r["prediction"]}) + "\n" for r in records))
    return path


def references_of(manifest: Manifest) -> dict[str, list[str]]:
    refs: dict[str, list[str]] = {}
    for s in manifest.samples:
        refs.setdefault(s.image_ref, []).append(s.caption)
    return refs


def score_predictions(records: Sequence[dict], manifest: Manifest) -> dict[str, float | None]:
    refs = references_of(manifest)
    preds = {r["image"]: r["prediction"] for r in records}
    missing = [k for k in refs if k not in preds]
    if missing:
        raise DataError(f"no prediction for {len(missing)} reference images, e.g. {missing[0]}")
    pairs = [EvalPair(k, preds[k], refs[k]) for k in sorted(refs)]
    raw: dict[str, float | None] = dict(evaluate(pairs))
    raw["BERT score"] = None
    raw["BLEURT"] = None
    return raw


# ---------------------------------------------------------------------------
# Ablation grid


@dataclass(frozen=True)
class AblationCell:
    name: str
    clip_mix: Optional[str]
    sam_mix: Optional[str]

    @property
    def model(self) -> str:
        if self.clip_mix and self.sam_mix:
            return "MSMedCap"
        return "BLIP2" if self.clip_mix else "SAM-BLIP2"

    @property
    def key(self) -> str:
        return "".join(self.name.split())

    def mixes(self) -> dict[str, str]:
        return {b: m for b, m in (("clip", self.clip_mix), ("sam", self.sam_mix)) if m is not None}


DEFAULT_GRID = (
    AblationCell("BLIP2 (G)", "G", None),
    AblationCell("BLIP2 (G+M)", "G+M", None),
    AblationCell("SAM-BLIP2 (G+M)", None, "G+M"),
    AblationCell("MSMedCap (G, G)", "G", "G"),
    AblationCell("MSMedCap (G+M, G)", "G+M", "G"),
    AblationCell("MSMedCap (G+M, G+M)", "G+M", "G+M"),
    AblationCell("MSMedCap (G, G+M)", "G", "G+M"),
)


def select_cells(names: Sequence[str] | None, grid: Sequence[AblationCell] = DEFAULT_GRID) -> list[AblationCell]:
    """Pick cells by name; whitespace is ignored ("MSMedCap(G,G+M)" works)."""
    if not names:
        return list(grid)
    by_key = {c.key: c for c in grid}
    out = []
    for n in names:
        k = "".join(n.split())
        if k not in by_key:
            raise ConfigError(f"unknown ablation cell {n!r}; known: {[c.name for c in grid]}")
        out.append(by_key[k])
    return out


@dataclass
class AblationRow:
    cell: AblationCell
    per_seed: dict[int, dict] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def median(self) -> dict[str, float | None] | None:
        if self.error or not self.per_seed:
            return None
        keys = next(iter(self.per_seed.values())).keys()
        return {
            k: (None if any(s[k] is None for s in self.per_seed.values()) else statistics.median(s[k] for s in self.per_seed.values()))
            for k in keys
        }

    def to_dict(self) -> dict:
        return {
            "name": self.cell.name,
            "model": self.cell.model,
            "clip_mix": self.cell.clip_mix or "-",
            "sam_mix": self.cell.sam_mix or "-",
            "status": "failed" if self.error else "ok",
            "error": self.error,
            "per_seed": {str(k): v for k, v in self.per_seed.items()},
            "median": self.median,
        }


def run_ablation(
    grid: Sequence[AblationCell],
    cfg: RunConfig,
    data: CorpusData,
    lm: FrozenLM,
    seeds: Sequence[int],
    store: FeatureStore | None = None,
    out_dir: str | Path | None = None,
    log_fn=None,
) -> list[AblationRow]:
    """For each cell and seed: pretrain its branches, finetune, caption the test split and score.

    A branch pre-trained on a given mix with a given seed is shared across
    cells. A failing cell is recorded and does not stop the others.
    """
    names = [c.name for c in grid]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate ablation cells: {sorted({n for n in names if names.count(n) > 1})}")
    store = store or FeatureStore(cfg)
    cache: dict[tuple[str, str, int], dict[str, np.ndarray]] = {}
    rows = []
    for cell in grid:
        row = AblationRow(cell)
        try:
            for seed in seeds:
                params = {}
                for branch, mix in cell.mixes().items():
                    key = (branch, mix, seed)
                    if key not in cache:
                        cache[key] = pretrain_branch(cfg, data, store, branch, mix, cfg.pretrain, seed, log_fn)[0]
                    params.update(cache[key])
                pre = Checkpoint(
                    params=params,
                    fingerprints=encoder_fingerprints(cfg),
                    meta={"stage": "pretrain", "branches": list(cell.mixes()), "tokenizer": data.tokenizer.to_list(), "seed": seed},
                )
                _, model = run_finetune(cfg.finetune, pre, lm, cfg, data, store, log_fn, seed=seed)
                records = caption_manifest(model, lm, cfg, data, data.test, store)
                if out_dir is not None:
                    write_predictions(records, Path(out_dir) / cell.key / f"seed{seed}" / "predictions.jsonl")
                row.per_seed[seed] = score_predictions(records, data.test)
                log.info("%s seed %d: %s", cell.name, seed, row.per_seed[seed])
        except MSMedCapError as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            log.error("ablation cell %s failed: %s", cell.name, exc)
        rows.append(row)
    return rows
