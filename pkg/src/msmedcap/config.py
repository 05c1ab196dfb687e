"""Run configuration: one declarative JSON document holding every default.

``RunConfig().to_dict()`` is the resolved config; ``load_config`` accepts a
partial document and fills in the rest, rejecting unknown keys.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .data import CorpusConfig
from .encoders import DETAIL_SPEC, GENERAL_SPEC, EncoderSpec
from .errors import ConfigError
from .lm import LMConfig
from .qformer import QFormerConfig

BRANCHES = ("clip", "sam")
MIX_LABELS = ("G", "M", "G+M")


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01


@dataclass
class StagePlan:
    stage: str = "pretrain"
    epochs: int = 3
    batch_size: int = 16
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    # pretrain: one mix per branch; finetune: `mix`
    branch_mixes: Optional[dict[str, Union[str, dict[str, float]]]] = None
    mix: Optional[Union[str, dict[str, float]]] = None
    max_steps: Optional[int] = None

    def validate(self) -> None:
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.optimizer.kind != "adamw":
            raise ConfigError("only the adamw optimizer is supported")
        if self.stage == "pretrain":
            if not self.branch_mixes or self.mix is not None:
                raise ConfigError("a pretrain plan names one mix per branch (branch_mixes) and no single mix")
            for b, m in self.branch_mixes.items():
                if b not in BRANCHES:
                    raise ConfigError(f"unknown branch {b!r}")
                _check_mix(m)
        else:
            if self.mix is None or self.branch_mixes:
                raise ConfigError("a finetune plan names exactly one dataset mix")
            _check_mix(self.mix)


def _check_mix(m) -> None:
    if isinstance(m, str):
        if m not in MIX_LABELS:
            raise ConfigError(f"unknown mix label {m!r}; use one of {MIX_LABELS} or explicit weights")
    elif isinstance(m, dict):
        if any((not isinstance(v, (int, float))) or v < 0 for v in m.values()) or not any(v > 0 for v in m.values()):
            raise ConfigError("mix weights must be nonnegative with at least one positive")
    else:
        raise ConfigError(f"bad mix {m!r}")


def default_pretrain() -> StagePlan:
    return StagePlan("pretrain", branch_mixes={"clip": "G", "sam": "G+M"})


def default_finetune() -> StagePlan:
    return StagePlan("finetune", optimizer=OptimizerConfig(lr=5e-4), mix="M")


@dataclass
class DecodeConfig:
    strategy: str = "beam"
    beam_size: int = 3
    alpha: float = 0.7
    max_len: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    general_encoder: EncoderSpec = GENERAL_SPEC
    detail_encoder: EncoderSpec = DETAIL_SPEC
    qformer: QFormerConfig = field(default_factory=QFormerConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    pretrain: StagePlan = field(default_factory=default_pretrain)
    finetune: StagePlan = field(default_factory=default_finetune)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    branches: tuple[str, ...] = BRANCHES
    prompt: str = "a picture of"
    max_caption_tokens: int = 32
    ablation_seeds: tuple[int, ...] = (0, 1, 2)

    def validate(self) -> "RunConfig":
        self.pretrain.validate()
        self.finetune.validate()
        if self.pretrain.stage != "pretrain" or self.finetune.stage != "finetune":
            raise ConfigError("pretrain/finetune plans have the wrong stage tag")
        if not self.branches or any(b not in BRANCHES for b in self.branches):
            raise ConfigError(f"branches must be a non-empty subset of {BRANCHES}")
        if self.general_encoder.kind != "general" or self.detail_encoder.kind != "detail":
            raise ConfigError("encoder kinds do not match their slots")
        if self.decode.strategy not in ("greedy", "beam"):
            raise ConfigError(f"unknown decode strategy {self.decode.strategy!r}")
        if self.decode.beam_size < 1 or self.decode.max_len < 1:
            raise ConfigError("beam_size and max_len must be >= 1")
        if self.qformer.max_text_len < self.max_caption_tokens + 2:
            raise ConfigError("qformer.max_text_len must fit max_caption_tokens plus framing")
        if self.corpus.image_size != self.general_encoder.image_size or self.corpus.image_size != self.detail_encoder.image_size:
            raise ConfigError("corpus image_size must match both encoders")
        return self

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _to_jsonable(x):
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def _build(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if origin is Union:
        if value is None:
            return None
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        for a in args:
            if typing.get_origin(a) is Union:
                return _build(a, value, where)
        return value
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def config_from_dict(d: dict[str, Any]) -> RunConfig:
    """Merge a (possibly partial) document over the defaults and validate."""
    merged = _deep_merge(RunConfig().to_dict(), d)
    # plan-specific slots are replaced wholesale, not merged
    for stage in ("pretrain", "finetune"):
        if stage in d and isinstance(d[stage], dict):
            for key in ("branch_mixes", "mix"):
                if key in d[stage]:
                    merged[stage][key] = d[stage][key]
    return _build(RunConfig, merged, "config").validate()


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("branch_mixes", "mix"):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    return config_from_dict(doc)
