"""Run configuration: one YAML file with a section per module.

Precedence is command-line flags > file > defaults. The config hash covers
everything except ``seed`` and ``output_dir``, so runs that differ only by
seed share a hash and can be summarised together; the seed is recorded next
to the hash in every checkpoint and report.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import DESK_BACKBONE, BackboneConfig, ProjectorConfig
from .baselines import BaselineSchedule
from .evaluation import SelectionPolicy, SplitSpec
from .preprocess import ROISpec
from .ssl import AugmentationPolicy, SSLSchedule
from .synth import PhantomConfig
from .transformer import Stage2Schedule, TransformerConfig
from .vicreg import VICRegWeights


class ConfigMismatchError(ValueError):
    """Artifact was produced under a different configuration."""


@dataclass(frozen=True)
class SynthSection:
    n_patients: int = 100
    cores_per_patient: int = 10
    cancer_rate: float = 0.4
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


@dataclass(frozen=True)
class RunConfig:
    synth: SynthSection = field(default_factory=SynthSection)
    roi: ROISpec = field(default_factory=ROISpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    vicreg: VICRegWeights = field(default_factory=VICRegWeights)
    ssl: SSLSchedule = field(default_factory=SSLSchedule)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    stage2: Stage2Schedule = field(default_factory=Stage2Schedule)
    baseline: BaselineSchedule = field(default_factory=BaselineSchedule)
    split: SplitSpec = field(default_factory=SplitSpec)
    selection: SelectionPolicy = field(default_factory=SelectionPolicy)
    # ROIs per core drawn for the Stage-1 pool and for the online probe (None = all)
    ssl_rois_per_core: int | None = None
    probe_rois_per_core: int | None = 8
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if tuple(self.backbone.input_size_px) != tuple(self.roi.output_size_px):
            raise ValueError("backbone input size must equal the ROI output size")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data or {})

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        d.pop("seed", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def desk_config(**overrides) -> RunConfig:
    """Reduced-compute preset: 32 px ROIs, narrow backbone, paper-size transformer,
    and the shortened schedules used for the synthetic end-to-end check."""
    cfg = RunConfig(
        roi=ROISpec(output_size_px=(32, 32)),
        backbone=DESK_BACKBONE,
        projector=ProjectorConfig((512, 512, 512)),
        ssl=SSLSchedule(epochs=20, batch_size=64, warmup_epochs=10, peak_lr=1e-4, eval_every=5),
        stage2=Stage2Schedule(epochs=15),
        baseline=BaselineSchedule(epochs=15, batch_size=128),
        ssl_rois_per_core=8,
    )
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {"default": RunConfig, "desk": desk_config}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _convert(tp, value):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        return _build(tp, value)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v) for v in value)
        return tuple(_convert(a, v) for a, v in zip(args, value))
    if origin in (typing.Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        return _convert(non_none[0], value) if len(non_none) == 1 else value
    if tp is float:
        return float(value)
    if tp is int:
        return int(value)
    return value


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise TypeError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _convert(hints[k], v) for k, v in data.items()}
    return cls(**kwargs)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (value parsed as YAML)."""
    return RunConfig.from_dict(override_dict(cfg.to_dict(), overrides))


def override_dict(d: dict, overrides: list[str]) -> dict:
    """Dict-level form of :func:`apply_overrides`; validation is left to the caller."""
    d = copy.deepcopy(d)
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not of the form key=value")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return d
