"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import DETECTION_SPECS, CropSpec
from .pipeline import StageConfig
from .synthdata import DataConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    n_train: int = 2000
    n_test: int = 500
    n_classes: int = 4
    size: int = 96
    min_size: int = 12
    max_size: int = 40
    noise: float = 0.05
    p_helmet: float = 0.6
    p_cross_right: float = 0.5
    max_objects: int = 4
    max_tries: int = 50

    def data_config(self, n_scenes: int, seed: int) -> DataConfig:
        return DataConfig(n_scenes=n_scenes, n_classes=self.n_classes, size=self.size, min_size=self.min_size,
                          max_size=self.max_size, noise=self.noise, p_helmet=self.p_helmet,
                          p_cross_right=self.p_cross_right, max_objects=self.max_objects,
                          max_tries=self.max_tries, seed=seed)


@dataclass(frozen=True)
class ClusterSection:
    window_object_range: tuple = (3, 6)
    layout_range: tuple = (3, 6)
    min_per_class: int = 50
    max_points: int = 300
    damping: float = 0.9
    max_iter: int = 1000
    stable_iter: int = 50
    # candidate windows per training scene used for clustering and stages b-d
    n_jitter: int = 8
    n_random: int = 8


@dataclass(frozen=True)
class StagesSection:
    a: StageConfig = StageConfig(iterations=300, lr=0.01, batch=64, pos_fraction=1.0)
    b: StageConfig = StageConfig(iterations=600, lr=0.01, batch=64, pos_fraction=1.0)
    c: StageConfig = StageConfig(iterations=600, lr=0.01, batch=64, pos_fraction=0.5)
    d: StageConfig = StageConfig(iterations=400, lr=0.01, batch=64, pos_fraction=0.5)
    in_size: int = 32
    c1: int = 8
    c2: int = 16
    feature_dim: int = 64
    dtype: str = "float32"
    # branches trained by the CLI workflow, in feature-concatenation order
    crop_specs: tuple = tuple(s.tag for s in DETECTION_SPECS)

    def __post_init__(self):
        if not self.crop_specs:
            raise ValueError("crop_specs must not be empty")
        self.specs()

    def specs(self) -> tuple:
        try:
            return tuple(CropSpec.from_tag(t) for t in self.crop_specs)
        except (ValueError, IndexError) as e:
            raise ValueError(f"bad crop spec in {list(self.crop_specs)}: {e}") from e


@dataclass(frozen=True)
class SvmSection:
    lam: float = 1e-3
    iterations: int = 300
    neg_iou: float = 0.3
    # training windows per scene whose features feed the SVMs and box regressors
    n_jitter: int = 4
    n_random: int = 6
    bbox_iou: float = 0.6
    bbox_alpha: float = 10.0


@dataclass(frozen=True)
class DetectSection:
    n_jitter: int = 10
    n_random: int = 10
    nms_iou: float = 0.3
    refine: bool = True


@dataclass(frozen=True)
class EvalSection:
    iou: float = 0.5
    plots: bool = True


@dataclass(frozen=True)
class AblateSection:
    grid: str = "supervision"
    seeds: int = 5
    refine: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    stages: StagesSection = field(default_factory=StagesSection)
    svm: SvmSection = field(default_factory=SvmSection)
    detect: DetectSection = field(default_factory=DetectSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(doc).__name__}")
    if cls is StageConfig:
        return _build_stage(doc, path)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = getattr(cls(), name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def _build_stage(doc, path):
    fields = {f.name for f in dataclasses.fields(StageConfig)}
    unknown = sorted(set(doc) - fields)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    try:
        return StageConfig(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _merge_stage_defaults(doc: dict) -> dict:
    # partial stage blocks inherit the remaining fields from the defaults
    stages = doc.get("stages")
    if not isinstance(stages, dict):
        return doc
    out = dict(doc)
    out["stages"] = dict(stages)
    defaults = StagesSection()
    for s in "abcd":
        if isinstance(stages.get(s), dict):
            base = dataclasses.asdict(getattr(defaults, s))
            unknown = sorted(set(stages[s]) - set(base))
            if unknown:
                raise ConfigError(f"stages.{s}: unknown key(s) {', '.join(unknown)}")
            out["stages"][s] = {**base, **stages[s]}
    return out


def from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, _merge_stage_defaults(doc), "")


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Defaults, overlaid with the JSON file at ``path``, then ``seed``."""
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"{p}: config file not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
        cfg = from_dict(doc)
    return cfg if seed is None else cfg.with_seed(seed)
