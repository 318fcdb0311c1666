"""Pipeline configuration: per-class presets, validation and path overrides."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .boosting import DEFAULT_SCHEDULE, HARD_NEGATIVE_CAP
from .dataset import CAR_JITTER, CYCLIST_JITTER, SIGN_JITTER, THRESHOLD_JITTER, JitterParams
from .features import COMBINATIONS
from .subcat import MIN_CLUSTER_SIZE, ClassGeometry

SPACES = ("geometric", "visual", "aspect")
PROTOCOLS = ("kitti", "gtsdb")
MATCHERS = ("overlap", "uiuc")
ENV_PREFIX = "TRAFFICDET_"


class ConfigError(ValueError):
    pass


@dataclass
class ClassConfig:
    labels: list[str] = field(default_factory=list)  # annotation class names; default [class name]
    K: int = 1
    space: str = "aspect"
    base_height: int = 32
    margin: int = 4
    fixed_width: int | None = None
    padded: int | None = None
    nu: float = 0.1
    depth: int = 2
    schedule: list[int] = field(default_factory=lambda: list(DEFAULT_SCHEDULE))
    features: str = "ACF"
    nms: float = 0.5
    eval_overlap: float = 0.5
    protocol: str = "kitti"
    matcher: str = "overlap"
    difficulty: str | None = None
    jitter: JitterParams = field(default_factory=JitterParams)
    # extra, untrained positives that only lower the soft-cascade reject thresholds
    threshold_jitter: JitterParams = field(default_factory=lambda: THRESHOLD_JITTER)
    negatives_per_image: int = 10
    hard_negative_cap: int = HARD_NEGATIVE_CAP
    hard_negatives_per_image: int = 25
    hard_negative_overlap: float = 0.1
    min_cluster_size: int = MIN_CLUSTER_SIZE

    def geometry(self) -> ClassGeometry:
        return ClassGeometry(self.base_height, self.margin, self.fixed_width, self.padded)


PRESETS = {
    "sign": ClassConfig(K=1, space="aspect", base_height=20, fixed_width=20, padded=30, nu=0.1, depth=3,
                        features="all", eval_overlap=0.6, protocol="gtsdb", jitter=SIGN_JITTER),
    "car": ClassConfig(labels=["Car"], K=25, space="geometric", base_height=52, margin=4, nu=0.1, depth=4,
                       features="ACF+spLBP", eval_overlap=0.7, protocol="kitti", difficulty="moderate",
                       jitter=CAR_JITTER),
    "cyclist": ClassConfig(labels=["Cyclist"], K=4, space="aspect", base_height=56, margin=4, nu=0.1, depth=4,
                           features="ACF+spLBP", eval_overlap=0.5, protocol="kitti", difficulty="moderate",
                           jitter=CYCLIST_JITTER),
}


@dataclass
class Paths:
    annotations: str | None = None
    images: str | None = None
    work_dir: str = "work"
    class_map: str | None = None


@dataclass
class DetectConfig:
    scales_per_octave: int = 8
    stride: int = 1


@dataclass
class PipelineConfig:
    classes: dict[str, ClassConfig]
    seed: int = 0
    annotation_format: str = "csv"
    csv_header: bool = False
    paths: Paths = field(default_factory=Paths)
    detect: DetectConfig = field(default_factory=DetectConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def work_dir(self) -> Path:
        return self.resolve(self.paths.work_dir)


def _check_keys(d: dict, cls, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _class_config(name: str, d: dict) -> ClassConfig:
    d = dict(d)
    preset = d.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"class {name}: unknown preset {preset!r}")
    _check_keys(d, ClassConfig, f"class {name}")
    base = PRESETS[preset] if preset else ClassConfig()
    for key in ("jitter", "threshold_jitter"):
        if key in d:
            j = d[key]
            _check_keys(j, JitterParams, f"class {name}.{key}")
            if "scale" in j:
                j = {**j, "scale": tuple(j["scale"])}
            d[key] = JitterParams(**j)
    cc = replace(base, **d)
    if not cc.labels:
        cc.labels = [name]
    validate_class(name, cc)
    return cc


def validate_class(name: str, c: ClassConfig) -> None:
    def bad(msg):
        raise ConfigError(f"class {name}: {msg}")

    if not 0 < c.nu <= 1:
        bad(f"shrinkage nu={c.nu} outside (0, 1]")
    if c.K < 1:
        bad(f"K={c.K} must be >= 1")
    if not 1 <= c.depth <= 5:
        bad(f"tree depth {c.depth} outside 1..5")
    if not c.schedule or any(int(t) < 1 for t in c.schedule) or list(c.schedule) != sorted(c.schedule):
        bad("schedule must be a non-empty increasing list of positive round counts")
    if c.features not in COMBINATIONS:
        bad(f"features must be one of {sorted(COMBINATIONS)}")
    if c.space not in SPACES:
        bad(f"space must be one of {SPACES}")
    if c.protocol not in PROTOCOLS:
        bad(f"protocol must be one of {PROTOCOLS}")
    if c.matcher not in MATCHERS:
        bad(f"matcher must be one of {MATCHERS}")
    if not 0 < c.nms <= 1 or not 0 < c.eval_overlap <= 1:
        bad("overlap thresholds must lie in (0, 1]")
    if c.base_height < 8:
        bad("base height must be >= 8 px")


def config_from_dict(d: dict, base_dir=None) -> PipelineConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    d = dict(d)
    _check_keys(d, PipelineConfig, "config")
    if "base_dir" in d:
        raise ConfigError("config: unknown keys ['base_dir']")
    if not d.get("classes"):
        raise ConfigError("config: at least one class section is required")
    classes = {name: _class_config(name, c) for name, c in d.pop("classes").items()}
    paths = d.pop("paths", {})
    _check_keys(paths, Paths, "paths")
    paths = Paths(**paths)
    for f in fields(Paths):
        env = os.environ.get(ENV_PREFIX + f.name.upper())
        if env:
            setattr(paths, f.name, env)
    det = d.pop("detect", {})
    _check_keys(det, DetectConfig, "detect")
    cfg = PipelineConfig(classes=classes, paths=paths, detect=DetectConfig(**det), **d)
    if cfg.annotation_format not in ("csv", "kitti"):
        raise ConfigError("annotation_format must be 'csv' or 'kitti'")
    if base_dir is not None:
        cfg.base_dir = Path(base_dir)
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(d, base_dir=path.parent)


def class_config_dict(c: ClassConfig) -> dict:
    d = asdict(c)
    for key in ("jitter", "threshold_jitter"):
        d[key]["scale"] = list(d[key]["scale"])
    return d
