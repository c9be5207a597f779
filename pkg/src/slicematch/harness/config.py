"""Dataclass configuration for the end-to-end pipelines.

Every tunable named elsewhere in the package has its default pinned here;
a JSON config file may override any subset (nested keys mirror the
dataclass fields).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..mi import MiConfig


@dataclass(frozen=True)
class FeatureConfig:
    d_c: int = 32
    d_f: int = 16
    nonlinearity: bool = True
    extractor_seed: int = 7
    weights_2d: str | None = None   # optional manifest paths; seeded random otherwise
    weights_3d: str | None = None
    oracle: bool = False            # position-derived descriptors (needs gt at runtime)
    oracle_channels: int = 48
    oracle_min_wavelength_mm: float = 24.0
    oracle_max_wavelength_mm: float = 256.0
    oracle_fine_min_wavelength_mm: float = 12.0


@dataclass(frozen=True)
class AttentionConfig:
    n_f: int = 2
    heads: int = 1
    seed: int = 11
    scale: float = 0.2
    normalize: bool = False
    weights: str | None = None


@dataclass(frozen=True)
class MatchingConfig:
    temperature: float = 0.02
    tau: float = 0.5
    threshold: float = 0.2
    window: int = 5
    fine_temperature: float = 0.05
    suppress_below: float = 0.01
    use_fine_refine: bool = True


@dataclass(frozen=True)
class PoseConfig:
    ransac_iterations: int = 500
    ransac_inlier_tol_mm: float = 2.0
    translation_scale_mm: float = 100.0


@dataclass(frozen=True)
class DatasetConfig:
    volume_dims: tuple = (128, 128, 128)
    voxel_spacing: tuple = (1.0, 1.0, 1.0)
    frame_dims: tuple = (128, 128)
    pixel_spacing: tuple = (0.5, 0.5)
    cases_per_volume: int = 10
    min_rotation_deg: float = 0.0
    max_rotation_deg: float = 30.0
    max_translation_mm: float = 30.0
    degrade: bool = True


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple = ("baseline-mi", "loftr-ransac", "loftr-dwp", "loftr-dwp+mi")
    workers: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    mi: MiConfig = field(default_factory=MiConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "features": FeatureConfig,
    "attention": AttentionConfig,
    "matching": MatchingConfig,
    "pose": PoseConfig,
    "mi": MiConfig,
    "dataset": DatasetConfig,
    "eval": EvalConfig,
}

_TUPLE_FIELDS = {"volume_dims", "voxel_spacing", "frame_dims", "pixel_spacing",
                 "simplex_scale", "methods"}


def config_from_dict(overrides: dict) -> PipelineConfig:
    """Defaults overridden by a (possibly partial) nested dict."""
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        given = dict(overrides.get(name, {}))
        unknown = set(given) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys in [{name}]: {sorted(unknown)}")
        for key in list(given):
            if key in _TUPLE_FIELDS and isinstance(given[key], list):
                given[key] = tuple(given[key])
        sections[name] = cls(**given)
    unknown = set(overrides) - set(_SECTION_TYPES)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return PipelineConfig(**sections)


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: PipelineConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
