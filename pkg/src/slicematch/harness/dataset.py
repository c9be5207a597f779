"""Synthetic dataset generation and loading.

A dataset directory holds shared phantom volumes, one degraded (or clean)
frame per case, and a ``manifest.json`` recording ground-truth poses and the
perturbation magnitudes they were drawn with. Everything is deterministic in
the generation seed: per-volume and per-case RNG substreams are derived from
(seed, index) pairs, so regeneration is byte-identical.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from ..geometry import RigidPose, compose
from ..volume import (Frame2D, Volume3D, extract_slice, load_frame, load_volume,
                      make_phantom, save_frame, save_volume, us_degrade)
from .config import DatasetConfig


def sample_case_pose(rng: np.random.Generator, vol: Volume3D, frame_dims,
                     pixel_spacing, cfg: DatasetConfig):
    """Ground-truth pose = center-aligned canonical pose + bounded perturbation.

    The perturbation rotates about the frame center (uniform random axis,
    angle uniform in [min_rotation_deg, max_rotation_deg]) and translates
    per-axis uniform within +-max_translation_mm. Returns (pose, angle_deg,
    translation).
    """
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle_deg = rng.uniform(cfg.min_rotation_deg, cfg.max_rotation_deg)
    trans = rng.uniform(-cfg.max_translation_mm, cfg.max_translation_mm, size=3)

    c = (np.array(frame_dims) - 1.0) * np.array(pixel_spacing) / 2.0
    pivot = np.array([c[0], c[1], 0.0])
    rot = RigidPose.from_axis_angle(axis, math.radians(angle_deg)).rotation
    delta = RigidPose(rot, pivot - rot @ pivot + trans)
    canonical = RigidPose(np.eye(3), vol.center_mm() - pivot)
    return compose(canonical, delta), angle_deg, trans


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    index: int
    volume_path: str
    frame_path: str
    gt: RigidPose
    angle_deg: float
    translation_mm: tuple
    degraded: bool

    def load_volume(self) -> Volume3D:
        return load_volume(self.volume_path)

    def load_frame(self) -> Frame2D:
        return load_frame(self.frame_path)


@dataclass
class DatasetIndex:
    root: str
    seed: int
    cases: list
    config: DatasetConfig

    def __len__(self):
        return len(self.cases)


def generate_dataset(out_dir: str, seed: int, n_cases: int,
                     cfg: DatasetConfig = DatasetConfig()) -> DatasetIndex:
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    os.makedirs(out_dir, exist_ok=True)

    n_volumes = -(-n_cases // cfg.cases_per_volume)
    volumes = []
    for k in range(n_volumes):
        vol = make_phantom(
            int(np.random.default_rng([seed, 0, k]).integers(2 ** 31)),
            cfg.volume_dims, cfg.voxel_spacing,
        )
        rel = f"volume_{k:03d}.f32"
        save_volume(vol, os.path.join(out_dir, rel))
        volumes.append((rel, vol))

    entries = []
    for c in range(n_cases):
        rng = np.random.default_rng([seed, 1, c])
        vol_rel, vol = volumes[c // cfg.cases_per_volume]
        gt, angle_deg, trans = sample_case_pose(
            rng, vol, cfg.frame_dims, cfg.pixel_spacing, cfg
        )
        frame = extract_slice(vol, gt, cfg.frame_dims, cfg.pixel_spacing)
        if cfg.degrade:
            frame = us_degrade(frame, int(rng.integers(2 ** 31)))
        frame_rel = f"case_{c:04d}_frame.f32"
        save_frame(frame, os.path.join(out_dir, frame_rel))
        entries.append({
            "case_id": f"case_{c:04d}",
            "index": c,
            "volume": vol_rel,
            "frame": frame_rel,
            "gt_matrix": gt.matrix().tolist(),
            "angle_deg": angle_deg,
            "translation_mm": trans.tolist(),
            "degraded": cfg.degrade,
        })

    manifest = {
        "seed": seed,
        "n_cases": n_cases,
        "config": {
            "volume_dims": list(cfg.volume_dims),
            "voxel_spacing": list(cfg.voxel_spacing),
            "frame_dims": list(cfg.frame_dims),
            "pixel_spacing": list(cfg.pixel_spacing),
            "cases_per_volume": cfg.cases_per_volume,
            "min_rotation_deg": cfg.min_rotation_deg,
            "max_rotation_deg": cfg.max_rotation_deg,
            "max_translation_mm": cfg.max_translation_mm,
            "degrade": cfg.degrade,
        },
        "cases": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return load_dataset(out_dir)


def load_dataset(root: str) -> DatasetIndex:
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    raw_cfg = dict(manifest["config"])
    for key in ("volume_dims", "voxel_spacing", "frame_dims", "pixel_spacing"):
        raw_cfg[key] = tuple(raw_cfg[key])
    cfg = DatasetConfig(**raw_cfg)
    cases = [
        CaseEntry(
            case_id=e["case_id"],
            index=e["index"],
            volume_path=os.path.join(root, e["volume"]),
            frame_path=os.path.join(root, e["frame"]),
            gt=RigidPose.from_matrix(e["gt_matrix"]),
            angle_deg=e["angle_deg"],
            translation_mm=tuple(e["translation_mm"]),
            degraded=e["degraded"],
        )
        for e in manifest["cases"]
    ]
    return DatasetIndex(root=root, seed=manifest["seed"], cases=cases, config=cfg)
