"""Per-case registration pipelines for each comparison method.

Methods:

* ``baseline-mi``     MI simplex refinement started from the pose that
                      aligns the frame center with the volume center.
* ``loftr-ransac``    hard mutual-NN matches + RANSAC pose.
* ``loftr-dwp``       soft sampled matches + weighted Procrustes pose.
* ``loftr-dwp+mi``    the previous pose used as the MI refiner's start.

Descriptors come either from the convolutional extractor (seeded random
weights unless files are configured) or, in oracle mode, from the shared
position code - the latter isolates the matching and pose stages from
feature quality and therefore needs the case's ground truth to place the
frame tokens in volume space. Oracle mode skips the attention stage, whose
untrained weights would only scramble an already position-aligned code.

A pipeline failure inside a case is recorded as a failed CaseRecord with a
sentinel error (180 deg / 1e6 mm), never raised, so aggregate statistics
stay computable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import matching
from ..attention import loftr_transform, random_attention_weights, load_attention_weights
from ..features import (ExtractorConfig, FeatureMap, OracleSpec, TokenSequence,
                        extract_features, load_extractor_weights, oracle_descriptors,
                        random_extractor_weights, tokenize)
from ..geometry import RigidPose, apply, pose_error
from ..mi import MiConfig, center_align_pose, mi_refine
from ..pose import ransac_pose, weighted_procrustes
from ..volume import Frame2D, Volume3D
from .config import PipelineConfig
from .dataset import CaseEntry

METHODS = ("baseline-mi", "loftr-ransac", "loftr-dwp", "loftr-dwp+mi")

FAILURE_ROT_DEG = 180.0
FAILURE_TRANS_MM = 1e6


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    method: str
    rotation_deg: float
    translation_mm: float
    success_15: bool
    success_5: bool
    runtime_s: float
    match_count: int
    failed: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")
        if self.rotation_deg < 0 or self.translation_mm < 0:
            raise ValueError("errors must be non-negative")


def _grid_positions(grid_dims, step_mm) -> np.ndarray:
    axes = np.meshgrid(*(np.arange(g) for g in grid_dims), indexing="ij")
    coords = np.stack(axes, axis=-1).reshape(-1, len(grid_dims)).astype(np.float64)
    pos = coords * np.asarray(step_mm)
    if pos.shape[1] == 2:
        pos = np.hstack([pos, np.zeros((pos.shape[0], 1))])
    return pos


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _oracle_tokens(vol: Volume3D, frame: Frame2D, gt: RigidPose,
                   cfg: PipelineConfig):
    fc = cfg.features
    coarse_spec = OracleSpec(fc.oracle_channels, fc.oracle_min_wavelength_mm,
                             fc.oracle_max_wavelength_mm)
    fine_spec = OracleSpec(fc.oracle_channels, fc.oracle_fine_min_wavelength_mm,
                           fc.oracle_max_wavelength_mm)

    def volume_map(scale, spec):
        gdims = tuple(_ceil_div(d, scale) for d in vol.dims)
        pos = _grid_positions(gdims, scale * np.asarray(vol.spacing))
        data = oracle_descriptors(pos, spec).reshape(gdims + (spec.channels,))
        return FeatureMap(gdims, scale, spec.channels, data, vol.spacing)

    def frame_map(scale, spec):
        gdims = tuple(_ceil_div(d, scale) for d in frame.dims)
        pos = _grid_positions(gdims, scale * np.asarray(frame.spacing))
        data = oracle_descriptors(apply(gt, pos), spec)
        return FeatureMap(gdims, scale, spec.channels,
                          data.reshape(gdims + (spec.channels,)), frame.spacing)

    ct_seq = tokenize(volume_map(8, coarse_spec), add_pe=False, source="ct")
    us_seq = tokenize(frame_map(8, coarse_spec), add_pe=False, source="us")
    fine_ct = volume_map(4, fine_spec)
    fine_us = frame_map(4, fine_spec)
    return us_seq, ct_seq, fine_us, fine_ct


def _learned_tokens(vol: Volume3D, frame: Frame2D, cfg: PipelineConfig):
    fc = cfg.features
    ecfg = ExtractorConfig(fc.d_c, fc.d_f, fc.nonlinearity)
    w2 = (load_extractor_weights(fc.weights_2d) if fc.weights_2d
          else random_extractor_weights(fc.extractor_seed, 2, ecfg))
    w3 = (load_extractor_weights(fc.weights_3d) if fc.weights_3d
          else random_extractor_weights(fc.extractor_seed + 1, 3, ecfg))
    us_coarse, us_fine = extract_features(frame, w2)
    ct_coarse, ct_fine = extract_features(vol, w3)
    us_seq = tokenize(us_coarse, add_pe=True, source="us")
    ct_seq = tokenize(ct_coarse, add_pe=True, source="ct")

    ac = cfg.attention
    aw = (load_attention_weights(ac.weights) if ac.weights
          else random_attention_weights(ac.seed, fc.d_c, ac.n_f, ac.heads,
                                        ac.scale, ac.normalize))
    us_seq, ct_seq = loftr_transform(us_seq, ct_seq, aw)
    return us_seq, ct_seq, us_fine, ct_fine


def match_and_solve(vol: Volume3D, frame: Frame2D, method: str,
                    cfg: PipelineConfig, gt: RigidPose | None = None,
                    seed: int | list = 0):
    """Feature matching + pose solve; returns (pose, match_count)."""
    if cfg.features.oracle:
        if gt is None:
            raise ValueError("oracle descriptor mode requires the ground-truth pose")
        us_seq, ct_seq, fine_us, fine_ct = _oracle_tokens(vol, frame, gt, cfg)
    else:
        us_seq, ct_seq, fine_us, fine_ct = _learned_tokens(vol, frame, cfg)

    mc = cfg.matching
    cm = matching.dual_softmax(matching.score_matrix(us_seq, ct_seq, mc.temperature))
    if method == "loftr-ransac":
        ms = matching.hard_matches(cm, mc.threshold)
        if mc.use_fine_refine:
            ms = matching.refine_matchset(ms, fine_us, fine_ct, mc.window,
                                          mc.fine_temperature)
        pose, _ = ransac_pose(ms, cfg.pose.ransac_iterations,
                              cfg.pose.ransac_inlier_tol_mm, seed=seed)
    else:
        ms = matching.gumbel_sample(cm, mc.tau, seed=seed,
                                    suppress_below=mc.suppress_below)
        if mc.use_fine_refine:
            ms = matching.refine_matchset(ms, fine_us, fine_ct, mc.window,
                                          mc.fine_temperature)
        pose = weighted_procrustes(ms)
    return pose, len(ms)


def run_case(case: CaseEntry, method: str, cfg: PipelineConfig,
             seed: int = 0) -> CaseRecord:
    if method not in METHODS:
        raise ValueError(f"unknown method tag {method!r}; expected one of {METHODS}")
    t0 = time.perf_counter()
    match_count = 0
    try:
        vol = case.load_volume()
        frame = case.load_frame()
        if method == "baseline-mi":
            est = mi_refine(vol, frame, center_align_pose(vol, frame), cfg.mi).pose
        else:
            est, match_count = match_and_solve(
                vol, frame, method, cfg, gt=case.gt, seed=[seed, case.index]
            )
            if method == "loftr-dwp+mi":
                est = mi_refine(vol, frame, est, cfg.mi).pose
        err = pose_error(est, case.gt)
        return CaseRecord(case.case_id, method, err.rotation_deg, err.translation_mm,
                          err.success_15, err.success_5,
                          time.perf_counter() - t0, match_count)
    except Exception:
        return CaseRecord(case.case_id, method, FAILURE_ROT_DEG, FAILURE_TRANS_MM,
                          False, False, time.perf_counter() - t0, match_count,
                          failed=True)
