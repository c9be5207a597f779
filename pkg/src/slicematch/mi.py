"""Histogram mutual information and derivative-free 6-DOF rigid refinement.

The refiner maximizes MI between the target frame and the slice extracted at
a candidate pose, searching 3 Euler angles + 3 translations with a
Nelder-Mead simplex started from the initial pose. It is intentionally
local: with no meaningful initial alignment it stalls in side maxima, which
is exactly the failure mode intensity-based registration shows without an
initializer. Combined use is: feature-matching pose in, MI-polished pose out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .geometry import RigidPose, compose
from .volume import Frame2D, Volume3D, extract_slice


@dataclass(frozen=True)
class MiConfig:
    bins: int = 32
    max_iterations: int = 400
    simplex_scale: tuple[float, float] = (2.0, 2.0)  # (deg, mm) initial steps
    convergence_tol: float = 1e-5

    def __post_init__(self):
        if self.bins < 8:
            raise ValueError("bins must be >= 8")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if any(s <= 0 for s in self.simplex_scale) or self.convergence_tol <= 0:
            raise ValueError("simplex scale and tolerance must be > 0")


@dataclass(frozen=True)
class MiRefineResult:
    pose: RigidPose
    mi: float
    converged: bool
    iterations: int


def mutual_information(a: Frame2D, b: Frame2D, bins: int = 32) -> float:
    """Shannon MI (nats) from a joint histogram with equal-width bins.

    Bin edges span each image's own [min, max]; a constant image carries no
    information, so MI is defined as 0 in that case.
    """
    if a.dims != b.dims:
        raise ValueError(f"frame dims differ: {a.dims} vs {b.dims}")
    if bins < 8:
        raise ValueError("bins must be >= 8")
    x = a.data.ravel().astype(np.float64)
    y = b.data.ravel().astype(np.float64)
    if x.max() == x.min() or y.max() == y.min():
        return 0.0
    joint, _, _ = np.histogram2d(x, y, bins=bins,
                                 range=[[x.min(), x.max()], [y.min(), y.max()]])
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    denom = np.outer(px, py)
    return float(np.sum(pxy[nz] * np.log(pxy[nz] / denom[nz])))


def entropy(a: Frame2D, bins: int = 32) -> float:
    x = a.data.ravel().astype(np.float64)
    if x.max() == x.min():
        return 0.0
    hist, _ = np.histogram(x, bins=bins, range=(x.min(), x.max()))
    p = hist / hist.sum()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _euler_zyx(rx_deg: float, ry_deg: float, rz_deg: float) -> np.ndarray:
    """Intrinsic ZYX rotation: Rz @ Ry @ Rx."""
    cx, sx = math.cos(math.radians(rx_deg)), math.sin(math.radians(rx_deg))
    cy, sy = math.cos(math.radians(ry_deg)), math.sin(math.radians(ry_deg))
    cz, sz = math.cos(math.radians(rz_deg)), math.sin(math.radians(rz_deg))
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _delta_pose(params: np.ndarray, pivot_mm: np.ndarray) -> RigidPose:
    """Frame-side perturbation: rotate about the pivot, then translate."""
    rot = _euler_zyx(params[0], params[1], params[2])
    t = pivot_mm - rot @ pivot_mm + params[3:6]
    return RigidPose(rot, t)


def mi_refine(vol: Volume3D, frame: Frame2D, init: RigidPose,
              cfg: MiConfig = MiConfig()) -> MiRefineResult:
    """Simplex search maximizing MI(extract_slice(vol, pose), frame).

    The six parameters perturb ``init`` on the frame side (intrinsic ZYX
    Euler angles about the frame center, then mm translation), so the step
    scales stay meaningful regardless of where the slice sits in the volume.
    Never returns a pose with lower MI than ``init``; without a strict
    improvement the initial pose is returned unchanged.
    """
    pivot = frame.center_mm()

    def pose_of(params: np.ndarray) -> RigidPose:
        return compose(init, _delta_pose(params, pivot))

    def objective(params: np.ndarray) -> float:
        sliced = extract_slice(vol, pose_of(params), frame.dims, frame.spacing)
        return -mutual_information(sliced, frame, cfg.bins)

    x0 = np.zeros(6)
    init_mi = -objective(x0)
    steps = [cfg.simplex_scale[0]] * 3 + [cfg.simplex_scale[1]] * 3
    simplex = np.vstack([x0] + [x0 + s * e for s, e in zip(steps, np.eye(6))])
    res = optimize.minimize(
        objective, x0, method="Nelder-Mead",
        options={
            "maxiter": cfg.max_iterations,
            "initial_simplex": simplex,
            "xatol": cfg.convergence_tol,
            "fatol": cfg.convergence_tol,
            "disp": False,
        },
    )
    best_mi = -float(res.fun)
    if best_mi > init_mi:
        pose, mi = pose_of(res.x), best_mi
    else:
        pose, mi = init, init_mi
    return MiRefineResult(pose=pose, mi=mi, converged=bool(res.success),
                          iterations=int(res.nit))


def center_align_pose(vol: Volume3D, frame: Frame2D) -> RigidPose:
    """Identity rotation, translation mapping the frame center onto the volume center."""
    return RigidPose(np.eye(3), vol.center_mm() - frame.center_mm())
