"""Rigid 3D transforms, pixel/mm conversions, and pose-error metrics.

Conventions used throughout the package:

* A :class:`RigidPose` maps points given in slice/frame coordinates (mm)
  into volume coordinates (mm): ``x_vol = R @ x_frame + t``.
* Poses serialize as 4x4 row-major homogeneous matrices in millimeters.
* Rotation error between two poses is the geodesic angle
  ``arccos((trace(Ra^T Rb) - 1) / 2)`` in degrees; translation error is the
  Euclidean distance between the translation vectors in mm.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

ORTHONORMALITY_TOL = 1e-9
REORTHONORMALIZE_DRIFT = 1e-12


def _as_rotation(mat) -> np.ndarray:
    r = np.asarray(mat, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rotation contains non-finite entries")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > ORTHONORMALITY_TOL:
        raise ValueError(f"rotation not orthonormal: max |R^T R - I| = {err:.3e}")
    det = np.linalg.det(r)
    if abs(det - 1.0) > ORTHONORMALITY_TOL:
        raise ValueError(f"rotation must have det +1, got {det!r}")
    return r


def orthonormalize(mat) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(np.asarray(mat, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class RigidPose:
    """Rotation (3x3, orthonormal, det +1) plus translation in mm."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation contains non-finite entries")
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix) -> "RigidPose":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"homogeneous matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("last row of homogeneous matrix must be [0,0,0,1]")
        return RigidPose(m[:3, :3], m[:3, 3])

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        """Rodrigues rotation about a (not necessarily unit) axis."""
        a = np.asarray(axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(a)
        if n == 0.0:
            raise ValueError("axis must be non-zero")
        a = a / n
        k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
        r = np.eye(3) + math.sin(angle_rad) * k + (1.0 - math.cos(angle_rad)) * (k @ k)
        return RigidPose(orthonormalize(r), np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class PoseError:
    """Geodesic rotation error (deg), translation error (mm), joint success flags."""

    rotation_deg: float
    translation_mm: float
    success_15: bool
    success_5: bool

    def __post_init__(self):
        if not (0.0 <= self.rotation_deg <= 180.0 + 1e-9):
            raise ValueError(f"rotation_deg out of [0, 180]: {self.rotation_deg}")
        if self.translation_mm < 0.0:
            raise ValueError("translation_mm must be >= 0")
        if self.success_5 and not self.success_15:
            raise ValueError("success_5 implies success_15")


@dataclass(frozen=True)
class CalibrationSpec:
    """Physical spacing metadata: mm/pixel for frames, mm/voxel for volumes."""

    pixel_spacing: tuple[float, float] = (0.5, 0.5)
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.pixel_spacing) != 2 or len(self.voxel_spacing) != 3:
            raise ValueError("pixel_spacing must have 2 entries, voxel_spacing 3")
        if any(s <= 0 for s in self.pixel_spacing + self.voxel_spacing):
            raise ValueError("all spacings must be > 0")


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Pose applying ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    if np.abs(r.T @ r - np.eye(3)).max() > REORTHONORMALIZE_DRIFT:
        r = orthonormalize(r)
    return RigidPose(r, t)


def invert(pose: RigidPose) -> RigidPose:
    rt = pose.rotation.T
    return RigidPose(rt, -rt @ pose.translation)


def apply(pose: RigidPose, point) -> np.ndarray:
    """Map one point or an (N, 3) array of points through the pose."""
    p = np.asarray(point, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def rotation_angle_deg(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, in degrees."""
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


DEFAULT_THRESHOLDS = ((5.0, 5.0), (15.0, 15.0))


def pose_error(est: RigidPose, gt: RigidPose,
               thresholds=DEFAULT_THRESHOLDS) -> PoseError:
    """Rotation/translation error of ``est`` against ``gt``.

    ``thresholds`` is a ((deg, mm), (deg, mm)) pair, tight first; success
    flags use the joint condition with strict < comparisons.
    """
    rot = rotation_angle_deg(gt.rotation, est.rotation)
    trans = float(np.linalg.norm(est.translation - gt.translation))
    (d5, t5), (d15, t15) = thresholds
    return PoseError(
        rotation_deg=rot,
        translation_mm=trans,
        success_15=bool(rot < d15 and trans < t15),
        success_5=bool(rot < d5 and trans < t5),
    )


def save_pose(pose: RigidPose, path) -> None:
    payload = {"matrix": pose.matrix().tolist(), "units": "mm"}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_pose(path) -> RigidPose:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("units") != "mm":
        raise ValueError(f"pose file units must be 'mm', got {payload.get('units')!r}")
    return RigidPose.from_matrix(payload["matrix"])
