"""Rigid pose solvers over weighted point correspondences.

``weighted_procrustes`` minimizes sum_i w_hat_i ||R p_i + t - q_i||^2 in
closed form (SVD of the weighted cross-covariance, reflection corrected).
``pose_loss_and_grad`` differentiates a smooth pose loss through that closed
form analytically, including the SVD factors, yielding exact gradients with
respect to every weight and point; this is the piece that lets pose error
drive the matching stage during training. ``ransac_pose`` is the classic
hypothesize-and-verify robust alternative used for hard matches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidPose
from .matching import MatchSet

MIN_PAIRS = 3
MIN_TOTAL_WEIGHT = 1e-9
DEGENERACY_RATIO = 1e-10      # reject if sigma_2 < ratio * sigma_1
SVD_GAP_TOL = 1e-8            # singular-value gap below which gradients are refused


class DegenerateMatchesError(ValueError):
    """Correspondences do not determine a rotation (collinear / zero weight)."""


class IllConditionedGradientError(RuntimeError):
    """SVD gap too small for a trustworthy analytic gradient."""


@dataclass(frozen=True)
class ProcrustesGradient:
    """Loss gradients per correspondence."""

    d_weight: np.ndarray    # (n,)
    d_us_point: np.ndarray  # (n, 3)
    d_ct_point: np.ndarray  # (n, 3)

    def __post_init__(self):
        for arr in (self.d_weight, self.d_us_point, self.d_ct_point):
            if not np.all(np.isfinite(arr)):
                raise ValueError("gradient entries must be finite")


def _unpack(matches) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(matches, MatchSet):
        return (matches.us_points.astype(np.float64),
                matches.ct_points.astype(np.float64),
                matches.weights.astype(np.float64))
    p, q, w = matches
    return (np.asarray(p, dtype=np.float64),
            np.asarray(q, dtype=np.float64),
            np.asarray(w, dtype=np.float64))


def _procrustes_core(p: np.ndarray, q: np.ndarray, w: np.ndarray) -> dict:
    n = p.shape[0]
    if n < MIN_PAIRS:
        raise ValueError(f"need at least {MIN_PAIRS} correspondences, got {n}")
    sw = w.sum()
    if sw <= MIN_TOTAL_WEIGHT:
        raise DegenerateMatchesError("total match weight is (near) zero")
    w_hat = w / sw
    p_bar = w_hat @ p
    q_bar = w_hat @ q
    r = p - p_bar
    s = q - q_bar
    h = (r * w_hat[:, None]).T @ s
    u, sig, vt = np.linalg.svd(h)
    if sig[1] < DEGENERACY_RATIO * max(sig[0], 1e-300):
        raise DegenerateMatchesError(
            "weighted correspondences are (near) collinear; rotation undetermined"
        )
    v = vt.T
    sign = np.sign(np.linalg.det(v @ u.T))
    d = np.array([1.0, 1.0, sign])
    rot = v @ np.diag(d) @ u.T
    t = q_bar - rot @ p_bar
    return dict(sw=sw, w_hat=w_hat, p_bar=p_bar, q_bar=q_bar, r=r, s=s,
                h=h, u=u, sig=sig, v=v, d=d, rot=rot, t=t)


def weighted_procrustes(matches) -> RigidPose:
    """Optimal rigid transform for weighted 3D correspondences (us -> ct).

    ``matches`` is a MatchSet or a (p, q, w) triple of arrays. det(R) = +1
    is enforced even when the unconstrained optimum is a reflection.
    """
    core = _procrustes_core(*_unpack(matches))
    return RigidPose(core["rot"], core["t"])


def pose_loss(est: RigidPose, gt: RigidPose, translation_scale_mm: float = 100.0,
              rotation_weight: float = 1.0) -> float:
    """Chordal rotation distance plus scaled squared translation error.

    Smooth everywhere (no arccos), which is what the training chain needs;
    the mm scale balances the two units.
    """
    dr = est.rotation - gt.rotation
    dt = est.translation - gt.translation
    return float(rotation_weight * np.sum(dr * dr)
                 + np.sum(dt * dt) / translation_scale_mm ** 2)


def _svd_vjp(core: dict, g_rot: np.ndarray) -> np.ndarray:
    """d loss / d H given d loss / d R, through R = V diag(d) U^T."""
    u, sig, v, d = core["u"], core["sig"], core["v"], core["d"]
    gaps = [abs(sig[0] - sig[1]), abs(sig[0] - sig[2]), abs(sig[1] - sig[2])]
    if min(gaps) < SVD_GAP_TOL:
        raise IllConditionedGradientError(
            f"singular values too close for a stable gradient: {sig}"
        )
    g_u = g_rot.T @ v @ np.diag(d)
    g_v = g_rot @ u @ np.diag(d)
    p_mat = u.T @ g_u
    q_mat = v.T @ g_v
    c = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            denom = sig[j] ** 2 - sig[i] ** 2
            c[i, j] = ((p_mat[i, j] - p_mat[j, i]) * sig[j]
                       + (q_mat[i, j] - q_mat[j, i]) * sig[i]) / denom
    return u @ c @ v.T


def pose_loss_and_grad(matches, gt: RigidPose, translation_scale_mm: float = 100.0,
                       rotation_weight: float = 1.0):
    """Loss against ``gt`` and its analytic gradient w.r.t. every match entry.

    Raises IllConditionedGradientError when the cross-covariance has
    (near-)repeated singular values instead of returning silent NaNs.
    """
    p, q, w = _unpack(matches)
    core = _procrustes_core(p, q, w)
    rot, t = core["rot"], core["t"]
    dr = rot - gt.rotation
    dt = t - gt.translation
    loss = float(rotation_weight * np.sum(dr * dr)
                 + np.sum(dt * dt) / translation_scale_mm ** 2)

    g_t = 2.0 * dt / translation_scale_mm ** 2
    # t = q_bar - R p_bar couples the translation loss back into R
    g_rot = 2.0 * rotation_weight * dr - np.outer(g_t, core["p_bar"])
    g_q_bar = g_t
    g_p_bar = -rot.T @ g_t

    g_h = _svd_vjp(core, g_rot)

    r, s, w_hat, sw, h = core["r"], core["s"], core["w_hat"], core["sw"], core["h"]
    d_w = (np.einsum("ni,ij,nj->n", r, g_h, s) - np.sum(g_h * h)
           + r @ g_p_bar + s @ g_q_bar) / sw
    d_p = w_hat[:, None] * (s @ g_h.T + g_p_bar)
    d_q = w_hat[:, None] * (r @ g_h + g_q_bar)
    return loss, ProcrustesGradient(d_w, d_p, d_q)


def ransac_pose(matches, iterations: int = 500, inlier_tol_mm: float = 2.0,
                seed: int = 0, trace: list | None = None):
    """Hypothesize-and-verify rigid fit; returns (pose, inlier_count).

    Each iteration draws 3 distinct pairs with its own (seed, iteration)
    substream, so results do not depend on evaluation order. The winning
    hypothesis is refit on its inliers with uniform weights. Pass ``trace``
    to collect per-iteration inlier counts.
    """
    p, q, w = _unpack(matches)
    n = p.shape[0]
    if n < MIN_PAIRS:
        raise ValueError(f"need at least {MIN_PAIRS} correspondences, got {n}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if inlier_tol_mm <= 0:
        raise ValueError("inlier tolerance must be > 0")

    best_mask = None
    best_count = 0
    for it in range(iterations):
        rng = np.random.default_rng([seed, it])
        idx = rng.choice(n, size=MIN_PAIRS, replace=False)
        try:
            core = _procrustes_core(p[idx], q[idx], np.ones(MIN_PAIRS))
        except (ValueError, DegenerateMatchesError):
            if trace is not None:
                trace.append(0)
            continue
        resid = np.linalg.norm(p @ core["rot"].T + core["t"] - q, axis=1)
        mask = resid < inlier_tol_mm
        count = int(mask.sum())
        if trace is not None:
            trace.append(count)
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < MIN_PAIRS:
        raise DegenerateMatchesError("no RANSAC hypothesis reached 3 inliers")
    core = _procrustes_core(p[best_mask], q[best_mask], np.ones(best_count))
    return RigidPose(core["rot"], core["t"]), best_count
