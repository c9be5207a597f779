"""Correspondence extraction between frame and volume tokens.

Forward path: scaled inner-product score matrix -> dual-softmax matching
probabilities -> either soft sampled matches (Gumbel relaxation, for the
differentiable solver) or hard mutual-nearest-neighbor matches (for RANSAC
post-processing), optionally sharpened by fine-level refinement.

The ``*_backward`` functions implement the analytic vector-Jacobian products
of each forward stage; they are what the gradient checker and the training
demo chain together with the pose solver's gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .features import FeatureMap, TokenSequence

GUMBEL_EPS = 1e-12


@dataclass(frozen=True)
class ConfidenceMatrix:
    """Scores S(i,j) and, once filled, dual-softmax probabilities P(i,j).

    Rows index frame (us) tokens, columns volume (ct) tokens. Token mm
    positions ride along so match sets can be built without re-touching the
    token sequences.
    """

    scores: np.ndarray            # (N, M)
    temperature: float
    us_positions: np.ndarray      # (N, 3) mm, frame coordinates
    ct_positions: np.ndarray      # (M, 3) mm, volume coordinates
    probs: np.ndarray | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        n, m = self.scores.shape
        if self.us_positions.shape != (n, 3) or self.ct_positions.shape != (m, 3):
            raise ValueError("position arrays inconsistent with score matrix")
        if self.probs is not None:
            if self.probs.shape != (n, m):
                raise ValueError("probs shape mismatch")
            if self.probs.min() < -1e-12 or self.probs.max() > 1.0 + 1e-12:
                raise ValueError("probs entries must lie in [0, 1]")


@dataclass(frozen=True)
class MatchSet:
    """Weighted frame<->volume point correspondences in mm."""

    us_points: np.ndarray   # (n, 3) frame coordinates
    ct_points: np.ndarray   # (n, 3) volume coordinates
    weights: np.ndarray     # (n,), in [0, 1]
    kind: str               # "soft" | "hard"
    row_indices: np.ndarray | None = None  # source row in the confidence matrix

    def __post_init__(self):
        n = self.us_points.shape[0]
        if self.ct_points.shape != (n, 3) or self.weights.shape != (n,):
            raise ValueError("match arrays must agree in length")
        if self.kind not in ("soft", "hard"):
            raise ValueError(f"kind must be 'soft' or 'hard', got {self.kind!r}")
        if n and (not np.all(np.isfinite(self.weights))
                  or self.weights.min() < -1e-12 or self.weights.max() > 1 + 1e-12):
            raise ValueError("weights must be finite and in [0, 1]")

    def __len__(self):
        return self.us_points.shape[0]


def score_matrix(us_tokens: TokenSequence, ct_tokens: TokenSequence,
                 temperature: float = 0.1) -> ConfidenceMatrix:
    """S(i,j) = <us_i, ct_j> / temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if us_tokens.tokens.shape[1] != ct_tokens.tokens.shape[1]:
        raise ValueError("token channel dimensions must match")
    s = us_tokens.tokens @ ct_tokens.tokens.T / temperature
    return ConfidenceMatrix(s, temperature,
                            us_tokens.positions_mm(), ct_tokens.positions_mm())


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def dual_softmax(cm: ConfidenceMatrix) -> ConfidenceMatrix:
    """Fill P(i,j) = rowsoftmax(S)(i,j) * colsoftmax(S)(i,j)."""
    if not np.all(np.isfinite(cm.scores)):
        raise ValueError("scores must be finite")
    probs = _softmax(cm.scores, axis=1) * _softmax(cm.scores, axis=0)
    return replace(cm, probs=probs)


def dual_softmax_backward(scores: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """d loss / d scores given d loss / d probs."""
    a = _softmax(scores, axis=1)
    b = _softmax(scores, axis=0)
    da = d_probs * b
    db = d_probs * a
    ds_row = a * (da - (da * a).sum(axis=1, keepdims=True))
    ds_col = b * (db - (db * b).sum(axis=0, keepdims=True))
    return ds_row + ds_col


def score_matrix_backward(us_tokens: np.ndarray, ct_tokens: np.ndarray,
                          temperature: float, d_scores: np.ndarray):
    """d loss / d (us tokens, ct tokens) given d loss / d scores."""
    return d_scores @ ct_tokens / temperature, d_scores.T @ us_tokens / temperature


def gumbel_noise(shape, seed: int) -> np.ndarray:
    """Standard Gumbel(0,1) noise, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    u = np.clip(rng.random(shape), 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_assignment(probs: np.ndarray, tau: float, noise: np.ndarray) -> np.ndarray:
    """Row-wise relaxed categorical sample y = softmax((log(p+eps) + g) / tau)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    logits = (np.log(probs + GUMBEL_EPS) + noise) / tau
    return _softmax(logits, axis=1)


def gumbel_sample(cm: ConfidenceMatrix, tau: float, seed: int,
                  noise: np.ndarray | None = None,
                  suppress_below: float = 0.01) -> MatchSet:
    """Soft matches: one relaxed volume correspondence per frame token.

    Per row i the soft volume point is the y-expectation of token positions
    and the weight is sum_j y_ij * p_ij. Rows whose max probability falls
    under ``suppress_below`` are dropped so near-uniform rows do not feed
    meaningless correspondences to the pose solver. ``noise`` overrides the
    seeded Gumbel draw (pass zeros for the deterministic argmax limit).
    """
    if cm.probs is None:
        raise ValueError("confidence matrix has no probabilities; run dual_softmax")
    if noise is None:
        noise = gumbel_noise(cm.probs.shape, seed)
    elif noise.shape != cm.probs.shape:
        raise ValueError("noise shape must match the probability matrix")
    y = gumbel_assignment(cm.probs, tau, noise)
    kept = np.flatnonzero(cm.probs.max(axis=1) >= suppress_below)
    ct_soft = y[kept] @ cm.ct_positions
    weights = (y[kept] * cm.probs[kept]).sum(axis=1)
    return MatchSet(
        us_points=cm.us_positions[kept].copy(),
        ct_points=ct_soft,
        weights=np.clip(weights, 0.0, 1.0),
        kind="soft",
        row_indices=kept,
    )


def gumbel_backward(probs: np.ndarray, tau: float, noise: np.ndarray,
                    row_indices: np.ndarray, ct_positions: np.ndarray,
                    d_ct_points: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    """d loss / d probs for the soft sampling stage.

    ``d_ct_points`` and ``d_weights`` are the loss gradients for the kept
    rows' soft points and weights (suppression is a discrete gate, so
    dropped rows receive zero gradient).
    """
    y = gumbel_assignment(probs, tau, noise)
    d_probs = np.zeros_like(probs)
    for r, i in enumerate(row_indices):
        yi = y[i]
        pi = probs[i]
        dy = ct_positions @ d_ct_points[r] + d_weights[r] * pi
        dlogit = yi * (dy - float(dy @ yi))
        d_probs[i] = dlogit / (tau * (pi + GUMBEL_EPS)) + d_weights[r] * yi
    return d_probs


def hard_matches(cm: ConfidenceMatrix, threshold: float = 0.2) -> MatchSet:
    """Mutual nearest neighbors above a probability threshold."""
    if cm.probs is None:
        raise ValueError("confidence matrix has no probabilities; run dual_softmax")
    p = cm.probs
    rows, cols = [], []
    row_best = p.argmax(axis=1)
    col_best = p.argmax(axis=0)
    for i, j in enumerate(row_best):
        if col_best[j] == i and p[i, j] >= threshold:
            rows.append(i)
            cols.append(j)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    return MatchSet(
        us_points=cm.us_positions[rows].copy(),
        ct_points=cm.ct_positions[cols].copy(),
        weights=p[rows, cols] if len(rows) else np.zeros(0),
        kind="hard",
        row_indices=rows,
    )


# -- fine-level refinement ------------------------------------------------------


def _nearest_node(point_mm: np.ndarray, fm: FeatureMap) -> np.ndarray:
    cell = fm.cell_size_mm()
    ndim = len(fm.grid_dims)
    g = np.round(np.asarray(point_mm[:ndim], dtype=np.float64) / cell).astype(np.int64)
    if np.any(g < 0) or np.any(g >= np.array(fm.grid_dims)):
        raise ValueError(f"match point {point_mm} falls outside the fine grid")
    return g


def fine_refine(match, fine_us: FeatureMap, fine_ct: FeatureMap,
                window: int = 5, temperature: float = 1.0) -> np.ndarray:
    """Refine one coarse correspondence on the fine grids.

    ``match`` is an (us_point_mm, ct_point_mm) pair. The frame descriptor at
    the match is correlated with the ``window``-wide fine volume
    neighborhood; the refined point is the softmax-weighted expectation of
    the neighborhood's mm positions (window clipped at the grid boundary).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 3")
    if any(window > g for g in fine_ct.grid_dims):
        raise ValueError(f"window {window} exceeds fine grid {fine_ct.grid_dims}")
    us_point, ct_point = match[0], match[1]

    gu = _nearest_node(us_point, fine_us)
    desc = fine_us.data[tuple(gu)]

    gc = _nearest_node(ct_point, fine_ct)
    half = window // 2
    lo = np.maximum(gc - half, 0)
    hi = np.minimum(gc + half + 1, np.array(fine_ct.grid_dims))
    region = fine_ct.data[tuple(slice(a, b) for a, b in zip(lo, hi))]

    corr = np.tensordot(region, desc, axes=([-1], [0])) / temperature
    w = np.exp(corr - corr.max())
    w /= w.sum()

    axes = np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij")
    nodes = np.stack(axes, axis=-1).astype(np.float64) * fine_ct.cell_size_mm()
    return np.tensordot(w, nodes, axes=(list(range(w.ndim)), list(range(w.ndim))))


def refine_matchset(ms: MatchSet, fine_us: FeatureMap, fine_ct: FeatureMap,
                    window: int = 5, temperature: float = 1.0) -> MatchSet:
    """Apply :func:`fine_refine` to every pair; pairs off the fine grids pass through."""
    refined = np.array(ms.ct_points, dtype=np.float64)
    for k in range(len(ms)):
        try:
            refined[k] = fine_refine((ms.us_points[k], ms.ct_points[k]),
                                     fine_us, fine_ct, window, temperature)
        except ValueError:
            pass
    return replace(ms, ct_points=refined)


# -- file formats ----------------------------------------------------------------

_CSV_HEADER = ["us_x", "us_y", "us_z", "ct_x", "ct_y", "ct_z", "weight"]


def save_matchset(ms: MatchSet, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for k in range(len(ms)):
            writer.writerow(
                [repr(float(v)) for v in ms.us_points[k]]
                + [repr(float(v)) for v in ms.ct_points[k]]
                + [repr(float(ms.weights[k]))]
            )


def load_matchset(path: str, kind: str = "hard") -> MatchSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _CSV_HEADER:
            raise ValueError(f"unexpected match CSV header: {header}")
        rows = [[float(v) for v in row] for row in reader]
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 7)
    return MatchSet(arr[:, 0:3], arr[:, 3:6], arr[:, 6], kind)
