"""Finite-difference verification of the differentiable matching->pose chain.

For random instances of the chain

    tokens -> score matrix -> dual softmax -> soft sampling -> pose -> loss

the analytic gradient of the final loss with respect to each stage's input is
compared against central differences that re-run everything downstream of
the perturbed quantity. Stage names identify what is perturbed: ``score``
perturbs the token sets feeding the score matrix, ``dual_softmax`` the score
entries, ``gumbel`` the probability entries, ``dwp`` the match weights and
points fed to the pose solver. The Gumbel noise is held fixed per instance so
the chain is a deterministic function of the perturbed inputs; row
suppression is disabled because a discrete gate has no meaningful derivative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..geometry import RigidPose, apply
from ..matching import (dual_softmax_backward, gumbel_assignment, gumbel_backward,
                        gumbel_noise, score_matrix_backward, _softmax)
from ..pose import IllConditionedGradientError, pose_loss, pose_loss_and_grad, weighted_procrustes

STAGES = ("score", "dual_softmax", "gumbel", "dwp")


@dataclass(frozen=True)
class GradcheckReport:
    stages: dict           # stage -> max relative error across instances
    zero_at_optimum: float  # max |gradient| on an exact-fit instance
    instances: int
    tolerance: float
    passed: bool

    def to_json(self) -> str:
        payload = {
            "stages": {k: self.stages[k] for k in STAGES},
            "zero_at_optimum": self.zero_at_optimum,
            "instances": self.instances,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def _relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    return float(np.abs(analytic - fd).max() / scale)


def _central_diff(fn, arr: np.ndarray, steps: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    h = steps.ravel()
    g = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h[k]
        fp = fn()
        flat[k] = orig - h[k]
        fm = fn()
        flat[k] = orig
        g[k] = (fp - fm) / (2.0 * h[k])
    return grad


def _random_instance(rng: np.random.Generator):
    n, m, d = 6, 8, 12
    tokens_us = 0.7 * rng.standard_normal((n, d))
    tokens_ct = 0.7 * rng.standard_normal((m, d))
    us_pos = np.column_stack([rng.uniform(0, 40, n), rng.uniform(0, 40, n),
                              rng.uniform(0, 40, n)])
    ct_pos = rng.uniform(0, 60, (m, 3))
    axis = rng.standard_normal(3)
    gt = RigidPose.from_axis_angle(axis, rng.uniform(-0.5, 0.5),
                                   rng.uniform(-20, 20, 3))
    noise = gumbel_noise((n, m), int(rng.integers(2 ** 31)))
    return tokens_us, tokens_ct, us_pos, ct_pos, gt, noise


def check_instance(rng: np.random.Generator, temperature: float = 1.0,
                   tau: float = 0.5) -> dict:
    """Per-stage relative errors for one random instance.

    Raises IllConditionedGradientError when the instance lands near a
    repeated-singular-value configuration (caller redraws).
    """
    tokens_us, tokens_ct, us_pos, ct_pos, gt, noise = _random_instance(rng)
    n = us_pos.shape[0]

    def loss_from_matchset(w, p, q) -> float:
        return pose_loss(weighted_procrustes((p, q, w)), gt)

    def loss_from_probs(probs) -> float:
        y = gumbel_assignment(probs, tau, noise)
        return loss_from_matchset((y * probs).sum(axis=1), us_pos, y @ ct_pos)

    def loss_from_scores(scores) -> float:
        return loss_from_probs(_softmax(scores, 1) * _softmax(scores, 0))

    # forward pass, saving every intermediate
    scores = tokens_us @ tokens_ct.T / temperature
    probs = _softmax(scores, 1) * _softmax(scores, 0)
    y = gumbel_assignment(probs, tau, noise)
    weights = (y * probs).sum(axis=1)
    ct_soft = y @ ct_pos

    # analytic gradients, chained back stage by stage
    _, grad = pose_loss_and_grad((us_pos, ct_soft, weights), gt)
    d_probs = gumbel_backward(probs, tau, noise, np.arange(n), ct_pos,
                              grad.d_ct_point, grad.d_weight)
    d_scores = dual_softmax_backward(scores, d_probs)
    d_us_tok, d_ct_tok = score_matrix_backward(tokens_us, tokens_ct,
                                               temperature, d_scores)

    errors = {}
    h = 1e-5

    fd_w = _central_diff(lambda: loss_from_matchset(weights, us_pos, ct_soft),
                         weights, np.full_like(weights, h))
    fd_p = _central_diff(lambda: loss_from_matchset(weights, us_pos, ct_soft),
                         us_pos, np.full_like(us_pos, h))
    fd_q = _central_diff(lambda: loss_from_matchset(weights, us_pos, ct_soft),
                         ct_soft, np.full_like(ct_soft, h))
    errors["dwp"] = max(
        _relative_error(grad.d_weight, fd_w),
        _relative_error(grad.d_us_point, fd_p),
        _relative_error(grad.d_ct_point, fd_q),
    )

    fd_probs = _central_diff(lambda: loss_from_probs(probs), probs,
                             np.minimum(1e-6, probs / 2))
    errors["gumbel"] = _relative_error(d_probs, fd_probs)

    fd_scores = _central_diff(lambda: loss_from_scores(scores), scores,
                              np.full_like(scores, h))
    errors["dual_softmax"] = _relative_error(d_scores, fd_scores)

    fn_tok = lambda: loss_from_scores(tokens_us @ tokens_ct.T / temperature)
    fd_us_tok = _central_diff(fn_tok, tokens_us, np.full_like(tokens_us, h))
    fd_ct_tok = _central_diff(fn_tok, tokens_ct, np.full_like(tokens_ct, h))
    errors["score"] = max(_relative_error(d_us_tok, fd_us_tok),
                          _relative_error(d_ct_tok, fd_ct_tok))
    return errors


def _zero_at_optimum(seed: int) -> float:
    """Max |gradient| when the matches fit the ground truth exactly."""
    rng = np.random.default_rng([seed, 999])
    p = rng.uniform(0, 40, (8, 3))
    gt = RigidPose.from_axis_angle(rng.standard_normal(3), 0.4, (5.0, -3.0, 2.0))
    q = apply(gt, p)
    w = rng.uniform(0.4, 1.0, 8)
    _, grad = pose_loss_and_grad((p, q, w), gt)
    return float(max(np.abs(grad.d_weight).max(), np.abs(grad.d_us_point).max(),
                     np.abs(grad.d_ct_point).max()))


def run_gradcheck(seed: int = 0, n_instances: int = 50,
                  tolerance: float = 1e-3) -> GradcheckReport:
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    worst = {stage: 0.0 for stage in STAGES}
    for k in range(n_instances):
        for attempt in range(20):
            rng = np.random.default_rng([seed, k, attempt])
            try:
                errors = check_instance(rng)
            except IllConditionedGradientError:
                continue  # flagged configuration; redraw
            break
        else:
            raise RuntimeError(f"instance {k}: no well-conditioned draw in 20 tries")
        for stage in STAGES:
            worst[stage] = max(worst[stage], errors[stage])
    zero_grad = _zero_at_optimum(seed)
    passed = all(worst[s] <= tolerance for s in STAGES) and zero_grad <= 1e-9
    return GradcheckReport(stages=worst, zero_at_optimum=zero_grad,
                           instances=n_instances, tolerance=tolerance,
                           passed=passed)
