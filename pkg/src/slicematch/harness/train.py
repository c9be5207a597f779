"""Toy end-to-end training of a projection on the pose-error loss.

A single learnable d x d projection W, applied to both token sequences after
the (frozen, forward-only) attention stage, is trained by plain gradient
descent on the pose loss of the differentiable chain

    projected tokens -> scores -> dual softmax -> soft matches -> pose.

The synthetic instances use the shared position code scrambled by one fixed
linear distortion: with W = I matching is poor, and training recovers a
projection that undoes enough of the distortion to drop the pose loss. The
per-instance Gumbel noise is drawn once and reused every iteration, so the
loss curve is deterministic and variance-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..attention import loftr_transform, random_attention_weights
from ..features import OracleSpec, TokenSequence, oracle_descriptors
from ..geometry import RigidPose, apply
from ..matching import (dual_softmax_backward, gumbel_assignment, gumbel_backward,
                        gumbel_noise, _softmax)
from ..pose import IllConditionedGradientError, pose_loss_and_grad


class TrainingDivergenceError(RuntimeError):
    """Loss became non-finite during the demo optimization."""


@dataclass(frozen=True)
class TrainResult:
    losses: np.ndarray          # loss per iteration (before each update)
    final_projection: np.ndarray

    @property
    def initial_loss(self) -> float:
        return float(self.losses[0])

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])


def _grid_sequence(grid_dims, scale, spacing, tokens, source) -> TokenSequence:
    n = int(np.prod(grid_dims))
    index_map = np.stack(np.unravel_index(np.arange(n), grid_dims), axis=-1)
    return TokenSequence(tokens, index_map.astype(np.int64), source,
                         tuple(grid_dims), scale, tuple(spacing))


def _make_instances(seed: int, n_instances: int, channels: int):
    """Small frame/volume registration instances with scrambled descriptors."""
    rng = np.random.default_rng([seed, 0])
    spec = OracleSpec(channels=channels, min_wavelength_mm=12.0,
                      max_wavelength_mm=128.0)
    # one shared distortion: well-conditioned but far enough from orthogonal
    scramble = np.eye(channels) + 0.45 * rng.standard_normal((channels, channels)) / np.sqrt(channels)
    attn = random_attention_weights(int(rng.integers(2 ** 31)), channels,
                                    n_layers=1, scale=0.1)

    instances = []
    for k in range(n_instances):
        irng = np.random.default_rng([seed, 1, k])
        ct_dims, us_dims = (6, 6, 6), (6, 6)
        ct_step = 8.0 * np.ones(3)
        us_step = 8.0 * 0.5 * np.ones(2)

        axis = irng.standard_normal(3)
        gt = RigidPose.from_axis_angle(axis, irng.uniform(-0.35, 0.35),
                                       irng.uniform(4, 24, 3))
        ct_pos = np.stack(np.meshgrid(*(np.arange(g) for g in ct_dims),
                                      indexing="ij"), -1).reshape(-1, 3) * ct_step
        us_grid = np.stack(np.meshgrid(*(np.arange(g) for g in us_dims),
                                       indexing="ij"), -1).reshape(-1, 2) * us_step
        us_pos = np.hstack([us_grid, np.zeros((us_grid.shape[0], 1))])

        us_feat = oracle_descriptors(apply(gt, us_pos), spec) @ scramble.T
        ct_feat = oracle_descriptors(ct_pos, spec) @ scramble.T
        us_seq = _grid_sequence(us_dims, 8, (0.5, 0.5), us_feat, "us")
        ct_seq = _grid_sequence(ct_dims, 8, (1.0, 1.0), ct_feat, "ct")
        us_seq, ct_seq = loftr_transform(us_seq, ct_seq, attn)

        instances.append({
            "us_tokens": us_seq.tokens,
            "ct_tokens": ct_seq.tokens,
            "us_pos": us_pos,
            "ct_pos": ct_pos,
            "gt": gt,
            "noise": gumbel_noise((us_pos.shape[0], ct_pos.shape[0]),
                                  int(irng.integers(2 ** 31))),
        })
    return instances


def toy_train(seed: int = 0, iterations: int = 200, learning_rate: float = 1e-2,
              n_instances: int = 4, channels: int = 24, temperature: float = 0.5,
              tau: float = 0.5) -> TrainResult:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    instances = _make_instances(seed, n_instances, channels)
    w = np.eye(channels)

    losses = np.zeros(iterations)
    for it in range(iterations):
        total_loss = 0.0
        grad_w = np.zeros_like(w)
        for inst in instances:
            u0, c0 = inst["us_tokens"], inst["ct_tokens"]
            u = u0 @ w.T
            c = c0 @ w.T
            scores = u @ c.T / temperature
            probs = _softmax(scores, 1) * _softmax(scores, 0)
            y = gumbel_assignment(probs, tau, inst["noise"])
            weights = (y * probs).sum(axis=1)
            ct_soft = y @ inst["ct_pos"]
            try:
                loss, grad = pose_loss_and_grad(
                    (inst["us_pos"], ct_soft, weights), inst["gt"]
                )
            except IllConditionedGradientError:
                continue  # skip this instance's contribution for the iteration
            total_loss += loss
            d_probs = gumbel_backward(probs, tau, inst["noise"],
                                      np.arange(u.shape[0]), inst["ct_pos"],
                                      grad.d_ct_point, grad.d_weight)
            d_scores = dual_softmax_backward(scores, d_probs)
            # S = u0 W^T W c0^T / T, so dL/dW lands on both projections
            grad_w += w @ (c0.T @ d_scores.T @ u0 + u0.T @ d_scores @ c0) / temperature
        mean_loss = total_loss / len(instances)
        if not np.isfinite(mean_loss):
            raise TrainingDivergenceError(f"loss became non-finite at iteration {it}")
        losses[it] = mean_loss
        w = w - learning_rate * grad_w / len(instances)
    return TrainResult(losses=losses, final_projection=w)
