"""Linear-attention feature interaction between the two token sequences.

Attention uses the positive kernel feature map ``phi(x) = elu(x) + 1`` so the
full attention matrix never materializes: one pass accumulates the key/value
summary, a second pass queries it (O(N + M) memory).

One interaction repetition applies, in order: self-attention on the frame
tokens, self-attention on the volume tokens (shared weights), then
frame<-volume and volume<-frame cross-attention (shared weights, sequential
so the second direction sees the updated first). Every attention sublayer is
residual and followed by a residual feed-forward sublayer. This module is
forward-only; training gradients enter the pipeline after it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .features import TokenSequence

_DENOM_FLOOR = 1e-20


def elu_feature_map(x: np.ndarray) -> np.ndarray:
    """elu(x) + 1, strictly positive."""
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def linear_attention(queries: np.ndarray, keys: np.ndarray,
                     values: np.ndarray) -> np.ndarray:
    """Kernelized attention in streaming form.

    out_i = phi(q_i)^T (sum_j phi(k_j) v_j^T) / (phi(q_i)^T sum_j phi(k_j))
    """
    if keys.shape[0] != values.shape[0]:
        raise ValueError("keys and values must agree in length")
    if queries.shape[1] != keys.shape[1]:
        raise ValueError("queries and keys must agree in channel dimension")
    pq = elu_feature_map(np.asarray(queries, dtype=np.float64))
    pk = elu_feature_map(np.asarray(keys, dtype=np.float64))
    kv = pk.T @ np.asarray(values, dtype=np.float64)  # (d, d_v)
    z = pk.sum(axis=0)                                # (d,)
    den = pq @ z
    if np.any(den < _DENOM_FLOOR):
        raise ValueError("attention normalizer underflow (denominator < 1e-20)")
    return (pq @ kv) / den[:, None]


# -- weight containers ---------------------------------------------------------

_BLOCK_KEYS = ("wq", "wk", "wv", "wo", "ff_w1", "ff_b1", "ff_w2", "ff_b2")


def _check_block(block: dict, dim: int, name: str) -> None:
    shapes = {
        "wq": (dim, dim), "wk": (dim, dim), "wv": (dim, dim), "wo": (dim, dim),
        "ff_w1": (dim, 2 * dim), "ff_b1": (2 * dim,),
        "ff_w2": (2 * dim, dim), "ff_b2": (dim,),
    }
    for key in _BLOCK_KEYS:
        arr = block.get(key)
        if arr is None or arr.shape != shapes[key]:
            raise ValueError(f"{name}.{key}: expected shape {shapes[key]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}.{key} has non-finite values")


@dataclass(frozen=True)
class AttentionWeights:
    dim: int
    n_layers: int  # interaction repetitions
    heads: int = 1
    normalize: bool = False  # per-token standardization before each sublayer
    layers: tuple = ()       # n_layers entries of {"self": block, "cross": block}

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ValueError("heads must divide the token dimension")
        if len(self.layers) != self.n_layers:
            raise ValueError("layer count inconsistent with n_layers")
        for i, layer in enumerate(self.layers):
            _check_block(layer["self"], self.dim, f"layer{i}.self")
            _check_block(layer["cross"], self.dim, f"layer{i}.cross")


def zero_attention_weights(dim: int, n_layers: int, heads: int = 1) -> AttentionWeights:
    def block():
        return {
            "wq": np.zeros((dim, dim)), "wk": np.zeros((dim, dim)),
            "wv": np.zeros((dim, dim)), "wo": np.zeros((dim, dim)),
            "ff_w1": np.zeros((dim, 2 * dim)), "ff_b1": np.zeros(2 * dim),
            "ff_w2": np.zeros((2 * dim, dim)), "ff_b2": np.zeros(dim),
        }
    layers = tuple({"self": block(), "cross": block()} for _ in range(n_layers))
    return AttentionWeights(dim, n_layers, heads, False, layers)


def random_attention_weights(seed: int, dim: int, n_layers: int, heads: int = 1,
                             scale: float = 0.2, normalize: bool = False) -> AttentionWeights:
    rng = np.random.default_rng(seed)
    std = scale / np.sqrt(dim)

    def block():
        return {
            "wq": rng.normal(0, std, (dim, dim)),
            "wk": rng.normal(0, std, (dim, dim)),
            "wv": rng.normal(0, std, (dim, dim)),
            "wo": rng.normal(0, std, (dim, dim)),
            "ff_w1": rng.normal(0, std, (dim, 2 * dim)),
            "ff_b1": np.zeros(2 * dim),
            "ff_w2": rng.normal(0, std, (2 * dim, dim)),
            "ff_b2": np.zeros(dim),
        }

    layers = tuple({"self": block(), "cross": block()} for _ in range(n_layers))
    return AttentionWeights(dim, n_layers, heads, normalize, layers)


# -- transform -----------------------------------------------------------------


def _standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return (x - mu) / np.maximum(sd, 1e-6)


def _attend(x: np.ndarray, y: np.ndarray, block: dict, heads: int,
            normalize: bool) -> np.ndarray:
    """One residual attention sublayer (x attends to y) plus feed-forward."""
    xin = _standardize(x) if normalize else x
    yin = _standardize(y) if normalize else y
    q = xin @ block["wq"]
    k = yin @ block["wk"]
    v = yin @ block["wv"]
    dh = x.shape[1] // heads
    msgs = [
        linear_attention(q[:, h * dh:(h + 1) * dh],
                         k[:, h * dh:(h + 1) * dh],
                         v[:, h * dh:(h + 1) * dh])
        for h in range(heads)
    ]
    x = x + np.concatenate(msgs, axis=1) @ block["wo"]
    xin = _standardize(x) if normalize else x
    hidden = np.maximum(xin @ block["ff_w1"] + block["ff_b1"], 0.0)
    return x + hidden @ block["ff_w2"] + block["ff_b2"]


def loftr_transform(us_tokens: TokenSequence, ct_tokens: TokenSequence,
                    weights: AttentionWeights):
    """Interleaved self/cross attention over both sequences, n_layers times."""
    if us_tokens.tokens.shape[1] != ct_tokens.tokens.shape[1]:
        raise ValueError("token sequences must share the channel dimension")
    if us_tokens.tokens.shape[1] != weights.dim:
        raise ValueError(
            f"weights dimension {weights.dim} != token dimension "
            f"{us_tokens.tokens.shape[1]}"
        )
    us = np.array(us_tokens.tokens, dtype=np.float64)
    ct = np.array(ct_tokens.tokens, dtype=np.float64)
    for layer in weights.layers:
        us = _attend(us, us, layer["self"], weights.heads, weights.normalize)
        ct = _attend(ct, ct, layer["self"], weights.heads, weights.normalize)
        us = _attend(us, ct, layer["cross"], weights.heads, weights.normalize)
        ct = _attend(ct, us, layer["cross"], weights.heads, weights.normalize)
    remake = lambda seq, tok: TokenSequence(
        tok, seq.index_map, seq.source, seq.grid_dims, seq.scale, seq.spacing
    )
    return remake(us_tokens, us), remake(ct_tokens, ct)


# -- weights file format (same manifest + blob scheme as the extractor) --------


def save_attention_weights(weights: AttentionWeights, path: str) -> None:
    blob_path = os.path.splitext(path)[0] + ".bin"
    manifest = {
        "dim": weights.dim, "n_layers": weights.n_layers,
        "heads": weights.heads, "normalize": weights.normalize,
        "blob": os.path.basename(blob_path), "layers": [],
    }
    offset, chunks = 0, []
    for i, layer in enumerate(weights.layers):
        for role in ("self", "cross"):
            for key in _BLOCK_KEYS:
                arr = np.asarray(layer[role][key], dtype="<f4")
                manifest["layers"].append({
                    "name": f"{i}.{role}.{key}", "shape": list(arr.shape),
                    "offset": offset, "size": arr.size,
                })
                chunks.append(arr.ravel())
                offset += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.tofile(blob_path)
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_attention_weights(path: str) -> AttentionWeights:
    with open(path) as fh:
        manifest = json.load(fh)
    blob = np.fromfile(
        os.path.join(os.path.dirname(path) or ".", manifest["blob"]), dtype="<f4"
    )
    layers = [
        {"self": {}, "cross": {}} for _ in range(manifest["n_layers"])
    ]
    for entry in manifest["layers"]:
        idx, role, key = entry["name"].split(".")
        lo, n = entry["offset"], entry["size"]
        layers[int(idx)][role][key] = (
            blob[lo:lo + n].astype(np.float64).reshape(entry["shape"])
        )
    return AttentionWeights(
        manifest["dim"], manifest["n_layers"], manifest["heads"],
        manifest["normalize"], tuple(layers),
    )
