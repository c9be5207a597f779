"""Coarse/fine descriptor extraction and token sequences.

The extractor is a small strided convolutional stack with per-scale 1x1
projection heads, in 2D (frames) and 3D (volumes) variants: three stride-2
stages give the coarse grid at 1/8 of the input, the fine head taps the
stage-2 output at 1/4. Inputs are zero-padded up to multiples of 8 and the
resulting grids are cropped to ``ceil(dim / scale)`` per axis.

Descriptor grids flatten to token sequences in C order (``reshape(N, d)``);
``index_map[k]`` is the grid coordinate of token k, and grid coordinate g
sits at ``g * scale * spacing`` mm of the source image.

An oracle descriptor mode produces descriptors that depend only on a point's
physical mm position (same function for both modalities), which lets the
matching and pose stages be exercised independently of learned features.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .volume import Frame2D, Volume3D

STAGE_CHANNELS = (16, 24, 32)


@dataclass(frozen=True)
class ExtractorConfig:
    d_c: int = 32          # coarse descriptor channels
    d_f: int = 16          # fine descriptor channels
    nonlinearity: bool = True  # ReLU between stages; off = fully linear (test mode)


@dataclass(frozen=True)
class FeatureMap:
    grid_dims: tuple
    scale: int  # downsampling factor relative to the input image
    channels: int
    data: np.ndarray  # shape (*grid_dims, channels)
    spacing: tuple    # mm per original pixel/voxel of the source image

    def __post_init__(self):
        if self.scale not in (4, 8):
            raise ValueError(f"scale must be 4 or 8, got {self.scale}")
        if self.data.shape != tuple(self.grid_dims) + (self.channels,):
            raise ValueError(
                f"data shape {self.data.shape} inconsistent with "
                f"grid {self.grid_dims} x {self.channels}"
            )

    def cell_size_mm(self) -> np.ndarray:
        return self.scale * np.asarray(self.spacing, dtype=np.float64)


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray     # (N, d)
    index_map: np.ndarray  # (N, ndim) int grid coordinates, C-order flattening
    source: str            # "us" | "ct"
    grid_dims: tuple
    scale: int
    spacing: tuple

    def positions_mm(self) -> np.ndarray:
        """3D mm positions of the tokens (2D grids lift to the z = 0 plane)."""
        step = self.scale * np.asarray(self.spacing, dtype=np.float64)
        pos = self.index_map.astype(np.float64) * step
        if pos.shape[1] == 2:
            pos = np.hstack([pos, np.zeros((pos.shape[0], 1))])
        return pos


# -- convolution stack ---------------------------------------------------------


def _conv_stride2(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-2 conv, kernel size 3, zero padding 1. x: (C_in, *spatial)."""
    ndim = x.ndim - 1
    pad = [(0, 0)] + [(1, 1)] * ndim
    xp = np.pad(x, pad)
    out_spatial = tuple(s // 2 for s in x.shape[1:])
    out = np.zeros((kernel.shape[0],) + out_spatial, dtype=np.float64)
    for offsets in itertools.product(range(3), repeat=ndim):
        sl = tuple(
            slice(o, o + 2 * n - 1, 2) for o, n in zip(offsets, out_spatial)
        )
        view = xp[(slice(None),) + sl]
        k = kernel[(slice(None), slice(None)) + offsets]  # (C_out, C_in)
        out += np.tensordot(k, view, axes=([1], [0]))
    return out + bias.reshape((-1,) + (1,) * ndim)


def _project(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """1x1 projection head. x: (C_in, *spatial) -> (C_out, *spatial)."""
    out = np.tensordot(weight, x, axes=([1], [0]))
    return out + bias.reshape((-1,) + (1,) * (x.ndim - 1))


@dataclass(frozen=True)
class ExtractorWeights:
    ndim: int
    config: ExtractorConfig
    layers: dict  # name -> ndarray

    LAYER_NAMES = ("stem", "mid", "top", "fine_proj", "coarse_proj")

    def __post_init__(self):
        c1, c2, c3 = STAGE_CHANNELS
        k = (3,) * self.ndim
        expected = {
            "stem": (c1, 1) + k,
            "mid": (c2, c1) + k,
            "top": (c3, c2) + k,
            "fine_proj": (self.config.d_f, c2),
            "coarse_proj": (self.config.d_c, c3),
        }
        for name, shape in expected.items():
            w = self.layers.get(name)
            b = self.layers.get(name + "_b")
            if w is None or b is None:
                raise ValueError(f"missing weights for layer {name!r}")
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(
                    f"layer {name!r}: got {w.shape}/{b.shape}, expected {shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {name!r} has non-finite values")


def random_extractor_weights(seed: int, ndim: int,
                             config: ExtractorConfig = ExtractorConfig()) -> ExtractorWeights:
    """He-scaled random weights for a fixed small architecture."""
    rng = np.random.default_rng(seed)
    c1, c2, c3 = STAGE_CHANNELS
    k = (3,) * ndim
    layers = {}
    for name, (c_out, c_in), kshape in (
        ("stem", (c1, 1), k),
        ("mid", (c2, c1), k),
        ("top", (c3, c2), k),
        ("fine_proj", (config.d_f, c2), ()),
        ("coarse_proj", (config.d_c, c3), ()),
    ):
        fan_in = c_in * int(np.prod(kshape)) if kshape else c_in
        std = np.sqrt(2.0 / fan_in)
        layers[name] = rng.normal(0.0, std, size=(c_out, c_in) + kshape)
        layers[name + "_b"] = np.zeros(c_out)
    return ExtractorWeights(ndim, config, layers)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def extract_features(image, weights: ExtractorWeights):
    """Returns (coarse, fine) feature maps at scales 8 and 4."""
    if isinstance(image, Frame2D):
        ndim, spacing = 2, image.spacing
    elif isinstance(image, Volume3D):
        ndim, spacing = 3, image.spacing
    else:
        raise TypeError(f"expected Frame2D or Volume3D, got {type(image)!r}")
    if weights.ndim != ndim:
        raise ValueError(
            f"{ndim}D input but weights are for {weights.ndim}D images"
        )
    dims = image.dims
    if any(d < 16 for d in dims):
        raise ValueError(f"input dims must be >= 16 per axis, got {dims}")

    padded = tuple(8 * _ceil_div(d, 8) for d in dims)
    x = np.zeros((1,) + padded, dtype=np.float64)
    x[(0,) + tuple(slice(0, d) for d in dims)] = image.data

    relu = weights.config.nonlinearity
    h = _conv_stride2(x, weights.layers["stem"], weights.layers["stem_b"])
    if relu:
        h = np.maximum(h, 0.0)
    h2 = _conv_stride2(h, weights.layers["mid"], weights.layers["mid_b"])
    if relu:
        h2 = np.maximum(h2, 0.0)
    h3 = _conv_stride2(h2, weights.layers["top"], weights.layers["top_b"])
    if relu:
        h3 = np.maximum(h3, 0.0)

    fine = _project(h2, weights.layers["fine_proj"], weights.layers["fine_proj_b"])
    coarse = _project(h3, weights.layers["coarse_proj"], weights.layers["coarse_proj_b"])

    fine_dims = tuple(_ceil_div(d, 4) for d in dims)
    coarse_dims = tuple(_ceil_div(d, 8) for d in dims)
    fine = fine[(slice(None),) + tuple(slice(0, g) for g in fine_dims)]
    coarse = coarse[(slice(None),) + tuple(slice(0, g) for g in coarse_dims)]

    to_map = lambda arr, scale, gdims: FeatureMap(
        gdims, scale, arr.shape[0], np.moveaxis(arr, 0, -1).copy(), tuple(spacing)
    )
    return to_map(coarse, 8, coarse_dims), to_map(fine, 4, fine_dims)


# -- positional encoding -------------------------------------------------------


def positional_encoding(grid_dims, channels: int) -> np.ndarray:
    """Sinusoidal grid encoding; shape (*grid_dims, channels), values in [-1, 1].

    The channel range splits into one block per axis; each block holds sin
    then cos at geometrically spaced frequencies of the integer grid index.
    """
    ndim = len(grid_dims)
    if channels % (2 * ndim) != 0:
        raise ValueError(
            f"channels ({channels}) must be divisible by 2 * naxes ({2 * ndim})"
        )
    block = channels // ndim
    n_freq = block // 2
    freqs = 10000.0 ** (-np.arange(n_freq) / max(n_freq, 1))
    out = np.zeros(tuple(grid_dims) + (channels,), dtype=np.float64)
    for axis, size in enumerate(grid_dims):
        phase = np.arange(size)[:, None] * freqs[None, :]  # (size, n_freq)
        shape = [1] * ndim + [n_freq]
        shape[axis] = size
        lo = axis * block
        out[..., lo:lo + n_freq] = np.sin(phase).reshape(shape)
        out[..., lo + n_freq:lo + block] = np.cos(phase).reshape(shape)
    return out


def tokenize(fm: FeatureMap, add_pe: bool = False, source: str = "ct") -> TokenSequence:
    """Flatten a feature map to tokens (C-order); optionally add the encoding."""
    data = fm.data
    if add_pe:
        data = data + positional_encoding(fm.grid_dims, fm.channels)
    n = int(np.prod(fm.grid_dims))
    tokens = data.reshape(n, fm.channels)
    index_map = np.stack(
        np.unravel_index(np.arange(n), fm.grid_dims), axis=-1
    ).astype(np.int64)
    return TokenSequence(tokens, index_map, source, tuple(fm.grid_dims),
                         fm.scale, tuple(fm.spacing))


def grid_from_tokens(seq: TokenSequence) -> np.ndarray:
    """Inverse of :func:`tokenize` (without the encoding): grid layout."""
    return seq.tokens.reshape(tuple(seq.grid_dims) + (-1,))


# -- oracle descriptors --------------------------------------------------------


@dataclass(frozen=True)
class OracleSpec:
    """Sin/cos position code shared across modalities.

    ``channels`` must be divisible by 6 (3 axes x sin/cos per frequency).
    The inner product of two descriptors peaks at ``gain`` when the mm
    positions coincide and decays with distance on the wavelength scale.
    """

    channels: int = 48
    min_wavelength_mm: float = 16.0
    max_wavelength_mm: float = 256.0
    gain: float = 1.0

    def __post_init__(self):
        if self.channels % 6 != 0:
            raise ValueError("oracle channels must be divisible by 6")
        if not (0 < self.min_wavelength_mm <= self.max_wavelength_mm):
            raise ValueError("need 0 < min_wavelength <= max_wavelength")


def oracle_descriptors(positions_mm: np.ndarray, spec: OracleSpec = OracleSpec()) -> np.ndarray:
    """Descriptors that are deterministic functions of 3D mm position."""
    pos = np.asarray(positions_mm, dtype=np.float64).reshape(-1, 3)
    n_freq = spec.channels // 6
    wl = np.geomspace(spec.min_wavelength_mm, spec.max_wavelength_mm, n_freq)
    phase = 2.0 * np.pi * pos[:, :, None] / wl[None, None, :]  # (N, 3, n_freq)
    feats = np.concatenate([np.sin(phase), np.cos(phase)], axis=2)
    feats = feats.reshape(pos.shape[0], spec.channels)
    return feats * np.sqrt(spec.gain / (3 * n_freq))


# -- weights file format -------------------------------------------------------


def save_extractor_weights(weights: ExtractorWeights, path: str) -> None:
    """Manifest JSON + single raw f32le blob next to it."""
    blob_path = os.path.splitext(path)[0] + ".bin"
    manifest = {
        "ndim": weights.ndim,
        "config": {
            "d_c": weights.config.d_c,
            "d_f": weights.config.d_f,
            "nonlinearity": weights.config.nonlinearity,
        },
        "blob": os.path.basename(blob_path),
        "layers": [],
    }
    offset = 0
    chunks = []
    for name in sorted(weights.layers):
        arr = np.asarray(weights.layers[name], dtype="<f4")
        manifest["layers"].append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "size": arr.size}
        )
        chunks.append(arr.ravel())
        offset += arr.size
    np.concatenate(chunks).tofile(blob_path)
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_extractor_weights(path: str) -> ExtractorWeights:
    with open(path) as fh:
        manifest = json.load(fh)
    blob = np.fromfile(
        os.path.join(os.path.dirname(path) or ".", manifest["blob"]), dtype="<f4"
    )
    layers = {}
    for entry in manifest["layers"]:
        lo, n = entry["offset"], entry["size"]
        layers[entry["name"]] = blob[lo:lo + n].astype(np.float64).reshape(entry["shape"])
    cfg = ExtractorConfig(**manifest["config"])
    return ExtractorWeights(manifest["ndim"], cfg, layers)
