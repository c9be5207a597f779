"""3D volumes, 2D frames, synthetic phantoms, slicing, and degradation.

Grid conventions:

* ``Volume3D.data`` has shape ``dims = (nx, ny, nz)`` and is indexed
  ``data[ix, iy, iz]``. Voxel (ix, iy, iz) sits at ``(ix*sx, iy*sy, iz*sz)``
  mm, so the volume's mm frame has its origin at voxel (0, 0, 0).
* ``Frame2D.data`` has shape ``dims = (nu, nv)``; pixel (u, v) lifts to the
  3D point ``(u*su, v*sv, 0)`` mm in frame coordinates (the frame plane is
  z = 0).
* On disk a grid is a raw little-endian float32 array (x-fastest order,
  ``ravel(order="F")``) next to a JSON sidecar describing dims and spacing.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .geometry import RigidPose, apply


@dataclass(frozen=True)
class Volume3D:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]  # mm/voxel
    data: np.ndarray  # float32, shape dims

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be 3 positive ints, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be 3 positive floats")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != dims:
            raise ValueError(f"data shape {data.shape} != dims {dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "data", data)

    def center_mm(self) -> np.ndarray:
        return (np.array(self.dims) - 1.0) * np.array(self.spacing) / 2.0


@dataclass(frozen=True)
class Frame2D:
    dims: tuple[int, int]
    spacing: tuple[float, float]  # mm/pixel
    data: np.ndarray  # float32, shape dims

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 2 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be 2 positive ints, got {self.dims}")
        if len(self.spacing) != 2 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be 2 positive floats")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.shape != dims:
            raise ValueError(f"data shape {data.shape} != dims {dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("frame intensities must be finite")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "data", data)

    def center_mm(self) -> np.ndarray:
        """Frame center lifted to 3D frame coordinates (z = 0)."""
        c = (np.array(self.dims) - 1.0) * np.array(self.spacing) / 2.0
        return np.array([c[0], c[1], 0.0])


def make_phantom(seed: int, dims=(96, 96, 96), spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Deterministic blob phantom: 5-15 smooth ellipsoids over a mild gradient.

    Intensities land in [0, 1]. Blobs use a Gaussian falloff in the
    ellipsoid norm so intensity varies smoothly everywhere (keeps a usable
    basin for histogram-based refinement).
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 16 for d in dims):
        raise ValueError(f"phantom dims must be >= 16 per axis, got {dims}")
    rng = np.random.default_rng(seed)
    extent = np.array(dims) * np.array(spacing)

    grids = np.meshgrid(
        *(np.arange(d) * s for d, s in zip(dims, spacing)), indexing="ij"
    )
    pos = np.stack(grids, axis=-1)  # (nx, ny, nz, 3) mm

    # smooth background gradient, max amplitude ~0.12
    gdir = rng.normal(size=3)
    gdir /= np.linalg.norm(gdir)
    ramp = pos @ gdir
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    vol = 0.04 + 0.08 * ramp

    n_blobs = int(rng.integers(5, 16))
    for _ in range(n_blobs):
        center = extent * rng.uniform(0.2, 0.8, size=3)
        semi = extent.mean() * rng.uniform(0.06, 0.22, size=3)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        amp = rng.uniform(0.3, 0.9)
        d = (pos - center) @ q / semi
        rho2 = np.einsum("...k,...k->...", d, d)
        vol += amp * np.exp(-rho2)

    return Volume3D(dims, spacing, np.clip(vol, 0.0, 1.0))


def trilinear_sample(vol: Volume3D, points_mm: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of volume intensities at (N, 3) mm points.

    Points outside the voxel-node extent [0, dims-1] (in index units)
    return 0.
    """
    c = np.asarray(points_mm, dtype=np.float64) / np.array(vol.spacing)
    dims = np.array(vol.dims)
    inside = np.all((c >= 0.0) & (c <= dims - 1.0), axis=-1)

    i0 = np.clip(np.floor(c).astype(np.int64), 0, np.maximum(dims - 2, 0))
    f = c - i0
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1 = np.minimum(x0 + 1, dims[0] - 1)
    y1 = np.minimum(y0 + 1, dims[1] - 1)
    z1 = np.minimum(z0 + 1, dims[2] - 1)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]

    d = vol.data.astype(np.float64)
    out = (
        d[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
        + d[x1, y0, z0] * fx * (1 - fy) * (1 - fz)
        + d[x0, y1, z0] * (1 - fx) * fy * (1 - fz)
        + d[x0, y0, z1] * (1 - fx) * (1 - fy) * fz
        + d[x1, y1, z0] * fx * fy * (1 - fz)
        + d[x1, y0, z1] * fx * (1 - fy) * fz
        + d[x0, y1, z1] * (1 - fx) * fy * fz
        + d[x1, y1, z1] * fx * fy * fz
    )
    return np.where(inside, out, 0.0)


def frame_pixel_positions(frame_dims, frame_spacing) -> np.ndarray:
    """Lift every pixel (u, v) to (u*su, v*sv, 0) mm; shape (nu, nv, 3)."""
    nu, nv = frame_dims
    su, sv = frame_spacing
    u, v = np.meshgrid(np.arange(nu) * su, np.arange(nv) * sv, indexing="ij")
    return np.stack([u, v, np.zeros_like(u)], axis=-1)


def extract_slice(vol: Volume3D, pose: RigidPose, frame_dims=(128, 128),
                  frame_spacing=(0.5, 0.5)) -> Frame2D:
    """Resample the volume on the plane defined by ``pose`` (frame -> volume)."""
    lifted = frame_pixel_positions(frame_dims, frame_spacing)
    vol_mm = apply(pose, lifted.reshape(-1, 3))
    values = trilinear_sample(vol, vol_mm).reshape(lifted.shape[:2])
    return Frame2D(tuple(frame_dims), tuple(frame_spacing), values.astype(np.float32))


def us_degrade(frame: Frame2D, seed: int) -> Frame2D:
    """Ultrasound-style statistical degradation of a frame.

    Monotone gamma remap, multiplicative speckle (smoothed noise field), and
    exponential depth attenuation along v. Zero stays zero (fully
    multiplicative model); output is deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    data = frame.data.astype(np.float64)

    gamma = rng.uniform(0.6, 0.9)
    out = np.power(np.clip(data, 0.0, None), gamma)

    noise = rng.standard_normal(size=out.shape)
    # cheap separable smoothing for short-range speckle correlation
    kernel = np.array([0.25, 0.5, 0.25])
    for axis in (0, 1):
        noise = np.apply_along_axis(
            lambda m: np.convolve(m, kernel, mode="same"), axis, noise
        )
    speckle = np.clip(1.0 + 0.45 * noise / max(noise.std(), 1e-12), 0.0, None)
    out = out * speckle

    depth = np.arange(frame.dims[1]) * frame.spacing[1]
    attenuation = np.exp(-0.008 * depth)
    out = out * attenuation[None, :]

    return Frame2D(frame.dims, frame.spacing, out.astype(np.float32))


# -- raw + JSON sidecar file format ------------------------------------------


def _sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".json"


def write_grid(data: np.ndarray, path: str, spacing=None) -> None:
    """Write an n-dimensional grid as raw f32le (x-fastest) plus sidecar."""
    meta = {
        "dims": list(data.shape),
        "dtype": "f32le",
        "order": "x-fastest",
    }
    if spacing is not None:
        meta["spacing_mm"] = [float(s) for s in spacing]
    arr = np.asarray(data, dtype="<f4").ravel(order="F")
    arr.tofile(path)
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def read_grid(path: str):
    """Read a raw grid written by :func:`write_grid`; returns (data, meta)."""
    with open(_sidecar_path(path)) as fh:
        meta = json.load(fh)
    if meta.get("dtype") != "f32le" or meta.get("order") != "x-fastest":
        raise ValueError(f"unsupported grid encoding in {_sidecar_path(path)}")
    dims = tuple(int(d) for d in meta["dims"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"raw size {data.size} != product of dims {dims}")
    return data.reshape(dims, order="F"), meta


def save_volume(vol: Volume3D, path: str) -> None:
    write_grid(vol.data, path, spacing=vol.spacing)


def load_volume(path: str) -> Volume3D:
    data, meta = read_grid(path)
    if data.ndim != 3:
        raise ValueError(f"{path} is not a 3D grid")
    return Volume3D(tuple(data.shape), tuple(meta["spacing_mm"]), data)


def save_frame(frame: Frame2D, path: str) -> None:
    write_grid(frame.data, path, spacing=frame.spacing)


def load_frame(path: str) -> Frame2D:
    data, meta = read_grid(path)
    if data.ndim != 2:
        raise ValueError(f"{path} is not a 2D grid")
    return Frame2D(tuple(data.shape), tuple(meta["spacing_mm"]), data)
