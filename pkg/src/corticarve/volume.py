"""Core 3D volume containers and resampling.

Arrays are kept in memory as (nx, ny, nz) numpy arrays indexed [ix, iy, iz].
On disk the flat layout is x-fastest (Fortran order), see fileio. Volumes are
frozen after construction (data.writeable = False) and safe to share.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class Grid:
    """Voxel lattice: dims (voxels per axis), spacing (mm), 4x4 voxel-to-world affine."""

    dims: tuple
    spacing: tuple
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        affine = np.asarray(self.affine, dtype=np.float64)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if abs(np.linalg.det(affine)) <= 1e-12:
            raise ValueError("affine is not invertible")
        affine = affine.copy()
        affine.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def isotropic(cls, dims, spacing=1.0, origin=(0.0, 0.0, 0.0)):
        """Axis-aligned grid: affine = diag(spacing) with voxel (0,0,0) at origin."""
        if np.isscalar(spacing):
            spacing = (spacing,) * 3
        aff = np.diag(list(spacing) + [1.0])
        aff[:3, 3] = origin
        return cls(tuple(dims), tuple(spacing), aff)

    @property
    def nvox(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def voxel_to_world(self, pts):
        """Map (..., 3) continuous voxel coordinates to world mm."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_voxel(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        inv = np.linalg.inv(self.affine)
        return pts @ inv[:3, :3].T + inv[:3, 3]

    def center_world(self):
        """World coordinate of the volume center (voxel (dims-1)/2)."""
        c = (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0
        return self.voxel_to_world(c)

    def voxel_centers_world(self):
        """(nx, ny, nz, 3) world coordinates of every voxel center."""
        ix, iy, iz = np.meshgrid(
            np.arange(self.dims[0]),
            np.arange(self.dims[1]),
            np.arange(self.dims[2]),
            indexing="ij",
        )
        vox = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return self.voxel_to_world(vox)

    def same_geometry(self, other: "Grid", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.affine, other.affine, atol=tol)
        )


def _freeze(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind not in "fiu":
            raise ValueError(f"scalar volume needs numeric data, got {data.dtype}")
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        if data.shape != self.grid.dims:
            raise ValueError(f"data shape {data.shape} != grid dims {self.grid.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))


@dataclass(frozen=True)
class LabelVolume:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind not in "iu":
            raise ValueError(f"label volume needs integer data, got {data.dtype}")
        if np.any(data < 0):
            raise ValueError("label values must be unsigned")
        if data.shape != self.grid.dims:
            raise ValueError(f"data shape {data.shape} != grid dims {self.grid.dims}")
        object.__setattr__(self, "data", _freeze(data))

    def labels(self):
        return np.unique(self.data)


@dataclass(frozen=True)
class BinaryMask:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.bool_:
            if data.dtype.kind not in "iu" or np.any((data != 0) & (data != 1)):
                raise ValueError("mask data must be boolean or 0/1")
            data = data.astype(bool)
        if data.shape != self.grid.dims:
            raise ValueError(f"data shape {data.shape} != grid dims {self.grid.dims}")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def count(self) -> int:
        return int(self.data.sum())


@njit(cache=True)
def _tri_gather(data, cx, cy, cz, out):
    nx, ny, nz = data.shape
    for i in range(out.size):
        x = min(max(cx[i], 0.0), nx - 1.0)
        y = min(max(cy[i], 0.0), ny - 1.0)
        z = min(max(cz[i], 0.0), nz - 1.0)
        if nx > 1:
            x0 = min(int(x), nx - 2)
            fx = x - x0
        else:
            x0 = 0
            fx = 0.0
        if ny > 1:
            y0 = min(int(y), ny - 2)
            fy = y - y0
        else:
            y0 = 0
            fy = 0.0
        if nz > 1:
            z0 = min(int(z), nz - 2)
            fz = z - z0
        else:
            z0 = 0
            fz = 0.0
        x1 = x0 + 1 if nx > 1 else 0
        y1 = y0 + 1 if ny > 1 else 0
        z1 = z0 + 1 if nz > 1 else 0
        c00 = data[x0, y0, z0] * (1.0 - fx) + data[x1, y0, z0] * fx
        c10 = data[x0, y1, z0] * (1.0 - fx) + data[x1, y1, z0] * fx
        c01 = data[x0, y0, z1] * (1.0 - fx) + data[x1, y0, z1] * fx
        c11 = data[x0, y1, z1] * (1.0 - fx) + data[x1, y1, z1] * fx
        c0 = c00 * (1.0 - fy) + c10 * fy
        c1 = c01 * (1.0 - fy) + c11 * fy
        out[i] = c0 * (1.0 - fz) + c1 * fz


def _interp_trilinear(data, coords):
    """Trilinear interpolation at (3, N) continuous voxel coords, edge clamp.

    Returns float64 values. Out-of-grid coordinates clamp to the nearest
    in-bounds sample point, so constants extend past the boundary.
    """
    out = np.empty(coords.shape[1], dtype=np.float64)
    data = np.ascontiguousarray(data, dtype=np.float64)
    _tri_gather(
        data,
        np.ascontiguousarray(coords[0], dtype=np.float64),
        np.ascontiguousarray(coords[1], dtype=np.float64),
        np.ascontiguousarray(coords[2], dtype=np.float64),
        out,
    )
    return out


def _interp_nearest(data, coords):
    """Nearest-neighbor lookup at (3, N) voxel coords, edge clamp."""
    nx, ny, nz = data.shape
    x = np.clip(np.rint(coords[0]), 0, nx - 1).astype(np.intp)
    y = np.clip(np.rint(coords[1]), 0, ny - 1).astype(np.intp)
    z = np.clip(np.rint(coords[2]), 0, nz - 1).astype(np.intp)
    return data[x, y, z]


def trilinear_sample(vol: ScalarVolume, p) -> float:
    """Sample one continuous voxel coordinate, clamping outside the grid."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("sample point must be finite")
    return float(_interp_trilinear(vol.data, p.reshape(3, 1))[0])


def resample_to_grid(vol, target: Grid, mode: str = "trilinear"):
    """Resample a volume onto a target grid through both affines.

    Each target voxel center maps target.affine -> world -> inverse source
    affine and is sampled in the source. Label volumes require mode="nearest".
    Identical geometry short-circuits to a data copy (bit-identical).
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown mode {mode!r}")
    is_label = isinstance(vol, LabelVolume)
    if is_label and mode != "nearest":
        raise ValueError("label volumes must be resampled with mode='nearest'")
    if vol.grid.same_geometry(target):
        return type(vol)(target, vol.data.copy())
    world = target.voxel_centers_world().reshape(-1, 3)
    src = vol.grid.world_to_voxel(world)
    coords = src.T
    if mode == "trilinear":
        out = _interp_trilinear(vol.data, coords)
    else:
        out = _interp_nearest(vol.data, coords)
    out = out.reshape(target.dims)
    if isinstance(vol, BinaryMask):
        return BinaryMask(target, out.astype(bool))
    if is_label:
        return LabelVolume(target, out)
    return ScalarVolume(target, out)


def conform(vol: ScalarVolume):
    """Resample to 1-mm isotropic and min-max rescale intensities to [0, 1].

    The target grid preserves the world extent of the input: dims are the
    per-axis extent in mm rounded up, the corner of the voxel lattice (cell
    model, voxel coordinate (-.5,-.5,-.5)) is held fixed, and the direction
    cosines are carried over. Returns (conformed volume, original grid).
    """
    g = vol.grid
    lin = g.affine[:3, :3]
    directions = lin / np.asarray(g.spacing)[None, :]
    extent = np.asarray(g.dims, dtype=np.float64) * np.asarray(g.spacing)
    # 1e-6 slack so exact integer extents do not round up a voxel
    tdims = tuple(int(np.ceil(e - 1e-6)) for e in extent)
    corner = g.voxel_to_world(np.array([-0.5, -0.5, -0.5]))
    taff = np.eye(4)
    taff[:3, :3] = directions
    taff[:3, 3] = corner + directions @ np.array([0.5, 0.5, 0.5])
    target = Grid(tdims, (1.0, 1.0, 1.0), taff)
    res = resample_to_grid(vol, target, mode="trilinear")
    lo = float(res.data.min())
    hi = float(res.data.max())
    if hi == lo:
        raise ValueError("degenerate intensity range")
    data = (res.data - lo) / (hi - lo)
    return ScalarVolume(target, data), g


def rescale_unit(data: np.ndarray) -> np.ndarray:
    """Min-max map to [0,1]; min lands exactly on 0 and max exactly on 1."""
    lo = data.min()
    hi = data.max()
    if hi == lo:
        raise ValueError("degenerate intensity range")
    return (data - lo) / (hi - lo)


def replace_data(vol, data):
    """New volume of the same kind and grid with different data."""
    return dataclasses.replace(vol, data=data)
