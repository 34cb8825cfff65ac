"""Random spatial transforms: affine draws, stationary velocity fields,
scaling-and-squaring integration, and combined backward warping.

Conventions (fixtures depend on these):
  * rotations compose as R = Rz @ Ry @ Rx, degrees, about the volume center
  * the forward map is p' = C + T + R @ S @ (p - C) in world mm
  * warping is backward (pull): out(p) = in(A^-1(p + disp(p)))
  * affine-then-deformation in one lookup, no intermediate resampling
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import (
    BinaryMask,
    Grid,
    LabelVolume,
    ScalarVolume,
    _interp_nearest,
    _interp_trilinear,
)


@dataclass(frozen=True)
class AffineSample:
    """Translation (mm), rotation (deg per axis), scale (unitless fraction)."""

    translation: tuple
    rotation: tuple
    scale: tuple

    def __post_init__(self):
        t = tuple(float(x) for x in self.translation)
        r = tuple(float(x) for x in self.rotation)
        s = tuple(float(x) for x in self.scale)
        if len(t) != 3 or len(r) != 3 or len(s) != 3:
            raise ValueError("translation, rotation, scale must each have 3 components")
        if any(not (0.0 < x < 2.0) for x in s):
            raise ValueError(f"scale components must lie in (0, 2), got {s}")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls):
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def matrix(self, center) -> np.ndarray:
        """4x4 forward world-mm transform about the given world center."""
        rx, ry, rz = np.deg2rad(self.rotation)
        cx, sx = np.cos(rx), np.sin(rx)
        cy, sy = np.cos(ry), np.sin(ry)
        cz, sz = np.cos(rz), np.sin(rz)
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]], dtype=np.float64)
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]], dtype=np.float64)
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]], dtype=np.float64)
        RS = Rz @ Ry @ Rx @ np.diag(self.scale)
        center = np.asarray(center, dtype=np.float64)
        m = np.eye(4)
        m[:3, :3] = RS
        m[:3, 3] = center + np.asarray(self.translation) - RS @ center
        return m


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity field on a coarse isotropic grid, mm per voxel vector."""

    grid: Grid
    vectors: np.ndarray  # (cx, cy, cz, 3)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.shape != self.grid.dims + (3,):
            raise ValueError(f"vectors shape {v.shape} != grid dims + (3,)")
        if not np.all(np.isfinite(v)):
            raise ValueError("velocity vectors must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)


@dataclass(frozen=True)
class DenseDeformation:
    """Displacement field in mm on the target grid."""

    grid: Grid
    displacement: np.ndarray  # (nx, ny, nz, 3)

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=np.float64)
        if d.shape != self.grid.dims + (3,):
            raise ValueError(f"displacement shape {d.shape} != grid dims + (3,)")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacement must be finite")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "displacement", d)

    @classmethod
    def zero(cls, grid: Grid):
        return cls(grid, np.zeros(grid.dims + (3,)))


def sample_affine(cfg, rng) -> AffineSample:
    """Draw an affine from the configured ranges.

    Translation and rotation magnitudes come from their nonnegative ranges and
    get an independent uniform sign; scaling is drawn directly in percent.
    Draw order (fixed for determinism): translation magnitudes (3), signs (3),
    rotation magnitudes (3), signs (3), scales (3).
    """
    t_lo, t_hi = cfg.affine_translation_mm
    r_lo, r_hi = cfg.affine_rotation_deg
    s_lo, s_hi = cfg.affine_scaling_pct
    t_mag = rng.uniform(t_lo, t_hi, size=3)
    t_sgn = np.where(rng.random(3) < 0.5, -1.0, 1.0)
    r_mag = rng.uniform(r_lo, r_hi, size=3)
    r_sgn = np.where(rng.random(3) < 0.5, -1.0, 1.0)
    scale = rng.uniform(s_lo, s_hi, size=3) / 100.0
    return AffineSample(tuple(t_mag * t_sgn), tuple(r_mag * r_sgn), tuple(scale))


def _coarse_cover_grid(target: Grid, voxel_len: float, min_dims: int = 2) -> Grid:
    """Isotropic coarse grid covering the target's world extent, corner aligned."""
    extent = np.asarray(target.dims, dtype=np.float64) * np.asarray(target.spacing)
    cdims = tuple(int(max(min_dims, np.ceil(e / voxel_len))) for e in extent)
    lin = target.affine[:3, :3] / np.asarray(target.spacing)[None, :]
    corner = target.voxel_to_world(np.array([-0.5, -0.5, -0.5]))
    aff = np.eye(4)
    aff[:3, :3] = lin * voxel_len
    aff[:3, 3] = corner + lin @ (np.full(3, 0.5) * voxel_len)
    return Grid(cdims, (voxel_len,) * 3, aff)


def sample_velocity_field(cfg, target: Grid, rng):
    """Draw an SVF: voxel length ~ U(deformation_voxel_length_mm), per-component
    vectors ~ Normal(0, SD) with SD ~ U(deformation_sd_mm)."""
    l_lo, l_hi = cfg.deformation_voxel_length_mm
    s_lo, s_hi = cfg.deformation_sd_mm
    voxel_len = float(rng.uniform(l_lo, l_hi))
    sd = float(rng.uniform(s_lo, s_hi))
    grid = _coarse_cover_grid(target, voxel_len)
    vec = rng.normal(0.0, 1.0, size=grid.dims + (3,)) * sd
    draws = {"deformation_voxel_length_mm": voxel_len, "deformation_sd_mm": sd}
    return VelocityField(grid, vec), draws


def _sample_field_world(field, grid: Grid, world_pts):
    """Trilinearly sample a (.., 3) field defined on grid at world points (N, 3)."""
    vox = grid.world_to_voxel(world_pts).T
    out = np.empty_like(world_pts)
    for c in range(3):
        out[:, c] = _interp_trilinear(np.ascontiguousarray(field[..., c]), vox)
    return out


def integrate_svf(v: VelocityField, target: Grid, steps: int = 5) -> DenseDeformation:
    """Group exponential of a stationary velocity field by scaling and squaring.

    The coarse field is lifted to target resolution, then phi_0 = v / 2^steps
    is self-composed `steps` times, phi(x) <- phi(x) + phi(x + phi(x)), with
    trilinear sampling of the displacement field. Squaring runs on a lattice
    padded past the target by the field's top speed so the flow never reads
    clamped edge values; the target block is then sliced out exactly.
    Displacements are world mm.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cgrid = v.grid
    speed = float(np.sqrt((v.vectors**2).sum(axis=-1)).max())
    pad = int(np.ceil(speed / min(target.spacing))) + 1
    pdims = tuple(d + 2 * pad for d in target.dims)
    aff = target.affine.copy()
    aff[:3, 3] = target.voxel_to_world(np.full(3, -float(pad)))
    pgrid = Grid(pdims, target.spacing, aff)
    pcenters = pgrid.voxel_centers_world().reshape(-1, 3)
    flat = _sample_field_world(v.vectors, cgrid, pcenters) / float(2**steps)
    for _ in range(steps):
        moved = _sample_field_world(flat.reshape(pdims + (3,)), pgrid, pcenters + flat)
        flat = flat + moved
    full = flat.reshape(pdims + (3,))
    block = full[tuple(slice(pad, pad + d) for d in target.dims)]
    return DenseDeformation(target, np.ascontiguousarray(block))


def warp_volume(vol, affine=None, deformation=None, mode: str = "trilinear"):
    """Backward-warp a volume: out(p) = in(A^-1(p_world + disp(p))).

    The affine acts in world mm about the volume center; the deformation grid
    must match the volume dims. Label and mask volumes require mode='nearest'.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown mode {mode!r}")
    needs_nearest = isinstance(vol, (LabelVolume, BinaryMask))
    if needs_nearest and mode != "nearest":
        raise ValueError("label and mask volumes must be warped with mode='nearest'")
    grid = vol.grid
    if deformation is not None and deformation.grid.dims != grid.dims:
        raise ValueError("deformation grid dims must match the volume dims")
    world = grid.voxel_centers_world().reshape(-1, 3)
    if deformation is not None:
        world = world + deformation.displacement.reshape(-1, 3)
    if affine is not None:
        m_inv = np.linalg.inv(affine.matrix(grid.center_world()))
        world = world @ m_inv[:3, :3].T + m_inv[:3, 3]
    coords = grid.world_to_voxel(world).T
    if mode == "trilinear":
        out = _interp_trilinear(vol.data, coords).reshape(grid.dims)
        return ScalarVolume(grid, out)
    out = _interp_nearest(vol.data, coords).reshape(grid.dims)
    if isinstance(vol, BinaryMask):
        return BinaryMask(grid, out)
    if isinstance(vol, LabelVolume):
        return LabelVolume(grid, out)
    return ScalarVolume(grid, out)
