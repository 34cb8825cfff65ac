"""Generative model: whole-head label map -> randomized training pair.

Pipeline order is fixed: warp -> merge brain mask -> banded SDT -> per-label
Gaussian rendering -> bias field -> normalize + gamma -> resolution
degradation -> FOV crop -> final rescale to [0, 1]. Targets (mask, SDT) come
from the warped map only; later corruptions touch the image alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .distance import SDTVolume, band_target, signed_distance_transform
from .volume import (
    BinaryMask,
    Grid,
    LabelVolume,
    ScalarVolume,
    _interp_trilinear,
    rescale_unit,
)

# sampling ranges mirror the documented config keys one to one
RANGE_FIELDS = (
    "affine_translation_mm",
    "affine_rotation_deg",
    "affine_scaling_pct",
    "deformation_voxel_length_mm",
    "deformation_sd_mm",
    "label_intensity_mean",
    "label_intensity_sd",
    "bias_voxel_length_mm",
    "bias_sd",
    "fov_crop_mm",
    "gamma_exponent",
)


@dataclass(frozen=True)
class SynthesisConfig:
    affine_translation_mm: tuple = (0.0, 50.0)
    affine_rotation_deg: tuple = (0.0, 45.0)
    affine_scaling_pct: tuple = (80.0, 120.0)
    deformation_voxel_length_mm: tuple = (8.0, 16.0)
    deformation_sd_mm: tuple = (0.0, 3.0)
    label_intensity_mean: tuple = (0.0, 1.0)
    label_intensity_sd: tuple = (0.0, 0.1)
    bias_voxel_length_mm: tuple = (4.0, 64.0)
    bias_sd: tuple = (0.0, 0.5)
    fov_crop_mm: tuple = (0.0, 50.0)
    gamma_exponent: tuple = (-0.25, 0.25)
    downsample_factors: tuple = (1, 2, 3, 4, 5, 6)
    downsample_axis_prob: float = 0.5
    svf_steps: int = 5
    brain_labels: tuple = (1,)
    sdt_band_mm: float = 5.0
    sdt_band_weight: float = 0.1

    def __post_init__(self):
        for name in RANGE_FIELDS:
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ValueError(f"{name}: range must be finite")
            if lo > hi:
                raise ValueError(f"{name}: inverted range [{lo}, {hi}]")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.affine_scaling_pct[0] <= 0 or self.affine_scaling_pct[1] >= 200:
            raise ValueError("affine_scaling_pct must stay inside (0, 200)")
        if self.deformation_voxel_length_mm[0] <= 0 or self.bias_voxel_length_mm[0] <= 0:
            raise ValueError("field voxel lengths must be positive")
        factors = tuple(int(f) for f in self.downsample_factors)
        if not factors or any(f < 1 for f in factors):
            raise ValueError("downsample_factors must be positive integers")
        if not (0.0 <= self.downsample_axis_prob <= 1.0):
            raise ValueError("downsample_axis_prob must lie in [0, 1]")
        if self.svf_steps < 1:
            raise ValueError("svf_steps must be >= 1")
        brain = tuple(int(b) for b in self.brain_labels)
        if not brain:
            raise ValueError("brain_labels must be non-empty")
        if self.sdt_band_mm <= 0 or not (0 < self.sdt_band_weight <= 1):
            raise ValueError("band parameters out of range")
        object.__setattr__(self, "downsample_factors", factors)
        object.__setattr__(self, "brain_labels", brain)

    def scaled_to_extent(self, extent_mm: float, reference_mm: float = 256.0):
        """Rescale the mm-denominated spatial ranges for a smaller head grid.

        Amplitudes that displace or remove anatomy (translation, crop,
        deformation SD) shrink by extent/reference so their effect relative
        to head size is preserved. Coarse-field voxel lengths instead keep
        their absolute values, capped at the grid extent: they control field
        smoothness relative to the sampling grid, and scaling them down
        would turn smooth warps into per-voxel jitter.  Scale-free rows
        (rotation, scaling, intensities, gamma, downsampling) are untouched.
        """
        f = extent_mm / reference_mm
        cap = lambda r: (min(r[0], extent_mm), min(r[1], extent_mm))
        return replace(
            self,
            affine_translation_mm=(self.affine_translation_mm[0] * f, self.affine_translation_mm[1] * f),
            fov_crop_mm=(self.fov_crop_mm[0] * f, self.fov_crop_mm[1] * f),
            deformation_sd_mm=(self.deformation_sd_mm[0] * f, self.deformation_sd_mm[1] * f),
            deformation_voxel_length_mm=cap(self.deformation_voxel_length_mm),
            bias_voxel_length_mm=cap(self.bias_voxel_length_mm),
        )


@dataclass(frozen=True)
class SynthSample:
    """One randomized training pair plus its target weights and draw record."""

    image: ScalarVolume
    mask: BinaryMask
    sdt: SDTVolume
    seed: int
    weights: ScalarVolume
    draws: dict = field(default_factory=dict)

    def __post_init__(self):
        g = self.image.grid
        if not (g.same_geometry(self.mask.grid) and g.same_geometry(self.sdt.grid)):
            raise ValueError("image, mask, and sdt must share one grid")
        if not g.same_geometry(self.weights.grid):
            raise ValueError("weights must share the sample grid")
        if not np.array_equal(self.mask.data, self.sdt.values > 0):
            raise ValueError("mask must equal the positive side of the SDT")


def merge_brain_labels(s: LabelVolume, brain_labels) -> BinaryMask:
    """Mask true exactly where the voxel label is in brain_labels."""
    brain = np.asarray(sorted(set(int(b) for b in brain_labels)), dtype=np.int64)
    return BinaryMask(s.grid, np.isin(s.data, brain))


def fit_extracerebral_labels(head: ScalarVolume, brain_labels: LabelVolume, k: int = 6) -> LabelVolume:
    """Partition non-zero, non-brain voxels into k intensity-quantile labels.

    Thresholds sit at the sorted-intensity positions (j*n)//k, so for distinct
    intensities the k bins differ by at most one voxel. Tied intensities
    collapse into the upper bin; empty bins trigger a degeneracy warning.
    New labels get fresh ids above the existing maximum.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not head.grid.same_geometry(brain_labels.grid):
        raise ValueError("head and brain labels must share a grid")
    eligible = (head.data != 0) & (brain_labels.data == 0)
    n = int(eligible.sum())
    if n == 0:
        raise ValueError("no extra-cerebral tissue")
    vals = head.data[eligible]
    order = np.sort(vals)
    cut_idx = [(j * n) // k for j in range(1, k)]
    thresholds = order[cut_idx] if cut_idx else np.empty(0, dtype=order.dtype)
    bins = np.searchsorted(thresholds, vals, side="right")
    counts = np.bincount(bins, minlength=k)
    if np.any(counts == 0):
        warnings.warn("degenerate intensity split: some extra-cerebral bins are empty")
    base = int(brain_labels.data.max()) + 1
    out = brain_labels.data.astype(np.int64).copy()
    out[eligible] = base + bins
    return LabelVolume(head.grid, out)


def render_gmm_image(s: LabelVolume, cfg: SynthesisConfig, rng):
    """Paint each label with its own Gaussian intensity distribution.

    Per label (ascending id, background 0 included): mean ~ U(mean range),
    then SD ~ U(sd range); voxel values are Normal(mean, SD). Returns the
    image plus the per-label draw record.
    """
    labels = np.unique(s.data)
    m_lo, m_hi = cfg.label_intensity_mean
    s_lo, s_hi = cfg.label_intensity_sd
    means = np.empty(labels.size)
    sds = np.empty(labels.size)
    for i in range(labels.size):
        means[i] = rng.uniform(m_lo, m_hi)
        sds[i] = rng.uniform(s_lo, s_hi)
    inv = np.searchsorted(labels, s.data.ravel())
    noise = rng.standard_normal(s.data.size)
    img = means[inv] + sds[inv] * noise
    draws = {
        "label_intensity_mean": means,
        "label_intensity_sd": sds,
    }
    return ScalarVolume(s.grid, img.reshape(s.grid.dims)), draws


def _upsampled_coarse_field(target: Grid, voxel_len: float, sd: float, rng):
    """Normal(0, sd) field on a coarse cover grid, trilinearly lifted to target."""
    cgrid = geometry._coarse_cover_grid(target, voxel_len)
    coarse = rng.normal(0.0, 1.0, size=cgrid.dims) * sd
    vox = cgrid.world_to_voxel(target.voxel_centers_world().reshape(-1, 3)).T
    dense = _interp_trilinear(np.ascontiguousarray(coarse), vox)
    return dense.reshape(target.dims)


def apply_bias_field(img: ScalarVolume, cfg: SynthesisConfig, rng):
    """Multiply by exp(smooth field): voxel length ~ U(bias_voxel_length_mm),
    coarse values ~ Normal(0, SD) with SD ~ U(bias_sd)."""
    l_lo, l_hi = cfg.bias_voxel_length_mm
    s_lo, s_hi = cfg.bias_sd
    voxel_len = float(rng.uniform(l_lo, l_hi))
    sd = float(rng.uniform(s_lo, s_hi))
    fld = _upsampled_coarse_field(img.grid, voxel_len, sd, rng)
    out = img.data * np.exp(fld)
    draws = {"bias_voxel_length_mm": voxel_len, "bias_sd": sd}
    return ScalarVolume(img.grid, out), draws


def apply_gamma(img: ScalarVolume, g: float) -> ScalarVolume:
    """Min-max normalize to [0, 1] and exponentiate: v <- v ** exp(g).

    g = 0 is the identity on the normalized image; the exp(g) form keeps the
    sampled exponent range symmetric in log space.
    """
    data = rescale_unit(img.data)
    if g != 0.0:
        data = data ** np.exp(g)
    return ScalarVolume(img.grid, data)


def degrade_resolution(img: ScalarVolume, cfg: SynthesisConfig, rng):
    """Simulate thick slices: box-average then trilinear upsample per axis.

    Each axis is degraded independently with probability downsample_axis_prob
    using an integer factor from cfg.downsample_factors; the array shape never
    changes. Draw order per axis: participation, then factor.
    """
    data = img.data
    factors = []
    for ax in range(3):
        f = 1
        if rng.random() < cfg.downsample_axis_prob:
            f = int(rng.choice(np.asarray(cfg.downsample_factors)))
        factors.append(f)
        if f <= 1:
            continue
        data = _box_then_lerp(data, ax, f)
    return ScalarVolume(img.grid, data), {"downsample_factors": tuple(factors)}


def _box_then_lerp(data, axis, f):
    """Box-average one axis by integer factor f, then lerp back to full length.

    The last box may be partial; block values sit at centers (i*f + (f-1)/2)
    in source index space and query positions clamp to the block range.
    """
    moved = np.moveaxis(data, axis, 0)
    n = moved.shape[0]
    nb = (n + f - 1) // f
    starts = np.arange(nb) * f
    sums = np.add.reduceat(moved, starts, axis=0)
    sizes = np.minimum(starts + f, n) - starts
    block = sums / sizes.reshape(-1, *([1] * (moved.ndim - 1)))
    # query each original sample at its position in block coordinates
    pos = (np.arange(n) + 0.5) / f - 0.5
    pos = np.clip(pos, 0.0, nb - 1.0)
    i0 = np.minimum(pos.astype(np.intp), max(nb - 2, 0))
    w = (pos - i0).reshape(-1, *([1] * (moved.ndim - 1)))
    i1 = np.minimum(i0 + 1, nb - 1)
    out = block[i0] * (1.0 - w) + block[i1] * w
    return np.moveaxis(out, 0, axis)


def crop_fov(img: ScalarVolume, mask: BinaryMask, sdt: SDTVolume, cfg: SynthesisConfig, rng):
    """Zero random end slabs of the image per axis; targets stay intact.

    Per axis: crop extent ~ U(fov_crop_mm) converted to voxels (rounded,
    capped so at least one voxel of content survives), then split uniformly
    between the two ends. Grid dims never change.
    """
    data = img.data.copy()
    crops = []
    for ax in range(3):
        c_mm = float(rng.uniform(*cfg.fov_crop_mm))
        crops.append(c_mm)
        nvox = int(round(c_mm / img.grid.spacing[ax]))
        nvox = min(nvox, img.grid.dims[ax] - 1)
        lo = int(rng.integers(0, nvox + 1))
        hi = nvox - lo
        sl = [slice(None)] * 3
        if lo > 0:
            sl[ax] = slice(0, lo)
            data[tuple(sl)] = 0.0
        if hi > 0:
            sl[ax] = slice(img.grid.dims[ax] - hi, None)
            data[tuple(sl)] = 0.0
    return ScalarVolume(img.grid, data), mask, sdt, {"fov_crop_mm": tuple(crops)}


def synthesize_sample(s: LabelVolume, cfg: SynthesisConfig, seed) -> SynthSample:
    """Deterministic (s, cfg, seed) -> SynthSample.

    Draws with an emptied or boundary-less warped brain mask are rejected and
    resampled from a fresh substream (seed, attempt), keeping the function
    pure in its arguments. The recorded draws cover every sampled
    hyperparameter for range audits.
    """
    if not np.isin(np.asarray(cfg.brain_labels), s.data).any():
        raise ValueError("label map contains no brain label")
    seed_key = [int(seed)] if np.isscalar(seed) else [int(x) for x in seed]
    for attempt in range(64):
        rng = np.random.default_rng(np.random.SeedSequence(seed_key + [attempt]))
        affine = geometry.sample_affine(cfg, rng)
        vf, vf_draws = geometry.sample_velocity_field(cfg, s.grid, rng)
        deform = geometry.integrate_svf(vf, s.grid, steps=cfg.svf_steps)
        warped = geometry.warp_volume(s, affine, deform, mode="nearest")
        mask = merge_brain_labels(warped, cfg.brain_labels)
        n = mask.count
        if n == 0 or n == mask.grid.nvox:
            continue
        draws = {
            "affine_translation_mm": np.abs(affine.translation),
            "affine_rotation_deg": np.abs(affine.rotation),
            "affine_scaling_pct": np.asarray(affine.scale) * 100.0,
        }
        draws.update(vf_draws)
        sdt_full = signed_distance_transform(mask)
        sdt, weights = band_target(sdt_full, cfg.sdt_band_mm, cfg.sdt_band_weight)
        img, gmm_draws = render_gmm_image(warped, cfg, rng)
        draws.update(gmm_draws)
        img, bias_draws = apply_bias_field(img, cfg, rng)
        draws.update(bias_draws)
        g = float(rng.uniform(*cfg.gamma_exponent))
        draws["gamma_exponent"] = g
        img = apply_gamma(img, g)
        img, ds_draws = degrade_resolution(img, cfg, rng)
        draws.update(ds_draws)
        img, mask, sdt, crop_draws = crop_fov(img, mask, sdt, cfg, rng)
        draws.update(crop_draws)
        img = ScalarVolume(img.grid, rescale_unit(img.data))
        draws["attempt"] = attempt
        seed_scalar = seed_key[0] if len(seed_key) == 1 else int(
            np.random.SeedSequence(seed_key).generate_state(1, np.uint64)[0]
        )
        return SynthSample(img, mask, sdt, seed_scalar, weights, draws)
    raise RuntimeError("synthesis rejected 64 consecutive draws; check config ranges vs grid size")
