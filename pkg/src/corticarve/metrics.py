"""Mask evaluation battery.

Distances are voxel-center to voxel-center in mm (anisotropic spacing
honored); boundaries are 6-connected exposure, the EBV neighborhood is
26-connected with out-of-grid counting as non-brain. The paired t-test CDF
uses a continued-fraction regularized incomplete beta (target 1e-10).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .distance import _edt_sq, surface_mask, surface_voxels
from .volume import BinaryMask


@dataclass(frozen=True)
class MaskReport:
    """Per-case metrics; percentages in [0, 100], distances in mm."""

    dice: float
    mean_surface_dist: float
    max_surface_dist: float
    volume_diff: float
    sensitivity: float
    specificity: float

    def as_row(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_grids(a: BinaryMask, b: BinaryMask):
    if not a.grid.same_geometry(b.grid):
        raise ValueError("masks are on different grids")


def dice_overlap(a: BinaryMask, b: BinaryMask) -> float:
    """100 * 2|a.b| / (|a| + |b|); both empty scores 100 with a warning."""
    _check_grids(a, b)
    na, nb = a.count, b.count
    if na + nb == 0:
        warnings.warn("dice of two empty masks (degenerate, scored 100)")
        return 100.0
    inter = int((a.data & b.data).sum())
    return 100.0 * 2.0 * inter / (na + nb)


def surface_distances(a: BinaryMask, b: BinaryMask):
    """(mean, max) symmetric surface distance in mm.

    Boundary sets come from surface_voxels; directed distances are exact EDTs
    of each boundary set sampled at the other's boundary voxels. The mean
    pools all boundary distances over both directions; the max is the
    symmetric Hausdorff distance.
    """
    _check_grids(a, b)
    sa = surface_mask(a).data
    sb = surface_mask(b).data
    hx, hy, hz = a.grid.spacing
    d_to_b = np.sqrt(_edt_sq(np.ascontiguousarray(sb), hx, hy, hz))
    d_to_a = np.sqrt(_edt_sq(np.ascontiguousarray(sa), hx, hy, hz))
    pooled = np.concatenate([d_to_b[sa], d_to_a[sb]])
    return float(pooled.mean()), float(pooled.max())


def volume_difference(a: BinaryMask, b: BinaryMask) -> float:
    """100 * ||a| - |b|| / |b| with b the reference."""
    _check_grids(a, b)
    nb = b.count
    if nb == 0:
        raise ValueError("empty reference mask")
    return 100.0 * abs(a.count - nb) / nb


def sensitivity_specificity(pred: BinaryMask, truth: BinaryMask):
    _check_grids(pred, truth)
    t = truth.data
    p = pred.data
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("truth mask must contain both classes")
    tp = int((p & t).sum())
    tn = int((~p & ~t).sum())
    return 100.0 * tp / n_pos, 100.0 * tn / n_neg


def evaluate_pair(pred: BinaryMask, truth: BinaryMask) -> MaskReport:
    msd, hd = surface_distances(pred, truth)
    sens, spec = sensitivity_specificity(pred, truth)
    return MaskReport(
        dice=dice_overlap(pred, truth),
        mean_surface_dist=msd,
        max_surface_dist=hd,
        volume_diff=volume_difference(pred, truth),
        sensitivity=sens,
        specificity=spec,
    )


def discordant_voxel_pct(masks) -> float:
    """100 * |voxels where frames disagree| / |union of all frames|."""
    masks = list(masks)
    if len(masks) < 2:
        raise ValueError("need at least two frames")
    for m in masks[1:]:
        _check_grids(masks[0], m)
    stack = np.stack([m.data for m in masks])
    union = stack.any(axis=0)
    n_union = int(union.sum())
    if n_union == 0:
        raise ValueError("empty union of frames")
    discordant = union & ~stack.all(axis=0)
    return 100.0 * int(discordant.sum()) / n_union


def exposed_boundary_pct(mask: BinaryMask) -> float:
    """Percent of boundary voxels whose 26-neighborhood is majority non-brain.

    Out-of-grid voxels count as non-brain; 'majority' is strict (more
    non-brain than brain, i.e. fewer than 13 of the 26 neighbors are brain).
    """
    surf = surface_voxels(mask)  # raises on empty mask
    m = mask.data
    p = np.pad(m, 1, mode="constant", constant_values=False).astype(np.int32)
    neigh = np.zeros(m.shape, dtype=np.int32)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                neigh += p[
                    1 + dx:1 + dx + m.shape[0],
                    1 + dy:1 + dy + m.shape[1],
                    1 + dz:1 + dz + m.shape[2],
                ]
    brain_counts = neigh[surf[:, 0], surf[:, 1], surf[:, 2]]
    exposed = int((brain_counts < 13).sum())
    return 100.0 * exposed / surf.shape[0]


class TTestResult(NamedTuple):
    p_value: float
    t_stat: float
    dof: int
    degenerate: bool


def _betacf(a, b, x, max_iter=300, tol=1e-12):
    """Continued fraction for the incomplete beta (Lentz's method)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) to ~1e-10, continued fraction with the symmetry transform."""
    if not (0.0 <= x <= 1.0):
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, dof: float) -> float:
    """Two-sided tail probability P(|T| >= t) for Student's t."""
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


def paired_t_test(x, y) -> TTestResult:
    """Two-sided paired Student t-test.

    Zero-variance differences are degenerate: p is reported as 1.0 with the
    flag set rather than dividing by zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be equal-length 1D sequences")
    n = x.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = x - y
    sd = d.std(ddof=1)
    dof = n - 1
    if sd == 0.0:
        return TTestResult(1.0, 0.0, dof, True)
    t = float(d.mean() / (sd / math.sqrt(n)))
    return TTestResult(student_t_sf2(t, dof), t, dof, False)


@dataclass(frozen=True)
class CohortSummary:
    """Mean +- SD per metric, with optional paired p-values vs a reference."""

    n: int
    means: dict
    sds: dict
    p_values: dict

    def format_lines(self):
        lines = [f"cases: {self.n}"]
        for k in self.means:
            line = f"{k}: {self.means[k]:.3f} +- {self.sds[k]:.3f}"
            if k in self.p_values:
                line += f" (p={self.p_values[k]:.4g})"
            lines.append(line)
        return lines


def summarize_cohort(reports, baseline_reports=None) -> CohortSummary:
    """Aggregate per-case reports; optional paired t-tests vs a baseline set."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to summarize")
    cols = {f.name: np.array([getattr(r, f.name) for r in reports]) for f in fields(MaskReport)}
    means = {k: float(v.mean()) for k, v in cols.items()}
    sds = {k: float(v.std(ddof=1)) if len(reports) > 1 else 0.0 for k, v in cols.items()}
    p_values = {}
    if baseline_reports is not None:
        base = list(baseline_reports)
        if len(base) != len(reports):
            raise ValueError("baseline cohort size differs")
        for k in cols:
            bvals = np.array([getattr(r, k) for r in base])
            p_values[k] = paired_t_test(cols[k], bvals).p_value
    return CohortSummary(len(reports), means, sds, p_values)


def write_report_csv(path, reports, case_ids=None):
    reports = list(reports)
    if case_ids is None:
        case_ids = [str(i) for i in range(len(reports))]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        names = [f.name for f in fields(MaskReport)]
        w.writerow(["case"] + names)
        for cid, r in zip(case_ids, reports):
            w.writerow([cid] + [repr(getattr(r, n)) for n in names])


def read_report_csv(path):
    """Inverse of write_report_csv; returns (case_ids, reports)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    names = [f.name for f in fields(MaskReport)]
    if not rows or rows[0] != ["case"] + names:
        raise ValueError(f"unrecognized report header in {path}")
    ids = [r[0] for r in rows[1:]]
    reports = [MaskReport(**{n: float(v) for n, v in zip(names, r[1:])}) for r in rows[1:]]
    return ids, reports
