"""Procedural head-like label maps for desk-scale experiments.

Each map is a sphere "brain" wrapped in a shell "skull" plus a few
distractor ellipsoids floating in the background, on a 1-mm isotropic
grid. Both tissues carry wedge sub-labels (sign patterns of random
center planes): eight for the brain (ids 1-8), four for the shell
(ids 9-12). Sub-labels draw intensities independently during
synthesis, so a single unlucky draw cannot hide the entire brain
boundary; a boundary patch stays visible unless both of its sides
collide at once. Distractors take ids 13+. The brain-to-grid
proportion follows the full-scale setup: radius 25-31 pct of the grid
extent, about the ratio a real head occupies in a conformed volume.
"""

from __future__ import annotations

from dataclasses import replace
from itertools import product

import numpy as np

from .volume import Grid, LabelVolume

BRAIN_LABELS = (1, 2, 3, 4, 5, 6, 7, 8)
SHELL_LABELS = (9, 10, 11, 12)
SHELL_LABEL = SHELL_LABELS[-1]  # highest shell id; distractors start past it


def make_toy_label_map(seed: int, dims: int = 32) -> LabelVolume:
    """Random two-tissue head phantom; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 97]))
    n = int(dims)
    grid = Grid.isotropic((n, n, n), 1.0)
    ax = np.arange(n, dtype=np.float64)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    scale = n / 32.0
    center = (n - 1) / 2.0 + rng.uniform(-1.0, 1.0, size=3) * scale
    r_brain = rng.uniform(0.25, 0.31) * n
    shell = rng.uniform(1.5, 2.5) * scale
    d = np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2)
    labels = np.zeros((n, n, n), dtype=np.int64)
    labels[d <= r_brain + shell] = SHELL_LABEL
    planes = rng.normal(size=(3, 3))
    planes /= np.linalg.norm(planes, axis=1, keepdims=True)
    rel = np.stack([x - center[0], y - center[1], z - center[2]], axis=-1)
    wedge = np.ones((n, n, n), dtype=np.int64)
    for k in range(3):
        wedge += (1 << k) * ((rel @ planes[k]) >= 0.0).astype(np.int64)
    inside = d <= r_brain
    labels[inside] = wedge[inside]

    def carve(c, semi, value):
        e = (
            ((x - c[0]) / semi[0]) ** 2
            + ((y - c[1]) / semi[1]) ** 2
            + ((z - c[2]) / semi[2]) ** 2
        )
        labels[(e <= 1.0) & (labels == 0)] = value

    # distractors sit outside the skull, inside the grid margin; the void
    # shrinks toward the corners for the largest brains, so failed rejection
    # placement falls back to a small blob in a per-blob corner
    corners = list(product((False, True), repeat=3))
    n_blobs = int(rng.integers(2, 5))
    for b in range(n_blobs):
        for _ in range(40):
            c = rng.uniform(2.5 * scale, n - 1 - 2.5 * scale, size=3)
            semi = rng.uniform(1.5, 3.5, size=3) * scale
            if np.linalg.norm(c - center) > r_brain + shell + semi.max() + 1.0:
                carve(c, semi, SHELL_LABEL + 1 + b)
                break
        else:
            hi = (n - 1) - 4.5 * scale
            c = np.array([hi if s else 4.5 * scale for s in corners[b]])
            carve(c, np.full(3, 2.0 * scale), SHELL_LABEL + 1 + b)
    return LabelVolume(grid, labels)


def toy_synthesis_config(base, dims: int = 32):
    """Adapt a full-size synthesis config to the toy grid extent.

    Besides the mm-range rescale, resolution degradation is capped so the
    coarsest draw keeps about as many samples across the toy brain as the
    full-size setup's coarsest draw keeps across a real one (factor 6 of a
    256 grid leaves ~25). A toy grid run through the full factor list would
    drop to a few samples per brain, an unresolvable regime no amount of
    training recovers from.
    """
    cap = max(1, int(dims) // 32)
    factors = tuple(f for f in base.downsample_factors if f <= cap) or (1,)
    return replace(
        base.scaled_to_extent(float(dims)),
        brain_labels=BRAIN_LABELS,
        downsample_factors=factors,
    )
