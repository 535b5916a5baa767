"""Pyramid texture feature extraction from per-region co-occupancy statistics.

Each branch splits the map into s x s sub-regions, summarizes every region's
2-d quantization statistics with a shared descriptor MLP averaged over level
pairs, paints the summary across the region, and the branch maps concatenate
channel-wise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qco import DEFAULT_LEVELS_2D, qco2d
from .tensor import Mlp, ShapeError, Tensor, apply_mlp, concat, init_mlp

DEFAULT_SCALES = (1, 2, 4, 8)


@dataclass
class PtfemBranch:
    qco_mlp: Mlp       # lifts (L_m, L_n, count) cells, shared across regions
    descriptor: Mlp    # region summary over statfeat channels


@dataclass
class PtfemParams:
    branches: list
    scales: tuple

    def __post_init__(self):
        if not self.scales:
            raise ValueError("need at least one pyramid scale")
        if len(self.branches) != len(self.scales):
            raise ShapeError("%d branches for %d scales"
                             % (len(self.branches), len(self.scales)))


def init_ptfem_params(rng: np.random.Generator, in_channels: int,
                      scales=DEFAULT_SCALES, qco_hidden: int = 32,
                      qco_out: int = 64, desc_hidden: int = 32,
                      desc_out: int = 16) -> PtfemParams:
    stat_channels = qco_out + in_channels
    branches = [
        PtfemBranch(qco_mlp=init_mlp(rng, 3, qco_hidden, qco_out),
                    descriptor=init_mlp(rng, stat_channels, desc_hidden, desc_out))
        for _ in scales
    ]
    return PtfemParams(branches=branches, scales=tuple(scales))


def texture_unit(region: Tensor, n_levels: int, branch: PtfemBranch,
                 leak: float = 0.01) -> Tensor:
    """Region descriptor: per-cell MLP over 2-d statistics, then a level-pair mean."""
    _, _, w = region.shape
    if w < 2:
        raise ShapeError("region width %d has no horizontal pixel pairs" % w)
    q = qco2d(region, n_levels, branch.qco_mlp)
    cs, n, _ = q.statfeat.shape
    cells = q.statfeat.reshape(cs, n * n).T                       # [N^2 x Cs]
    lifted = apply_mlp(cells, branch.descriptor.l1, branch.descriptor.l2, leak)
    return lifted.mean(axis=0)                                    # [C']


def glcm_oracle(img, n_levels: int) -> np.ndarray:
    """Brute-force normalized tally of horizontal gray-level pairs.

    Reference implementation for the hard-quantization limit of the 2-d
    counting map; operates on integer gray levels in [0, n_levels).
    """
    arr = np.asarray(img.data if isinstance(img, Tensor) else img)
    if arr.ndim != 2:
        raise ShapeError("oracle expects a 2-d gray image, got %s" % (arr.shape,))
    if arr.shape[1] < 2:
        raise ShapeError("image width %d has no horizontal pairs" % arr.shape[1])
    q = arr.astype(np.int64)
    if not np.array_equal(q, arr) or q.min() < 0 or q.max() >= n_levels:
        raise ValueError("gray levels must be integers in [0, %d)" % n_levels)
    tally = np.zeros((n_levels, n_levels), dtype=np.float64)
    np.add.at(tally, (q[:, :-1].reshape(-1), q[:, 1:].reshape(-1)), 1.0)
    return tally / tally.sum()


def region_bounds(extent: int, parts: int):
    """Floor-division split points; the last region absorbs remainder pixels."""
    step = extent // parts
    if step < 1:
        raise ShapeError("cannot split extent %d into %d regions" % (extent, parts))
    return [(i * step, (i + 1) * step if i < parts - 1 else extent) for i in range(parts)]


def ptfem_forward(a: Tensor, params: PtfemParams,
                  n_levels: int = DEFAULT_LEVELS_2D) -> Tensor:
    """All pyramid branches over a [C x H x W] map, concatenated channel-wise.

    Every region is summarized with region-local statistics, and each branch
    output is constant within its own region partition.
    """
    _, h, w = a.shape
    max_scale = max(params.scales)
    if h < 2 * max_scale or w < 2 * max_scale:
        raise ShapeError("map %dx%d too small for scale %d regions (need >= %d)"
                         % (h, w, max_scale, 2 * max_scale))
    branch_maps = []
    for scale, branch in zip(params.scales, params.branches):
        row_bands = []
        for r0, r1 in region_bounds(h, scale):
            cells = []
            for c0, c1 in region_bounds(w, scale):
                region = a.slice_axis(1, r0, r1).slice_axis(2, c0, c1)
                t = texture_unit(region, n_levels, branch)
                cells.append(t.reshape(t.size, 1, 1).broadcast_to((t.size, r1 - r0, c1 - c0)))
            row_bands.append(concat(cells, axis=2))
        branch_maps.append(concat(row_bands, axis=1))
    return concat(branch_maps, axis=0)
