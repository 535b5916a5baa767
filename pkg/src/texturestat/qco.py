"""Quantization and counting operators, 1-d and 2-d.

The 1-d form soft-assigns each pixel's cosine similarity (against the global
average feature) to N quantization levels and counts level occupancy; the
2-d form counts co-occupancy of horizontally adjacent pixel pairs.  Both
attach the broadcast average feature to the lifted counting map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Mlp, ShapeError, Tensor, apply_mlp, concat,
                     global_avg_pool, matmul, max_all, min_all)

DEFAULT_LEVELS_1D = 128
DEFAULT_LEVELS_2D = 8

EPS_NORM = 1e-12    # cosine denominator guard
EPS_COUNT = 1e-12   # counting denominator guard
DEGENERATE_RANGE = 1e-6


@dataclass
class QuantOutput1D:
    levels: Tensor      # [N]
    encoding: Tensor    # [N x HW], entries in [0, 1]
    counting: Tensor    # [N x 2]: level value, normalized count
    statfeat: Tensor    # [C1 x N]


@dataclass
class QuantOutput2D:
    levels: Tensor        # [N]
    pair_levels: Tensor   # [2 x N x N]
    cooc_encoding: Tensor  # [N x N x H x (W-1)]
    counting: Tensor      # [N x N x 3]: level pair, normalized count
    statfeat: Tensor      # [C' x N x N]


def similarity_map(a: Tensor, g: Tensor) -> Tensor:
    """Cosine similarity of every pixel feature against g, flattened to [HW]."""
    if a.ndim != 3:
        raise ShapeError("similarity_map expects [C,H,W], got %s" % (a.shape,))
    c, h, w = a.shape
    if g.ndim != 1 or g.shape[0] != c:
        raise ShapeError("channel dims disagree: map %s vs mean %s" % (a.shape, g.shape))
    flat = a.reshape(c, h * w)
    dots = matmul(g.reshape(1, c), flat).reshape(h * w)
    pix_norm = (flat * flat).sum(axis=0).sqrt()
    g_norm = (g * g).sum().sqrt()
    return dots / (g_norm * pix_norm + EPS_NORM)


def quantization_levels(s: Tensor, n_levels: int) -> Tensor:
    """N levels equally spaced over (min(S), max(S)]; n-th level = min + range*n/N.

    A span below DEGENERATE_RANGE is widened to DEGENERATE_RANGE around the
    midpoint so the soft encoding stays defined and differentiable.
    """
    if s.ndim != 1 or s.size < 1:
        raise ShapeError("similarity input must be a nonempty vector, got %s" % (s.shape,))
    if n_levels < 2:
        raise ValueError("need at least 2 quantization levels, got %d" % n_levels)
    mx = max_all(s)
    mn = min_all(s)
    steps = np.arange(1, n_levels + 1, dtype=np.float64) / n_levels
    if float(mx.data - mn.data) < DEGENERATE_RANGE:
        mid = (mx + mn) * 0.5
        offsets = DEGENERATE_RANGE * (steps - 0.5)
        return mid.reshape(1).broadcast_to((n_levels,)) + offsets
    span = mx - mn
    return span.reshape(1).broadcast_to((n_levels,)) * steps + mn.reshape(1).broadcast_to((n_levels,))


def quantize_encode(s: Tensor, levels: Tensor) -> Tensor:
    """Soft windowed assignment E [N x HW]: 1-|L_n - S_i| inside the +/-0.5/N window.

    The window half-width is fixed at 0.5/N in similarity units, independent
    of the actual level spacing; values falling between windows yield all-zero
    columns by design.
    """
    n = levels.size
    d = levels.reshape(n, 1) - s.reshape(1, s.size)
    half = 0.5 / n
    window = ((d.data >= -half) & (d.data < half)).astype(np.float64)
    return (1.0 - d.abs()) * window


def count_1d(encoding: Tensor, levels: Tensor) -> Tensor:
    """Counting map [N x 2]: level value and occupancy normalized to unit sum."""
    n = levels.size
    if encoding.ndim != 2 or encoding.shape[0] != n:
        raise ShapeError("encoding %s does not match %d levels" % (encoding.shape, n))
    per_level = encoding.sum(axis=1)
    total = encoding.sum()
    norm = per_level / (total + EPS_COUNT)
    return concat([levels.reshape(n, 1), norm.reshape(n, 1)], axis=1)


def encode_average_1d(counting: Tensor, g: Tensor, mlp: Mlp, leak: float = 0.01) -> Tensor:
    """Lift the counting map with the MLP and append g repeated over level slots."""
    if counting.ndim != 2 or counting.shape[1] != 2:
        raise ShapeError("counting map must be [N x 2], got %s" % (counting.shape,))
    if mlp.l1.in_dim != 2:
        raise ShapeError("1-d counting MLP must take 2 inputs, has %d" % mlp.l1.in_dim)
    n = counting.shape[0]
    lifted = apply_mlp(counting, mlp.l1, mlp.l2, leak)   # [N x out]
    g_up = g.reshape(g.size, 1).broadcast_to((g.size, n))
    return concat([lifted.T, g_up], axis=0)


def qco1d(a: Tensor, n_levels: int = DEFAULT_LEVELS_1D, mlp: Mlp = None) -> QuantOutput1D:
    """Full 1-d pass: pool, similarity, levels, soft encoding, counting, statistics."""
    g = global_avg_pool(a)
    s = similarity_map(a, g)
    levels = quantization_levels(s, n_levels)
    encoding = quantize_encode(s, levels)
    counting = count_1d(encoding, levels)
    statfeat = encode_average_1d(counting, g, mlp)
    return QuantOutput1D(levels, encoding, counting, statfeat)


def cooccurrence_encode(encoding: Tensor) -> Tensor:
    """Pairwise products of each pixel's encoding with its right neighbor's.

    Input is the soft encoding reshaped to [N x H x W]; output cell
    (m, n, i, j) is E[m,i,j] * E[n,i,j+1] for j in [0, W-2].
    """
    if encoding.ndim != 3:
        raise ShapeError("co-occurrence input must be [N,H,W], got %s" % (encoding.shape,))
    n, h, w = encoding.shape
    if w < 2:
        raise ShapeError("width %d leaves no adjacent pixel pairs" % w)
    left = encoding.slice_axis(2, 0, w - 1).reshape(n, 1, h, w - 1)
    right = encoding.slice_axis(2, 1, w).reshape(1, n, h, w - 1)
    return left * right


def pair_levels(levels: Tensor) -> Tensor:
    """All ordered level pairs as a [2 x N x N] stack: (L_m, L_n) at (m, n)."""
    n = levels.size
    lm = levels.reshape(n, 1).broadcast_to((n, n)).reshape(1, n, n)
    ln = levels.reshape(1, n).broadcast_to((n, n)).reshape(1, n, n)
    return concat([lm, ln], axis=0)


def count_2d(cooc: Tensor, levels: Tensor) -> Tensor:
    """Co-occupancy map [N x N x 3]: (L_m, L_n, normalized pair count)."""
    n = levels.size
    if cooc.ndim != 4 or cooc.shape[0] != n or cooc.shape[1] != n:
        raise ShapeError("co-occurrence %s does not match %d levels" % (cooc.shape, n))
    per_pair = cooc.sum(axis=(2, 3))
    total = cooc.sum()
    norm = per_pair / (total + EPS_COUNT)
    lm = levels.reshape(n, 1).broadcast_to((n, n))
    ln = levels.reshape(1, n).broadcast_to((n, n))
    return concat([lm.reshape(n, n, 1), ln.reshape(n, n, 1), norm.reshape(n, n, 1)], axis=2)


def encode_average_2d(counting: Tensor, g: Tensor, mlp: Mlp, leak: float = 0.01) -> Tensor:
    """Lift each (L_m, L_n, count) cell with the MLP and append g per cell."""
    if counting.ndim != 3 or counting.shape[2] != 3:
        raise ShapeError("counting map must be [N x N x 3], got %s" % (counting.shape,))
    if mlp.l1.in_dim != 3:
        raise ShapeError("2-d counting MLP must take 3 inputs, has %d" % mlp.l1.in_dim)
    n = counting.shape[0]
    cells = counting.reshape(n * n, 3)
    lifted = apply_mlp(cells, mlp.l1, mlp.l2, leak)      # [N^2 x out]
    lifted = lifted.T.reshape(lifted.shape[1], n, n)
    g_up = g.reshape(g.size, 1, 1).broadcast_to((g.size, n, n))
    return concat([lifted, g_up], axis=0)


def qco2d(a: Tensor, n_levels: int = DEFAULT_LEVELS_2D, mlp: Mlp = None) -> QuantOutput2D:
    """Full 2-d pass over one region: 1-d front end, then pairwise co-occupancy.

    The average feature and the level range are local to the region `a`.
    """
    c, h, w = a.shape
    g = global_avg_pool(a)
    s = similarity_map(a, g)
    levels = quantization_levels(s, n_levels)
    encoding = quantize_encode(s, levels).reshape(n_levels, h, w)
    cooc = cooccurrence_encode(encoding)
    counting = count_2d(cooc, levels)
    statfeat = encode_average_2d(counting, g, mlp)
    return QuantOutput2D(levels, pair_levels(levels), cooc, counting, statfeat)
