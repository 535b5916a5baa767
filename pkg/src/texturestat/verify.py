"""Finite-difference verification of the composite operators.

Check points are drawn by seeded rejection sampling so every point is
"interior": similarity values keep a safe margin from quantization-window
boundaries and the window-center kink, the extreme pixels are unique, and for
the mined loss no true-class probability sits near the threshold or the
keep-count cutoff.  Under those margins the hand-derived gradients must agree
with central differences.
"""
from __future__ import annotations

import numpy as np

from .ptfem import init_ptfem_params, ptfem_forward, region_bounds
from .qco import qco1d, qco2d
from .stlnet import TrainConfig, total_loss
from .tem import init_tem_params, tem_forward
from .tensor import Tensor, check_gradient, init_mlp

THRESHOLDS = {
    "qco1d": 1e-4,
    "qco2d": 1e-4,
    "tem_forward": 1e-4,
    "ptfem_forward": 1e-4,
    "total_loss": 1e-3,
}


def qco_interior_margin(a_data: np.ndarray, n_levels: int,
                        edge_margin=None, center_margin=1e-3) -> float:
    """Smallest safety margin of one map wrt the quantizer's non-smooth points.

    Returns a negative number when the point must be rejected: near-zero pixel
    vectors, a collapsed similarity span, tied extremes, or any level-to-pixel
    distance close to a window edge or the window center.  The arg-max pixel
    sits exactly on the top level by construction; that distance is
    identically zero under perturbation, so structural zeros are excluded
    from the center-kink check.
    """
    if edge_margin is None:
        edge_margin = 0.1 / n_levels
    c = a_data.shape[0]
    flat = a_data.reshape(c, -1)
    g = flat.mean(axis=1)
    norms = np.sqrt((flat * flat).sum(axis=0))
    g_norm = np.sqrt((g * g).sum())
    if norms.min() < 0.2 or g_norm < 0.2:
        return -1.0
    s = (g @ flat) / (g_norm * norms + 1e-12)
    span = s.max() - s.min()
    if span < 0.05:
        return -1.0
    s_sorted = np.sort(s)
    tie_gap = min(s_sorted[1] - s_sorted[0], s_sorted[-1] - s_sorted[-2])
    if tie_gap < 1e-3:
        return -1.0
    levels = span / n_levels * np.arange(1, n_levels + 1) + s.min()
    d = np.abs(levels[:, None] - s[None, :])
    half = 0.5 / n_levels
    edge_dist = np.minimum(np.abs(d - half), np.abs(d + half)).min()
    nonstructural = d[d > 1e-9]
    center_dist = nonstructural.min() if nonstructural.size else np.inf
    if edge_dist < edge_margin or center_dist < center_margin:
        return -1.0
    return float(min(edge_dist, center_dist, tie_gap))


def _regional_margin(a_data, n_levels, scales) -> float:
    """Interior margin over every pyramid region of the map."""
    worst = np.inf
    _, h, w = a_data.shape
    for s in scales:
        for r0, r1 in region_bounds(h, s):
            for c0, c1 in region_bounds(w, s):
                m = qco_interior_margin(a_data[:, r0:r1, c0:c1], n_levels)
                if m < 0:
                    return -1.0
                worst = min(worst, m)
    return worst


def _sample_map(rng, shape):
    # a per-channel offset keeps pixel vectors and the mean away from zero
    bias = rng.normal(0.0, 1.0, (shape[0], 1, 1))
    bias *= 1.5 / max(np.sqrt((bias * bias).sum()), 1e-6)
    return rng.normal(0.0, 1.0, shape) + bias


# numpy mirrors of the counting maps, used only to locate leaky-relu kinks


def _np_front_end(a, n_levels):
    flat = a.reshape(a.shape[0], -1)
    g = flat.mean(axis=1)
    s = (g @ flat) / (np.sqrt((g * g).sum()) * np.sqrt((flat * flat).sum(axis=0)) + 1e-12)
    span = s.max() - s.min()
    levels = span / n_levels * np.arange(1, n_levels + 1) + s.min()
    d = levels[:, None] - s[None, :]
    half = 0.5 / n_levels
    e = np.where((d >= -half) & (d < half), 1.0 - np.abs(d), 0.0)
    return g, s, levels, e


def _np_counting_1d(a, n_levels):
    _, _, levels, e = _np_front_end(a, n_levels)
    per = e.sum(axis=1)
    return np.stack([levels, per / (e.sum() + 1e-12)], axis=1)


def _np_counting_2d(a, n_levels):
    g, _, levels, e = _np_front_end(a, n_levels)
    _, h, w = a.shape
    e = e.reshape(n_levels, h, w)
    cooc = e[:, None, :, :-1] * e[None, :, :, 1:]
    per = cooc.sum(axis=(2, 3))
    norm = per / (cooc.sum() + 1e-12)
    n = n_levels
    cells = np.stack([np.repeat(levels, n), np.tile(levels, n), norm.reshape(-1)], axis=1)
    return g, cells


def _preact_margin(x2d, mlp) -> float:
    """Distance of the first-layer preactivations from the rectifier kink."""
    h = x2d @ mlp.l1.weight.data.T + mlp.l1.bias.data
    return float(np.abs(h).min())


_KINK_MARGIN = 5e-3

# Inputs get a small step (they steer the quantization masks, which interior
# margins protect); parameters get a larger one so that coordinates with
# structurally zero gradients (e.g. graph-key bias shifts that column-softmax
# cancels) stay below the relative-error floor instead of measuring float
# roundoff of the difference quotient.
EPS_INPUT = 1e-5
EPS_PARAM = 3e-4


def _retry_params(draw, good, tries=60):
    """Redraw parameters against a fixed map until margins clear."""
    for _ in range(tries):
        params = draw()
        if good(params):
            return params
    return False


def _find_map(seed, tag, shape, n_levels, accept=None, max_tries=20000):
    """Seeded rejection sampling; `accept(a, rng)` may add op-specific margins."""
    for trial in range(max_tries):
        rng = np.random.default_rng((seed, tag, trial))
        a = _sample_map(rng, shape)
        if qco_interior_margin(a, n_levels) <= 0:
            continue
        result = accept(a, rng) if accept else True
        if result is not None and result is not False:
            return a, result
    raise RuntimeError("no interior point found for tag %r" % tag)


def _mlp_tensors(mlp):
    return [mlp.l1.weight, mlp.l1.bias, mlp.l2.weight, mlp.l2.bias]


def _worst_over_targets(build_scalar, input_targets, param_targets):
    worst = 0.0
    for t in input_targets:
        worst = max(worst, check_gradient(lambda _x: build_scalar(), t, EPS_INPUT))
    for t in param_targets:
        worst = max(worst, check_gradient(lambda _x: build_scalar(), t, EPS_PARAM))
    return worst


def _check_qco1d(points, seed, eps=None):
    def accept(a, rng):
        counting = _np_counting_1d(a, 3)
        return _retry_params(lambda: init_mlp(rng, 2, 3, 4),
                             lambda m: _preact_margin(counting, m) >= _KINK_MARGIN)

    worst = 0.0
    for k in range(points):
        a, mlp = _find_map(seed, 10 + k, (2, 4, 4), 3, accept)
        x = Tensor(a)
        worst = max(worst, _worst_over_targets(
            lambda: qco1d(x, 3, mlp).statfeat.mean(), [x], _mlp_tensors(mlp)))
    return worst


def _check_qco2d(points, seed, eps=None):
    def accept(a, rng):
        _, cells = _np_counting_2d(a, 3)
        return _retry_params(lambda: init_mlp(rng, 3, 3, 4),
                             lambda m: _preact_margin(cells, m) >= _KINK_MARGIN)

    worst = 0.0
    for k in range(points):
        a, mlp = _find_map(seed, 200 + k, (2, 4, 4), 3, accept)
        x = Tensor(a)
        worst = max(worst, _worst_over_targets(
            lambda: qco2d(x, 3, mlp).statfeat.mean(), [x], _mlp_tensors(mlp)))
    return worst


def _check_tem(points, seed, eps=None):
    def accept(a, rng):
        counting = _np_counting_1d(a, 3)
        return _retry_params(
            lambda: init_tem_params(rng, 2, mlp_hidden=3, mlp_out=4,
                                    proj_dim=2, out_channels=3),
            lambda p: _preact_margin(counting, p.qco_mlp) >= _KINK_MARGIN)

    worst = 0.0
    for k in range(points):
        a, params = _find_map(seed, 400 + k, (2, 4, 4), 3, accept)
        x = Tensor(a)
        param_targets = [params.phi1.weight, params.phi1.bias, params.phi2.weight,
                         params.phi2.bias, params.phi3.weight, params.phi3.bias]
        param_targets += _mlp_tensors(params.qco_mlp)
        worst = max(worst, _worst_over_targets(
            lambda: tem_forward(x, 3, params).mean(), [x], param_targets))
    return worst


def _np_statfeat_cells(a, n_levels, qco_mlp, leak=0.01):
    g, cells = _np_counting_2d(a, n_levels)
    h = cells @ qco_mlp.l1.weight.data.T + qco_mlp.l1.bias.data
    h = np.where(h >= 0, h, leak * h)
    lifted = h @ qco_mlp.l2.weight.data.T + qco_mlp.l2.bias.data
    return np.concatenate([lifted, np.tile(g, (cells.shape[0], 1))], axis=1)


def _check_ptfem(points, seed, eps=None):
    scales = (1, 2)

    def accept(a, rng):
        if _regional_margin(a, 3, scales) <= 0:
            return False
        _, h, w = a.shape
        regions_per_scale = [
            [a[:, r0:r1, c0:c1]
             for r0, r1 in region_bounds(h, s) for c0, c1 in region_bounds(w, s)]
            for s in scales
        ]

        def clear(params):
            for regions, branch in zip(regions_per_scale, params.branches):
                for region in regions:
                    _, cells = _np_counting_2d(region, 3)
                    if _preact_margin(cells, branch.qco_mlp) < _KINK_MARGIN:
                        return False
                    stat = _np_statfeat_cells(region, 3, branch.qco_mlp)
                    if _preact_margin(stat, branch.descriptor) < _KINK_MARGIN:
                        return False
            return True

        return _retry_params(
            lambda: init_ptfem_params(rng, 2, scales=scales, qco_hidden=3,
                                      qco_out=4, desc_hidden=3, desc_out=3),
            clear)

    worst = 0.0
    for k in range(points):
        a, params = _find_map(seed, 600 + k, (2, 4, 4), 3, accept)
        x = Tensor(a)
        param_targets = []
        for branch in params.branches:
            param_targets += _mlp_tensors(branch.qco_mlp) + _mlp_tensors(branch.descriptor)
        worst = max(worst, _worst_over_targets(
            lambda: ptfem_forward(x, params, 3).mean(), [x], param_targets))
    return worst


def _loss_point_ok(z, labels, theta, min_keep):
    valid = labels.reshape(-1) != 255
    rows = z.reshape(z.shape[0], -1).T
    e = np.exp(rows - rows.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    lab = np.where(valid, labels.reshape(-1), 0)
    p_true = probs[np.arange(lab.size), lab][valid]
    if np.abs(p_true - theta).min() < 0.02:
        return False
    keep_floor = min(min_keep, p_true.size)
    if (p_true < theta).sum() < keep_floor and keep_floor < p_true.size:
        srt = np.sort(p_true)
        if srt[keep_floor] - srt[keep_floor - 1] < 1e-4:
            return False
    return True


def _check_total_loss(points, seed, eps=None):
    cfg = TrainConfig(ohem_theta=0.7, ohem_min_keep=10)
    worst = 0.0
    found = 0
    trial = 0
    while found < points:
        trial += 1
        if trial > 20000:
            raise RuntimeError("no interior loss point found")
        rng = np.random.default_rng((seed, 800, trial))
        z = rng.normal(0.0, 2.0, (3, 8, 8))
        za = rng.normal(0.0, 2.0, (3, 8, 8))
        labels = rng.integers(0, 3, (8, 8)).astype(np.int64)
        labels[rng.integers(0, 8, 3), rng.integers(0, 8, 3)] = 255
        if not _loss_point_ok(z, labels, cfg.ohem_theta, cfg.ohem_min_keep):
            continue
        found += 1
        final = Tensor(z)
        aux = Tensor(za)
        worst = max(worst, _worst_over_targets(
            lambda: total_loss(final, aux, labels, cfg), [final, aux], []))
    return worst


def run_gradient_suite(points: int = 20, seed: int = 0, eps: float = 1e-5):
    """Max finite-difference relative error per composite; keys match THRESHOLDS."""
    return {
        "qco1d": _check_qco1d(points, seed, eps),
        "qco2d": _check_qco2d(points, seed, eps),
        "tem_forward": _check_tem(points, seed, eps),
        "ptfem_forward": _check_ptfem(points, seed, eps),
        "total_loss": _check_total_loss(points, seed, eps),
    }
