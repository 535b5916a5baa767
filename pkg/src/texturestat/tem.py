"""Texture enhancement: learned level reconstruction over a soft histogram.

A fully connected, softmax-normalized graph over quantization levels
generalizes classical histogram equalization: each reconstructed level blends
projected statistics of all original levels, and pixels receive the
reconstructed level features through their soft quantization encoding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qco import qco1d
from .tensor import (LinearLayer, Mlp, ShapeError, Tensor, apply_linear_cols,
                     init_linear, init_mlp, matmul, softmax_axis)


@dataclass
class TemParams:
    phi1: LinearLayer   # graph key projection over statfeat channels
    phi2: LinearLayer   # graph query projection, same output width as phi1
    phi3: LinearLayer   # level feature projection to the module's output channels
    qco_mlp: Mlp

    def __post_init__(self):
        if self.phi1.out_dim != self.phi2.out_dim:
            raise ShapeError("graph projections disagree: %d vs %d"
                             % (self.phi1.out_dim, self.phi2.out_dim))


def init_tem_params(rng: np.random.Generator, in_channels: int,
                    mlp_hidden: int = 32, mlp_out: int = 64,
                    proj_dim: int = 16, out_channels: int = 16) -> TemParams:
    stat_channels = mlp_out + in_channels
    return TemParams(
        phi1=init_linear(rng, stat_channels, proj_dim),
        phi2=init_linear(rng, stat_channels, proj_dim),
        phi3=init_linear(rng, stat_channels, out_channels),
        qco_mlp=init_mlp(rng, 2, mlp_hidden, mlp_out),
    )


def reference_hist_equalize(counts, n_levels: int) -> np.ndarray:
    """Classical level remap: (N-1) * cumulative count / total count.

    Plain-numpy oracle and demo path; it takes no part in the learned graph.
    """
    f = np.asarray(counts.data if isinstance(counts, Tensor) else counts, dtype=np.float64)
    if f.ndim != 1:
        raise ShapeError("histogram counts must be a vector, got %s" % (f.shape,))
    if (f < 0).any():
        raise ValueError("histogram counts must be nonnegative")
    total = f.sum()
    if total == 0:
        raise ValueError("cannot equalize an all-zero histogram")
    return (n_levels - 1) * np.cumsum(f) / total


def build_level_graph(d: Tensor, params: TemParams) -> Tensor:
    """Learned level adjacency [N x N]; each column is a distribution over levels."""
    keys = apply_linear_cols(params.phi1, d)
    queries = apply_linear_cols(params.phi2, d)
    return softmax_axis(matmul(keys.T, queries), axis=0)


def reconstruct_levels(d: Tensor, x: Tensor, params: TemParams) -> Tensor:
    """Blend projected level statistics through the graph: phi3(D) @ X."""
    return matmul(apply_linear_cols(params.phi3, d), x)


def reassign(l_prime: Tensor, encoding: Tensor, h: int, w: int) -> Tensor:
    """Give each pixel its soft mixture of reconstructed level features."""
    if encoding.ndim != 2 or l_prime.ndim != 2 or l_prime.shape[1] != encoding.shape[0]:
        raise ShapeError("cannot reassign %s through encoding %s"
                         % (l_prime.shape, encoding.shape))
    if encoding.shape[1] != h * w:
        raise ShapeError("encoding covers %d pixels, target is %dx%d"
                         % (encoding.shape[1], h, w))
    return matmul(l_prime, encoding).reshape(l_prime.shape[0], h, w)


def tem_forward(a: Tensor, n_levels: int, params: TemParams,
                use_graph: bool = True) -> Tensor:
    """Enhance a [C x H x W] map; output has phi3's output channel count.

    With use_graph=False the level graph is bypassed and pixels receive
    phi3(D) columns directly (the ablation configuration).
    """
    _, h, w = a.shape
    q = qco1d(a, n_levels, params.qco_mlp)
    if use_graph:
        graph = build_level_graph(q.statfeat, params)
        feat = reconstruct_levels(q.statfeat, graph, params)
    else:
        feat = apply_linear_cols(params.phi3, q.statfeat)
    return reassign(feat, q.encoding, h, w)
