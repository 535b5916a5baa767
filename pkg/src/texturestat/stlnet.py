"""Desk-scale segmentation network around the texture branch.

A four-stage toy convolutional backbone (output stride 8) replaces the full
pretrained pipeline; the texture branch applies the enhancement module and the
pyramid extractor serially on pooled shallow features.  Training is plain SGD
with a polynomial learning-rate schedule, hard-pixel mining on the final head,
and mean cross entropy on the auxiliary head.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ptfem import PtfemParams, init_ptfem_params, ptfem_forward
from .tem import TemParams, init_tem_params, tem_forward
from .tensor import (LinearLayer, Mlp, ShapeError, Tensor, avg_pool2d, concat,
                     conv2d, leaky_relu, load_tsr, nearest_upsample, save_tsr)

IGNORE_LABEL = 255

# desk-scale channel widths
BACKBONE_CHANNELS = (8, 16, 32, 32)
CONTEXT_CHANNELS = 32
TEM_PROJ_DIM = 16
TEM_OUT_CHANNELS = 16
LEAK = 0.01


@dataclass
class ConvLayer:
    weight: Tensor  # [out, in, kh, kw]
    bias: Tensor    # [out]
    stride: int = 1
    padding: int = 0
    dilation: int = 1


def init_conv(rng, in_ch, out_ch, k=3, stride=1, padding=1, dilation=1) -> ConvLayer:
    # bound uses input channels, not fan-in: with 3x3 kernels this keeps the
    # per-stage signal gain near 1, which the normalization-free stack needs
    bound = 1.0 / np.sqrt(in_ch)
    return ConvLayer(Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, k, k))),
                     Tensor(rng.uniform(-bound, bound, out_ch)),
                     stride=stride, padding=padding, dilation=dilation)


def _conv(x, layer: ConvLayer) -> Tensor:
    return conv2d(x, layer.weight, layer.bias, stride=layer.stride,
                  padding=layer.padding, dilation=layer.dilation)


@dataclass
class Flags:
    use_slf: bool = True
    use_tem: bool = True
    use_ptfem: bool = True
    use_graph: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 0.02
    lr_power: float = 0.9
    iters: int = 300
    batch: int = 4
    n_levels_1d: int = 16
    n_levels_2d: int = 8
    alpha: float = 0.4
    ohem_theta: float = 0.7
    ohem_min_keep: int = 64
    scales: tuple = (1, 2)
    flags: Flags = field(default_factory=Flags)
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not 0.0 < self.ohem_theta < 1.0:
            raise ValueError("ohem_theta must lie in (0, 1)")
        if self.ohem_min_keep < 1:
            raise ValueError("ohem_min_keep must be at least 1")
        self.scales = tuple(int(s) for s in self.scales)
        if isinstance(self.flags, dict):
            self.flags = Flags(**self.flags)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError("unknown config fields: %s" % sorted(unknown))
        return cls(**d)


@dataclass
class StlnetParams:
    backbone: list            # 4 ConvLayers, output stride 8 after stage 3
    context_head: ConvLayer
    tem: TemParams
    ptfem: PtfemParams
    fuse_head: ConvLayer      # 1x1 projection to class logits
    aux_head: ConvLayer       # 1x1 projection from stage-3 features
    num_classes: int
    n_levels_1d: int
    n_levels_2d: int


def init_stlnet_params(rng, num_classes: int, cfg: TrainConfig) -> StlnetParams:
    c1, c2, c3, c4 = BACKBONE_CHANNELS
    backbone = [
        init_conv(rng, 3, c1, stride=2),
        init_conv(rng, c1, c2, stride=2),
        init_conv(rng, c2, c3, stride=2),
        # stage 4 trades its stride for dilation so the output stride stays 8
        init_conv(rng, c3, c4, stride=1, padding=2, dilation=2),
    ]
    context_head = init_conv(rng, c4, CONTEXT_CHANNELS, padding=2, dilation=2)
    slf_ch = c1 + c2
    tem = init_tem_params(rng, slf_ch, proj_dim=TEM_PROJ_DIM, out_channels=TEM_OUT_CHANNELS)
    ptfem_in = TEM_OUT_CHANNELS if cfg.flags.use_tem else slf_ch
    ptfem = init_ptfem_params(rng, ptfem_in, scales=cfg.scales)
    fuse_in = CONTEXT_CHANNELS
    if cfg.flags.use_tem:
        fuse_in += TEM_OUT_CHANNELS
    if cfg.flags.use_ptfem:
        fuse_in += len(cfg.scales) * 16
    if cfg.flags.use_slf:
        fuse_in += slf_ch
    fuse_head = init_conv(rng, fuse_in, num_classes, k=1, padding=0)
    aux_head = init_conv(rng, c3, num_classes, k=1, padding=0)
    return StlnetParams(backbone, context_head, tem, ptfem, fuse_head, aux_head,
                        num_classes, cfg.n_levels_1d, cfg.n_levels_2d)


def backbone_forward(img: Tensor, params: StlnetParams):
    """Returns (slf, stage3, context); slf and context live at output stride 8."""
    _, h, w = img.shape
    if h % 8 or w % 8:
        raise ShapeError("input %dx%d must be divisible by 8" % (h, w))
    x1 = leaky_relu(_conv(img, params.backbone[0]), LEAK)   # /2
    x2 = leaky_relu(_conv(x1, params.backbone[1]), LEAK)    # /4
    x3 = leaky_relu(_conv(x2, params.backbone[2]), LEAK)    # /8
    x4 = leaky_relu(_conv(x3, params.backbone[3]), LEAK)    # /8, dilated
    ctx = leaky_relu(_conv(x4, params.context_head), LEAK)
    slf = concat([avg_pool2d(x1, 4), avg_pool2d(x2, 2)], axis=0)
    return slf, x3, ctx


def stlnet_forward(img: Tensor, params: StlnetParams, flags: Flags):
    """Full forward pass; returns (logits, aux_logits) at input resolution."""
    _, h, w = img.shape
    slf, stage3, ctx = backbone_forward(img, params)
    parts = [ctx]
    texture_in = slf
    if flags.use_tem:
        tem_out = tem_forward(slf, params.n_levels_1d, params.tem, use_graph=flags.use_graph)
        parts.append(tem_out)
        texture_in = tem_out
    if flags.use_ptfem:
        parts.append(ptfem_forward(texture_in, params.ptfem, params.n_levels_2d))
    if flags.use_slf:
        parts.append(slf)
    fused = concat(parts, axis=0) if len(parts) > 1 else parts[0]
    logits = nearest_upsample(_conv(fused, params.fuse_head), h, w)
    aux = nearest_upsample(_conv(stage3, params.aux_head), h, w)
    return logits, aux


# ---- losses -------------------------------------------------------------------------


def _flatten_logits(logits: Tensor, labels):
    k = logits.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise ShapeError("labels %s do not match logits %s" % (labels.shape, logits.shape))
    flat_labels = labels.reshape(-1).astype(np.int64)
    bad = (flat_labels != IGNORE_LABEL) & ((flat_labels < 0) | (flat_labels >= k))
    if bad.any():
        raise ValueError("labels outside [0, %d) and not ignore" % k)
    return logits.reshape(k, flat_labels.size).T, flat_labels


def _per_pixel_ce(flat: Tensor, flat_labels):
    """Cross entropy per pixel plus the numeric true-class probabilities."""
    z = flat.data
    valid = flat_labels != IGNORE_LABEL
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    safe_labels = np.where(valid, flat_labels, 0)
    p_true = probs[np.arange(z.shape[0]), safe_labels]
    onehot = np.zeros_like(z)
    onehot[np.arange(z.shape[0])[valid], flat_labels[valid]] = 1.0
    lse = ((flat - zmax).exp().sum(axis=1)).log() + zmax[:, 0]
    true_logit = (flat * onehot).sum(axis=1)
    return lse - true_logit, p_true, valid


def ohem_loss(logits: Tensor, labels, theta: float = 0.7, min_keep: int = 64) -> Tensor:
    """Mean cross entropy over hard pixels (true-class probability below theta).

    At least min(min_keep, #valid) pixels are kept, padding the hard set with
    the lowest-probability pixels; ignore-labeled pixels never participate.
    """
    flat, flat_labels = _flatten_logits(logits, labels)
    ce, p_true, valid = _per_pixel_ce(flat, flat_labels)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels for hard-example loss")
    keep_floor = min(min_keep, n_valid)
    hard = valid & (p_true < theta)
    if int(hard.sum()) >= keep_floor:
        kept = hard
    else:
        order = np.argsort(np.where(valid, p_true, np.inf), kind="stable")
        kept = np.zeros_like(valid)
        kept[order[:keep_floor]] = True
    mask = kept.astype(np.float64)
    return (ce * mask).sum() / mask.sum()


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Plain mean cross entropy over non-ignored pixels."""
    flat, flat_labels = _flatten_logits(logits, labels)
    ce, _, valid = _per_pixel_ce(flat, flat_labels)
    if not valid.any():
        raise ValueError("no valid pixels for cross entropy")
    mask = valid.astype(np.float64)
    return (ce * mask).sum() / mask.sum()


def total_loss(final_logits: Tensor, aux_logits: Tensor, labels, cfg: TrainConfig) -> Tensor:
    """Hard-mined final loss plus alpha-weighted auxiliary cross entropy."""
    lf = ohem_loss(final_logits, labels, cfg.ohem_theta, cfg.ohem_min_keep)
    la = cross_entropy_mean(aux_logits, labels)
    return lf + cfg.alpha * la


# ---- parameters as named tensors -------------------------------------------------------


def named_parameters(obj, prefix=""):
    """Depth-first (field order) walk yielding (name, Tensor) pairs."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            yield from named_parameters(child, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_parameters(child, f"{prefix}.{i}")


def zero_grads(params):
    for _, p in named_parameters(params):
        p.grad = None


# ---- training and evaluation -------------------------------------------------------------


def poly_lr(base: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    return base * (1.0 - iteration / max_iter) ** power


def predict(img, params: StlnetParams, flags: Flags):
    logits, _ = stlnet_forward(img if isinstance(img, Tensor) else Tensor(img), params, flags)
    return np.argmax(logits.data, axis=0)


def evaluate_miou(params: StlnetParams, dataset, flags: Flags):
    """Confusion-matrix IoU per class and the mean over classes present in GT."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    k = params.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    for sample in dataset:
        pred = predict(sample.image, params, flags)
        gt = np.asarray(sample.labels)
        valid = gt != IGNORE_LABEL
        idx = gt[valid].astype(np.int64) * k + pred[valid].astype(np.int64)
        conf += np.bincount(idx, minlength=k * k).reshape(k, k)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    present = conf.sum(axis=1) > 0
    iou = np.full(k, np.nan)
    nz = present & (denom > 0)
    iou[nz] = tp[nz] / denom[nz]
    miou = float(np.mean(iou[present]))
    return iou, miou


METRICS_HEADER = "iter,lr,loss,val_miou"


def train(train_set, cfg: TrainConfig, num_classes: int, val_set=None,
          out_dir=None, log=None):
    """Seeded SGD over the synthetic dataset; returns (params, metrics rows).

    Rows follow METRICS_HEADER; validation mIoU appears every iters//10
    iterations (and on the last), empty otherwise.  Batch gradients accumulate
    sample by sample in a fixed order, so runs are bitwise reproducible.
    """
    if not train_set:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    params = init_stlnet_params(rng, num_classes, cfg)
    shuffle_rng = np.random.default_rng((cfg.seed, 0x5e6))
    order = []
    eval_every = max(1, cfg.iters // 10)
    rows = []
    names = [n for n, _ in named_parameters(params)]
    velocity = {n: 0.0 for n in names} if cfg.momentum else None
    for it in range(cfg.iters):
        lr = poly_lr(cfg.lr, it, cfg.iters, cfg.lr_power)
        batch = []
        for _ in range(cfg.batch):
            if not order:
                order = list(shuffle_rng.permutation(len(train_set)))
            batch.append(train_set[order.pop()])
        zero_grads(params)
        loss_sum = 0.0
        for sample in batch:
            logits, aux = stlnet_forward(Tensor(sample.image), params, cfg.flags)
            loss = total_loss(logits, aux, sample.labels, cfg)
            value = loss.item()
            if not np.isfinite(value):
                _dump_diagnostics(out_dir, it, value, params)
                raise FloatingPointError("non-finite loss %r at iteration %d" % (value, it))
            loss.backward()
            loss_sum += value
        scale = 1.0 / cfg.batch
        for name, p in named_parameters(params):
            g = p.grad * scale if p.grad is not None else 0.0
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if velocity is not None:
                velocity[name] = cfg.momentum * velocity[name] + g
                g = velocity[name]
            p.data = p.data - lr * g
        miou_cell = ""
        if val_set and ((it + 1) % eval_every == 0 or it == cfg.iters - 1):
            _, miou = evaluate_miou(params, val_set, cfg.flags)
            miou_cell = repr(miou)
        row = "%d,%s,%s,%s" % (it, repr(lr), repr(loss_sum * scale), miou_cell)
        rows.append(row)
        if log:
            log(row)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(rows, os.path.join(out_dir, "metrics.csv"))
        save_checkpoint(params, cfg, os.path.join(out_dir, "checkpoint"))
    return params, rows


def write_metrics(rows, path):
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(row + "\n")


def _dump_diagnostics(out_dir, iteration, value, params):
    if not out_dir:
        return
    os.makedirs(out_dir, exist_ok=True)
    info = {
        "iteration": iteration,
        "loss": repr(value),
        "param_norms": {n: float(np.abs(p.data).max()) for n, p in named_parameters(params)},
    }
    with open(os.path.join(out_dir, "nan_diagnostics.json"), "w") as fh:
        json.dump(info, fh, indent=1)


# ---- checkpoints -----------------------------------------------------------------------


def save_checkpoint(params: StlnetParams, cfg: TrainConfig, ckpt_dir):
    os.makedirs(ckpt_dir, exist_ok=True)
    manifest = {"num_classes": params.num_classes, "config": cfg.to_dict(), "params": {}}
    for i, (name, p) in enumerate(named_parameters(params)):
        fname = "p%04d.tsr" % i
        save_tsr(p, os.path.join(ckpt_dir, fname))
        manifest["params"][name] = {"file": fname, "shape": list(p.shape)}
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(ckpt_dir):
    """Rebuild params from a checkpoint directory; returns (params, cfg)."""
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = TrainConfig.from_dict(manifest["config"])
    params = init_stlnet_params(np.random.default_rng(cfg.seed),
                                manifest["num_classes"], cfg)
    for name, p in named_parameters(params):
        entry = manifest["params"][name]
        loaded = load_tsr(os.path.join(ckpt_dir, entry["file"]))
        if list(loaded.shape) != entry["shape"] or loaded.shape != p.shape:
            raise ShapeError("checkpoint tensor %s has shape %s, expected %s"
                             % (name, loaded.shape, p.shape))
        p.data = loaded.data
    return params, cfg
