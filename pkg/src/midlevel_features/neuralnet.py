#!/usr/bin/env python3
"""
Toy-scale convolutional network in numpy (float64):
- layers with explicit forward/backward (conv, pooling, inception, dense)
- a mini-inception backbone with a tag head and a 150/30/7 mid-level head
- Adam, tag pretraining, two-stage fine-tuning, embedding transfer
- finite-difference gradient checking and a binary checkpoint format
"""
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.special
from numpy.lib.stride_tricks import sliding_window_view

from midlevel_features.dsp import MelPatch
from midlevel_features.errors import (
    ConstantInput,
    EmptyDataset,
    InvalidArgument,
    IoFailure,
    MissingCheckpoint,
    MissingHead,
    ShapeMismatch,
    StaleCache,
    TooFewItems,
    TooFewRows,
)
from midlevel_features.extractors import MIDLEVEL_NAMES
from midlevel_features.statmodels import (
    pca_apply,
    pca_fit,
    pearson,
    predict_kernel,
    roc_auc,
    tune_kernel_rbf,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MLFCKPT\x00"
CHECKPOINT_VERSION = 1
MIDLEVEL_HEAD_WIDTHS = (150, 30)
_BCE_CLIP = 1e-12


class Layer:
    """Base layer: forward(x) -> (y, cache); backward(cache, dy) -> (dx, grads)."""

    def __init__(self):
        self.params = {}

    def parameters(self, prefix=""):
        return {prefix + name: p for name, p in self.params.items()}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class Conv2D(Layer):
    """Square-kernel convolution, stride 1, same padding."""

    def __init__(self, in_channels, out_channels, kernel, rng):
        super().__init__()
        if kernel % 2 != 1:
            raise InvalidArgument("kernel size must be odd for same padding")
        self.kernel = kernel
        std = np.sqrt(2.0 / (in_channels * kernel * kernel))
        shape = (out_channels, in_channels, kernel, kernel)
        self.params["W"] = rng.normal(0.0, std, shape)
        self.params["b"] = np.zeros(out_channels)

    def forward(self, x):
        W = self.params["W"]
        if x.shape[1] != W.shape[1]:
            raise ShapeMismatch(f"conv expects {W.shape[1]} channels, got {x.shape[1]}")
        k, pad = self.kernel, self.kernel // 2
        B, C, H, Wd = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * Wd, C * k * k)
        y = cols @ W.reshape(W.shape[0], -1).T + self.params["b"]
        return y.reshape(B, H, Wd, -1).transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, cache, dy):
        shape, cols = cache
        B, C, H, Wd = shape
        W = self.params["W"]
        k, pad = self.kernel, self.kernel // 2
        dY = dy.transpose(0, 2, 3, 1).reshape(-1, W.shape[0])
        grads = {"W": (dY.T @ cols).reshape(W.shape), "b": dY.sum(axis=0)}
        dcols = (dY @ W.reshape(W.shape[0], -1)).reshape(B, H, Wd, C, k, k)
        dxp = np.zeros((B, C, H + 2 * pad, Wd + 2 * pad))
        for i in range(k):
            for j in range(k):
                patch = dcols[..., i, j].transpose(0, 3, 1, 2)
                dxp[:, :, i : i + H, j : j + Wd] += patch

        return dxp[:, :, pad : pad + H, pad : pad + Wd], grads


class MaxPool2(Layer):
    """2x2 max-pooling with stride 2; an odd trailing row/column is dropped."""

    def forward(self, x):
        B, C, H, W = x.shape
        if H < 2 or W < 2:
            raise ShapeMismatch(f"cannot pool a {H}x{W} map")
        H2, W2 = H // 2, W // 2
        blocks = x[:, :, : 2 * H2, : 2 * W2].reshape(B, C, H2, 2, W2, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
        idx = np.argmax(blocks, axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        shape, idx = cache
        B, C, H, W = shape
        H2, W2 = idx.shape[2:]
        dblocks = np.zeros((B, C, H2, W2, 4))
        np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
        dblocks = dblocks.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(shape)
        dx[:, :, : 2 * H2, : 2 * W2] = dblocks.reshape(B, C, 2 * H2, 2 * W2)
        return dx, {}


class MaxPoolSame(Layer):
    """3x3 max-pooling, stride 1, spatial size preserved (inception pool branch)."""

    def forward(self, x):
        B, C, H, W = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        windows = sliding_window_view(xp, (3, 3), axis=(2, 3)).reshape(B, C, H, W, 9)
        idx = np.argmax(windows, axis=-1)
        y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        shape, idx = cache
        B, C, H, W = shape
        dxp = np.zeros((B, C, H + 2, W + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i : i + H, j : j + W] += dy * (idx == 3 * i + j)
        return dxp[:, :, 1 : 1 + H, 1 : 1 + W], {}


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dy):
        return dy * cache, {}


class Sigmoid(Layer):
    def forward(self, x):
        y = scipy.special.expit(x)
        return y, y

    def backward(self, cache, dy):
        return dy * cache * (1.0 - cache), {}


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, zero=False):
        super().__init__()
        if zero:
            self.params["W"] = np.zeros((n_in, n_out))
        else:
            self.params["W"] = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
        self.params["b"] = np.zeros(n_out)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.params["W"].shape[0]:
            raise ShapeMismatch(
                f"dense expects {self.params['W'].shape[0]} inputs, got {x.shape}"
            )
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, cache, dy):
        return dy @ self.params["W"].T, {"W": cache.T @ dy, "b": dy.sum(axis=0)}


class GlobalAvgPool(Layer):
    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, cache, dy):
        B, C, H, W = cache
        return np.broadcast_to(dy[:, :, None, None] / (H * W), cache).copy(), {}


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def parameters(self, prefix=""):
        params = {}
        for name, layer in self.layers:
            params.update(layer.parameters(f"{prefix}{name}."))
        return params

    def forward(self, x):
        caches = []
        for _, layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, cache, dy):
        grads = {}
        for (name, layer), c in zip(reversed(self.layers), reversed(cache)):
            dy, g = layer.backward(c, dy)
            grads.update({f"{name}.{k}": v for k, v in g.items()})
        return dy, grads


class InceptionBlock(Layer):
    """1x1, 3x3, 5x5 and pool+1x1 branches concatenated on the channel axis."""

    def __init__(self, in_channels, branch_channels, rng):
        super().__init__()
        c1, c3, c5, cp = branch_channels
        self.branches = [
            Sequential([("conv", Conv2D(in_channels, c1, 1, rng)), ("relu", ReLU())]),
            Sequential([("conv", Conv2D(in_channels, c3, 3, rng)), ("relu", ReLU())]),
            Sequential([("conv", Conv2D(in_channels, c5, 5, rng)), ("relu", ReLU())]),
            Sequential(
                [
                    ("pool", MaxPoolSame()),
                    ("conv", Conv2D(in_channels, cp, 1, rng)),
                    ("relu", ReLU()),
                ]
            ),
        ]
        self.out_channels = c1 + c3 + c5 + cp

    def parameters(self, prefix=""):
        params = {}
        for i, branch in enumerate(self.branches):
            params.update(branch.parameters(f"{prefix}branch{i}."))
        return params

    def forward(self, x):
        outputs, caches = zip(*(branch.forward(x) for branch in self.branches))
        widths = [o.shape[1] for o in outputs]
        return np.concatenate(outputs, axis=1), (caches, widths)

    def backward(self, cache, dy):
        caches, widths = cache
        dx = 0.0
        grads = {}
        splits = np.split(dy, np.cumsum(widths)[:-1], axis=1)
        for i, (branch, c, d) in enumerate(zip(self.branches, caches, splits)):
            dxi, g = branch.backward(c, d)
            dx = dx + dxi
            grads.update({f"branch{i}.{k}": v for k, v in g.items()})
        return dx, grads


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    in_channels: int = 1
    conv_channels: tuple = (8, 8, 16, 16, 16)
    pool_after: tuple = (2, 4)
    inception: tuple = ((4, 8, 4, 4), (8, 8, 8, 8))
    embedding_dim: int = 128
    n_tags: int = 4
    midlevel_head: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("conv_channels", "pool_after"):
            data[key] = tuple(data[key])
        data["inception"] = tuple(tuple(b) for b in data["inception"])
        return cls(**data)


@dataclass(frozen=True, eq=False)
class ForwardPass:
    output: np.ndarray
    cache: list
    version: int
    head: str


class Network:
    """Backbone ending in the embedding layer, plus named heads."""

    def __init__(self, config, backbone, heads):
        self.config = config
        self.backbone = backbone
        self.heads = dict(heads)
        self.version = 0

    def stack(self, head):
        if head not in self.heads:
            raise MissingHead(f"network has no '{head}' head")
        return Sequential([("backbone", self.backbone), (head, self.heads[head])])

    def parameters(self):
        params = self.backbone.parameters("backbone.")
        for name in sorted(self.heads):
            params.update(self.heads[name].parameters(f"{name}."))
        return params

    def backbone_names(self):
        return [n for n in self.parameters() if n.startswith("backbone.")]

    def _check_input(self, x):
        c = self.config
        expected = (c.in_channels, c.input_size, c.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeMismatch(f"expected input [batch x {expected}], got {x.shape}")

    def forward(self, x, head="tags"):
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        output, cache = self.stack(head).forward(x)
        return ForwardPass(output, cache, self.version, head)

    def backward(self, forward_pass, grad_output):
        """Parameter gradients (and the input gradient) for a forward pass."""
        if forward_pass.version != self.version:
            raise StaleCache("parameters changed since this forward pass")
        return self.stack(forward_pass.head).backward(forward_pass.cache, grad_output)

    def embed(self, x, batch_size=64):
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        chunks = [
            self.backbone.forward(x[i : i + batch_size])[0]
            for i in range(0, len(x), batch_size)
        ]
        if not chunks:
            return np.zeros((0, self.config.embedding_dim))
        return np.concatenate(chunks)

    def bump_version(self):
        self.version += 1

    def snapshot(self):
        return {name: p.copy() for name, p in self.parameters().items()}

    def restore(self, snapshot):
        for name, p in self.parameters().items():
            p[...] = snapshot[name]
        self.bump_version()


def _midlevel_head(embedding_dim, rng):
    w1, w2 = MIDLEVEL_HEAD_WIDTHS
    return Sequential(
        [
            ("dense0", Dense(embedding_dim, w1, rng)),
            ("relu0", ReLU()),
            ("dense1", Dense(w1, w2, rng)),
            ("relu1", ReLU()),
            ("out", Dense(w2, len(MIDLEVEL_NAMES), rng)),
        ]
    )


def build_network(config=None, seed=0):
    """Mini-inception: 3x3 convs with two max-pools, inception blocks, GAP, dense."""
    config = config or NetworkConfig()
    rng = np.random.default_rng(seed)
    layers = []
    channels, size = config.in_channels, config.input_size
    for i, width in enumerate(config.conv_channels):
        layers.append((f"conv{i}", Conv2D(channels, width, 3, rng)))
        layers.append((f"relu{i}", ReLU()))
        channels = width
        if i in config.pool_after:
            layers.append((f"pool{i}", MaxPool2()))
            size //= 2
    if size < 1:
        raise ShapeMismatch(
            f"input size {config.input_size} is too small for the pooling layers"
        )
    for j, branches in enumerate(config.inception):
        block = InceptionBlock(channels, branches, rng)
        layers.append((f"inception{j}", block))
        channels = block.out_channels
    layers.append(("gap", GlobalAvgPool()))
    layers.append(("embedding", Dense(channels, config.embedding_dim, rng)))
    layers.append(("embedding_relu", ReLU()))

    heads = {}
    if config.n_tags > 0:
        heads["tags"] = Sequential(
            [
                ("dense", Dense(config.embedding_dim, config.n_tags, zero=True)),
                ("sigmoid", Sigmoid()),
            ]
        )
    if config.midlevel_head:
        heads["midlevel"] = _midlevel_head(config.embedding_dim, rng)
    return Network(config, Sequential(layers), heads)


def attach_midlevel_head(net, seed=0):
    """Add the Dense 150 -> 30 -> 7 head (linear output) to a network."""
    rng = np.random.default_rng(seed)
    net.heads["midlevel"] = _midlevel_head(net.config.embedding_dim, rng)
    net.config = NetworkConfig(**{**net.config.to_dict(), "midlevel_head": True})
    net.bump_version()
    return net


def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient w.r.t. the probabilities."""
    p = np.clip(p, _BCE_CLIP, 1.0 - _BCE_CLIP)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(loss), (p - y) / (p * (1.0 - p)) / p.size


def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads, names=None):
        """In-place update of params[name] for every name given (default: all grads)."""
        self.step_count += 1
        t = self.step_count
        for name in names if names is not None else grads:
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 29
    learning_rate: float = 1e-3
    freeze_backbone: bool = False
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgument("batch size must be at least 1")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning rate must be positive")


@dataclass(frozen=True)
class EpochMetrics:
    stage: str
    epoch: int
    loss: float
    val_metric: float


def as_batch(patches):
    """Stack MelPatches or 2-D/3-D/4-D arrays into [batch x 1 x H x W]."""
    if isinstance(patches, np.ndarray):
        x = patches.astype(np.float64, copy=False)
    else:
        x = np.stack(
            [p.values if isinstance(p, MelPatch) else np.asarray(p) for p in patches]
        )
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    return np.asarray(x, dtype=np.float64)


def _train_epoch(net, x, y, head, loss_fn, adam, cfg, rng, names):
    order = rng.permutation(len(x))
    losses = []
    for start in range(0, len(x), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        fp = net.forward(x[idx], head)
        loss, grad = loss_fn(fp.output, y[idx])
        _, grads = net.backward(fp, grad)
        adam.step(net.parameters(), grads, names)
        net.bump_version()
        losses.append(loss * len(idx))
    return float(np.sum(losses) / len(x))


def _predict(net, x, head, batch_size=64):
    return np.concatenate(
        [
            net.forward(x[i : i + batch_size], head).output
            for i in range(0, len(x), batch_size)
        ]
    )


def tag_aucs(probabilities, tags):
    """Per-tag ROC-AUC; None for tags without both classes."""
    result = []
    for j in range(tags.shape[1]):
        labels = tags[:, j] > 0.5
        if labels.all() or not labels.any():
            result.append(None)
        else:
            result.append(roc_auc(probabilities[:, j], labels))
    return result


def _mean_auc(aucs):
    valid = [a for a in aucs if a is not None]
    return float(np.mean(valid)) if valid else float("nan")


@dataclass(frozen=True, eq=False)
class TagTrainResult:
    net: Network
    metrics: list
    tag_auc: list
    holdout: np.ndarray

    @property
    def mean_auc(self):
        return _mean_auc(self.tag_auc)


def train_tags(net, patches, tags, cfg=None, holdout=0.05):
    """
    Multi-label tag training with sigmoid outputs and mean BCE; the mean
    held-out AUC is recorded after every epoch.
    """
    cfg = cfg or TrainConfig()
    x = as_batch(patches)
    tags = np.asarray(tags, dtype=np.float64)
    if len(x) == 0:
        raise EmptyDataset("no training patches")
    if tags.shape != (len(x), net.config.n_tags):
        raise ShapeMismatch(
            f"tag matrix {tags.shape} does not match {len(x)} x {net.config.n_tags}"
        )
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(x))
    n_hold = int(round(holdout * len(x)))
    if n_hold >= len(x):
        raise EmptyDataset("holdout leaves no training patches")
    hold, train = np.sort(order[:n_hold]), np.sort(order[n_hold:])

    adam = AdamState(learning_rate=cfg.learning_rate)
    names = _trainable(net, "tags", cfg.freeze_backbone)
    metrics = []
    aucs = []
    for epoch in range(1, cfg.epochs + 1):
        loss = _train_epoch(
            net, x[train], tags[train], "tags", bce_loss, adam, cfg, rng, names
        )
        aucs = tag_aucs(_predict(net, x[hold], "tags"), tags[hold]) if n_hold else []
        metrics.append(EpochMetrics("pretrain", epoch, loss, _mean_auc(aucs)))
        logger.info(
            f"pretrain epoch {epoch}: loss {loss:.4f}, "
            f"held-out AUC {metrics[-1].val_metric:.3f}"
        )
    return TagTrainResult(net, metrics, aucs, hold)


def _trainable(net, head, freeze_backbone):
    names = [
        n for n in net.parameters() if n.startswith((f"{head}.", "backbone."))
    ]
    if freeze_backbone:
        names = [n for n in names if not n.startswith("backbone.")]
    return names


@dataclass(frozen=True, eq=False)
class FinetuneResult:
    net: Network
    metrics: list
    stage1_best: float = None
    stage2_best: float = None


def _run_stage(
    net, stage, x, y, x_val, y_val, cfg, learning_rate, freeze, early_stop, rng
):
    adam = AdamState(learning_rate=learning_rate)
    names = _trainable(net, "midlevel", freeze)
    best = mse_loss(_predict(net, x_val, "midlevel"), y_val)[0]
    metrics = [EpochMetrics(stage, 0, float("nan"), best)]
    best_params = net.snapshot()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        loss = _train_epoch(net, x, y, "midlevel", mse_loss, adam, cfg, rng, names)
        val = mse_loss(_predict(net, x_val, "midlevel"), y_val)[0]
        metrics.append(EpochMetrics(stage, epoch, loss, val))
        logger.debug(f"{stage} epoch {epoch}: loss {loss:.5f}, val MSE {val:.5f}")
        if val < best:
            best, stale = val, 0
            best_params = net.snapshot()
        else:
            stale += 1
            if early_stop and stale >= cfg.patience:
                logger.info(
                    f"{stage}: no validation improvement for {stale} epochs, "
                    f"stopping at {epoch}"
                )
                break
    if early_stop:
        net.restore(best_params)
    return metrics, best


def finetune(
    net,
    patches,
    targets,
    cfg=None,
    val_patches=None,
    val_targets=None,
    val_fraction=0.1,
    stages=(1, 2),
    early_stop=True,
):
    """
    Two-stage mid-level training with MSE over all seven outputs.

    Stage 1 trains the head with the backbone frozen; stage 2 trains
    everything with the learning rate divided by 10. Each stage stops after
    `patience` epochs without validation improvement and restores its best
    parameters.
    """
    if "midlevel" not in net.heads:
        raise MissingHead("attach the mid-level head before fine-tuning")
    cfg = cfg or TrainConfig()
    x = as_batch(patches)
    y = np.asarray(targets, dtype=np.float64)
    if len(x) == 0:
        raise EmptyDataset("no fine-tuning patches")
    if y.shape != (len(x), len(MIDLEVEL_NAMES)):
        raise ShapeMismatch(
            f"targets must be {len(x)} x {len(MIDLEVEL_NAMES)}, got {y.shape}"
        )
    rng = np.random.default_rng(cfg.seed)
    if val_patches is None:
        order = rng.permutation(len(x))
        n_val = max(1, int(round(val_fraction * len(x))))
        if n_val >= len(x):
            raise EmptyDataset("validation split leaves no training patches")
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        x_val, y_val, x, y = x[val_idx], y[val_idx], x[train_idx], y[train_idx]
    else:
        x_val, y_val = as_batch(val_patches), np.asarray(val_targets, dtype=np.float64)

    metrics = []
    stage1_best = stage2_best = None
    if 1 in stages:
        m, stage1_best = _run_stage(
            net, "finetune1", x, y, x_val, y_val, cfg,
            cfg.learning_rate, True, early_stop, rng,
        )  # fmt: skip
        metrics.extend(m)
    if 2 in stages:
        m, stage2_best = _run_stage(
            net, "finetune2", x, y, x_val, y_val, cfg,
            cfg.learning_rate / 10.0, False, early_stop, rng,
        )  # fmt: skip
        metrics.extend(m)
    return FinetuneResult(net, metrics, stage1_best, stage2_best)


@dataclass(frozen=True)
class GradientCheckResult:
    max_relative_error: float
    n_checked: int
    n_kinks_skipped: int


def _relative_error(a, n):
    return abs(a - n) / max(abs(a) + abs(n), 1e-6)


def gradient_check(model, x, head="tags", eps=1e-5, n_params_sampled=200, seed=0):
    """
    Compare backward() with central differences on sampled parameter entries.

    The loss is 0.5 * mean over the batch of |output - t|^2 for a seeded random
    target t. Entries where halving eps changes the numeric derivative by more
    than 1% sit on a ReLU/max kink and are skipped.
    """
    layer = model.stack(head) if isinstance(model, Network) else model
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    y, cache = layer.forward(x)
    target = rng.normal(size=y.shape)
    batch = y.shape[0]

    def loss():
        out = layer.forward(x)[0]
        return 0.5 * np.sum((out - target) ** 2) / batch

    _, grads = layer.backward(cache, (y - target) / batch)
    params = layer.parameters()
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_params_sampled, total), replace=False)
    bounds = np.cumsum(sizes)

    def numeric(p, i, h):
        old = p.flat[i]
        p.flat[i] = old + h
        plus = loss()
        p.flat[i] = old - h
        minus = loss()
        p.flat[i] = old
        return (plus - minus) / (2.0 * h)

    worst, checked, kinks = 0.0, 0, 0
    for flat in np.sort(picks):
        k = int(np.searchsorted(bounds, flat, side="right"))
        name = names[k]
        i = int(flat - (bounds[k - 1] if k else 0))
        p = params[name]
        n_full = numeric(p, i, eps)
        n_half = numeric(p, i, eps / 2.0)
        if _relative_error(n_full, n_half) > 1e-2:
            kinks += 1
            continue
        worst = max(worst, _relative_error(float(grads[name].flat[i]), n_full))
        checked += 1
    if isinstance(model, Network):
        model.bump_version()
    return GradientCheckResult(worst, checked, kinks)


def synthetic_tag_dataset(n, size=16, n_tags=4, seed=0):
    """
    Texture patches with independent tags: horizontal stripes, vertical
    stripes, brightness offset and a checkerboard (periods grow for tags
    beyond four). Values lie in [0, 1].
    """
    if n < 2:
        raise EmptyDataset("synthetic dataset needs at least 2 patches")
    rng = np.random.default_rng(seed)
    tags = rng.integers(0, 2, size=(n, n_tags)).astype(np.float64)
    for j in range(n_tags):
        tags[j % n, j] = 1.0
        tags[(j + 1) % n, j] = 0.0
    rows, cols = np.mgrid[0:size, 0:size]
    textures = []
    for j in range(n_tags):
        period = 4 + 2 * (j // 4)
        kind = j % 4
        if kind == 0:
            t = (rows // (period // 2)) % 2
        elif kind == 1:
            t = (cols // (period // 2)) % 2
        elif kind == 2:
            t = np.ones((size, size))
        else:
            t = ((rows // (period // 2)) + (cols // (period // 2))) % 2
        textures.append(t.astype(np.float64))
    textures = np.stack(textures)
    patches = 0.2 * rng.random((n, size, size)) + np.tensordot(tags, textures, axes=1)
    patches /= patches.max()
    return patches[:, None], tags


def synthetic_midlevel_dataset(n, size=16, seed=0):
    """Texture patches with seven ratings in [1, 9] that depend on the textures."""
    patches, tags = synthetic_tag_dataset(n, size, n_tags=4, seed=seed)
    rng = np.random.default_rng(seed + 1)
    mixing = rng.normal(size=(tags.shape[1], len(MIDLEVEL_NAMES)))
    targets = 1.0 + 8.0 * scipy.special.expit(2.0 * (tags - 0.5) @ mixing)
    return patches, targets


@dataclass(frozen=True, eq=False)
class TransferResult:
    predictions: np.ndarray
    scores: dict
    n_components: int
    models: list


def transfer_regression(
    net, patches, targets, train_ids, val_ids, test_ids, n_components=30
):
    """
    Embeddings -> PCA (training statistics) -> RBF kernel ridge per mid-level
    feature, tuned on the validation rows; returns test predictions and
    per-feature Pearson r.
    """
    emb = net.embed(as_batch(patches))
    y = np.asarray(targets, dtype=np.float64)
    train_ids, val_ids, test_ids = (
        np.asarray(i, dtype=int) for i in (train_ids, val_ids, test_ids)
    )
    if train_ids.size < 2 or val_ids.size < 1 or test_ids.size < 1:
        raise TooFewRows(
            "transfer needs 2 training rows and non-empty validation/test sets"
        )
    n_comp = min(n_components, train_ids.size, emb.shape[1])
    pca = pca_fit(emb[train_ids], n_comp)
    z = pca_apply(pca, emb)

    predictions = np.zeros((test_ids.size, y.shape[1]))
    models = []
    for j in range(y.shape[1]):
        model, _ = tune_kernel_rbf(
            z[train_ids], y[train_ids, j], z[val_ids], y[val_ids, j]
        )
        models.append(model)
        predictions[:, j] = predict_kernel(model, z[test_ids])

    result_scores = {}
    for j in range(y.shape[1]):
        name = MIDLEVEL_NAMES[j] if y.shape[1] == len(MIDLEVEL_NAMES) else j
        try:
            result_scores[name] = pearson(predictions[:, j], y[test_ids, j])
        except (ConstantInput, TooFewItems) as e:
            logger.warning(f"No correlation for output {name}: {e}")
            result_scores[name] = float("nan")
    return TransferResult(predictions, result_scores, pca.n_components, models)


def save_checkpoint(net, path):
    """Write the network config and named float64 arrays (little-endian)."""
    config = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    params = net.parameters()
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(config)))
            f.write(config)
            f.write(struct.pack("<I", len(params)))
            for name in sorted(params):
                array = params[name]
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<I", array.ndim))
                f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
                f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write checkpoint {path}: {e}") from e


def _read(f, n):
    data = f.read(n)
    if len(data) != n:
        raise IoFailure("checkpoint is truncated")
    return data


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    with open(path, "rb") as f:
        if _read(f, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise IoFailure(f"{path} is not a checkpoint")
        version, config_len = struct.unpack("<II", _read(f, 8))
        if version != CHECKPOINT_VERSION:
            raise IoFailure(f"unsupported checkpoint version {version}")
        config = NetworkConfig.from_dict(
            json.loads(_read(f, config_len).decode("utf-8"))
        )
        (count,) = struct.unpack("<I", _read(f, 4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4))
            name = _read(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read(f, 4))
            shape = struct.unpack(f"<{ndim}Q", _read(f, 8 * ndim))
            n = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(_read(f, 8 * n), dtype="<f8").reshape(shape)

    net = build_network(config)
    params = net.parameters()
    if set(params) != set(arrays):
        raise ShapeMismatch("checkpoint parameters do not match its network config")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise ShapeMismatch(
                f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}"
            )

        p[...] = arrays[name]
    return net


def write_metrics(metrics, path):
    rows = [asdict(m) for m in metrics]
    frame = pd.DataFrame(rows, columns=["stage", "epoch", "loss", "val_metric"])
    try:
        frame.to_csv(path, index=False, float_format="%.10g")
    except OSError as e:
        raise IoFailure(f"cannot write metrics {path}: {e}") from e
