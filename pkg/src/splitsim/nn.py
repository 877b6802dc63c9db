"""Minimal layer kernels with hand-written forward/backward passes.

Everything runs on plain numpy arrays: float32 for simulation runs (which is
what the byte accounting assumes, 4 bytes per element) and float64 for the
gradient-oracle tests. There is no autodiff graph and no GPU path.
Convolutions are lowered to an im2col matmul so toy runs finish in seconds.

FLOP convention: 1 multiply-accumulate = 2 FLOPs, a backward pass costs twice
the forward pass, so a training step (forward+backward) costs 3x forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, UsageError

PASS_FORWARD = "forward"
PASS_BOTH = "forward+backward"

DENSE = "dense"
CONV2D = "conv2d"
RELU = "relu"
FLATTEN = "flatten"
HEAD = "softmax-xent-head"

PARAMETRIC_KINDS = (DENSE, CONV2D)


@dataclass(frozen=True)
class LayerSpec:
    """Description of a single layer; build one via the factory functions."""

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    in_ch: int = 0
    out_ch: int = 0
    ksize: int = 0
    stride: int = 1
    pad: int = 0
    classes: int = 0

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    def __str__(self) -> str:
        if self.kind == DENSE:
            return f"dense({self.in_dim}->{self.out_dim})"
        if self.kind == CONV2D:
            return (
                f"conv2d({self.in_ch}->{self.out_ch}, k={self.ksize},"
                f" s={self.stride}, p={self.pad})"
            )
        if self.kind == HEAD:
            return f"{HEAD}({self.classes})"
        return self.kind


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    if in_dim < 1 or out_dim < 1:
        raise ConfigError(f"dense dims must be positive, got {in_dim}->{out_dim}")
    return LayerSpec(DENSE, in_dim=in_dim, out_dim=out_dim)


def conv2d(in_ch: int, out_ch: int, ksize: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    if min(in_ch, out_ch, ksize, stride) < 1 or pad < 0:
        raise ConfigError(
            f"bad conv2d geometry: in={in_ch} out={out_ch} k={ksize} s={stride} p={pad}"
        )
    return LayerSpec(CONV2D, in_ch=in_ch, out_ch=out_ch, ksize=ksize, stride=stride, pad=pad)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def head(classes: int) -> LayerSpec:
    if classes < 1:
        raise ConfigError(f"head needs at least one class, got {classes}")
    return LayerSpec(HEAD, classes=classes)


def out_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of `layer` applied to `in_shape`."""
    if layer.kind == DENSE:
        if in_shape != (layer.in_dim,):
            raise ConfigError(f"{layer} cannot take input of shape {in_shape}")
        return (layer.out_dim,)
    if layer.kind == CONV2D:
        if len(in_shape) != 3 or in_shape[0] != layer.in_ch:
            raise ConfigError(f"{layer} cannot take input of shape {in_shape}")
        h = (in_shape[1] + 2 * layer.pad - layer.ksize) // layer.stride + 1
        w = (in_shape[2] + 2 * layer.pad - layer.ksize) // layer.stride + 1
        if h < 1 or w < 1:
            raise ConfigError(f"{layer} collapses input of shape {in_shape}")
        return (layer.out_ch, h, w)
    if layer.kind == RELU:
        return in_shape
    if layer.kind == FLATTEN:
        return (int(np.prod(in_shape)),)
    if layer.kind == HEAD:
        if in_shape != (layer.classes,):
            raise ConfigError(f"{layer} expects logits of shape ({layer.classes},), got {in_shape}")
        return in_shape
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


# ---------------------------------------------------------------------------
# parameters


def he_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...], dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_layer_params(layer: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Fresh parameters for one layer: He-uniform weights, zero biases."""
    if layer.kind == DENSE:
        return {
            "w": he_uniform(rng, layer.in_dim, (layer.in_dim, layer.out_dim), dtype),
            "b": np.zeros(layer.out_dim, dtype=dtype),
        }
    if layer.kind == CONV2D:
        fan_in = layer.in_ch * layer.ksize * layer.ksize
        return {
            "w": he_uniform(
                rng, fan_in, (layer.out_ch, layer.in_ch, layer.ksize, layer.ksize), dtype
            ),
            "b": np.zeros(layer.out_ch, dtype=dtype),
        }
    return {}


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Lower (B,C,H,W) into (B,Ho,Wo,C*k*k) patches plus output spatial dims."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b, ho, wo, c * k * k), ho, wo


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int, ho: int, wo: int):
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[:, :, i, j]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def forward_layer(layer: LayerSpec, params: dict, x: np.ndarray):
    """Run one layer on a batch (leading axis). Returns (output, cache)."""
    out_shape(layer, x.shape[1:])  # validates batch shape compatibility
    if layer.kind == DENSE:
        y = x @ params["w"] + params["b"]
        return y, (DENSE, x)
    if layer.kind == CONV2D:
        cols, ho, wo = _im2col(x, layer.ksize, layer.stride, layer.pad)
        wmat = params["w"].reshape(layer.out_ch, -1)
        y = cols @ wmat.T + params["b"]
        return y.transpose(0, 3, 1, 2), (CONV2D, cols, x.shape, ho, wo)
    if layer.kind == RELU:
        mask = x > 0
        return x * mask, (RELU, mask)
    if layer.kind == FLATTEN:
        return x.reshape(x.shape[0], -1), (FLATTEN, x.shape)
    if layer.kind == HEAD:
        return x, (HEAD,)
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def backward_layer(layer: LayerSpec, params: dict, cache, grad_out: np.ndarray):
    """Backprop one layer. Returns (param_grads, grad_in)."""
    if not isinstance(cache, tuple) or not cache or cache[0] != layer.kind:
        raise UsageError(f"cache does not belong to {layer}; call forward first")
    if layer.kind == DENSE:
        _, x = cache
        gw = x.T @ grad_out
        gb = grad_out.sum(axis=0)
        gx = grad_out @ params["w"].T
        return {"w": gw, "b": gb}, gx
    if layer.kind == CONV2D:
        _, cols, x_shape, ho, wo = cache
        gmat = grad_out.transpose(0, 2, 3, 1)  # (B,Ho,Wo,out_ch)
        wflat = params["w"].reshape(layer.out_ch, -1)
        gw = np.tensordot(gmat, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(params["w"].shape)
        gb = gmat.sum(axis=(0, 1, 2))
        dcols = gmat @ wflat
        gx = _col2im(dcols, x_shape, layer.ksize, layer.stride, layer.pad, ho, wo)
        return {"w": gw, "b": gb}, gx
    if layer.kind == RELU:
        _, mask = cache
        return {}, grad_out * mask
    if layer.kind == FLATTEN:
        _, x_shape = cache
        return {}, grad_out.reshape(x_shape)
    if layer.kind == HEAD:
        return {}, grad_out
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def forward_chain(layers, params, x: np.ndarray):
    """Forward a batch through a layer sequence. Returns (output, caches)."""
    caches = []
    h = x
    for spec, p in zip(layers, params):
        h, c = forward_layer(spec, p, h)
        caches.append(c)
    return h, caches


def backward_chain(layers, params, caches, grad_out: np.ndarray):
    """Backprop through a layer sequence. Returns (per-layer grads, input grad)."""
    if len(caches) != len(layers):
        raise UsageError("cache list does not match layer list; stale forward state")
    grads = [None] * len(layers)
    g = grad_out
    for i in reversed(range(len(layers))):
        grads[i], g = backward_layer(layers[i], params[i], caches[i], g)
    return grads, g


# ---------------------------------------------------------------------------
# loss and updates


def loss_softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over the batch.

    Returns (loss, grad) where grad is d(loss)/d(logits); each row of the
    gradient sums to zero.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DataError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise DataError(f"labels must lie in [0, {c}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


def sgd_step(params, grads, lr: float):
    """In-place vanilla SGD: params <- params - lr * grads.

    Accepts one layer's parameter dict or a per-layer list of dicts; `grads`
    mirrors the structure. Returns `params` for chaining.
    """
    if isinstance(params, dict):
        for key, g in grads.items():
            params[key] -= lr * g
        return params
    for p, g in zip(params, grads):
        sgd_step(p, g, lr)
    return params


# ---------------------------------------------------------------------------
# FLOP accounting


def layer_flops(layer: LayerSpec, in_shape: tuple[int, ...], batch: int) -> int:
    """Forward-pass FLOPs for one layer (2 per MAC, 1 per bias add / relu)."""
    shape = out_shape(layer, in_shape)
    if layer.kind == DENSE:
        return batch * (2 * layer.in_dim * layer.out_dim + layer.out_dim)
    if layer.kind == CONV2D:
        _, ho, wo = shape
        macs = ho * wo * layer.out_ch * layer.in_ch * layer.ksize * layer.ksize
        return batch * (2 * macs + ho * wo * layer.out_ch)
    if layer.kind == RELU:
        return batch * int(np.prod(in_shape))
    return 0  # flatten and the loss head are free


def chain_flops(layers, in_shape: tuple[int, ...], batch: int, passes: str = PASS_FORWARD) -> int:
    """Deterministic FLOP count of a layer sequence on a batch."""
    if passes not in (PASS_FORWARD, PASS_BOTH):
        raise UsageError(f"unknown pass kind {passes!r}")
    total = 0
    shape = in_shape
    for layer in layers:
        total += layer_flops(layer, shape, batch)
        shape = out_shape(layer, shape)
    return total * (3 if passes == PASS_BOTH else 1)


# ---------------------------------------------------------------------------
# finite-difference oracle (also backs the `gradcheck` CLI subcommand)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(1e-6, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


def finite_difference_check(layer: LayerSpec, in_shape: tuple[int, ...], seed: int,
                            batch: int = 2, eps: float = 1e-5, dtype=np.float64) -> float:
    """Max relative error of backward() against central finite differences.

    The scalar objective is sum(forward(x) * R) for a fixed random projection
    R, so its analytic input/parameter gradients come from backward() with
    upstream gradient R, while the numeric side only ever calls forward().
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    params = init_layer_params(layer, rng, dtype)
    x = rng.uniform(-1.0, 1.0, size=(batch, *in_shape)).astype(dtype)
    if layer.kind == RELU:
        # keep inputs away from the kink so the derivative is well defined
        x = np.where(np.abs(x) < 0.1, x + 0.2 * np.sign(x) + 0.05, x)
    proj = rng.normal(size=(batch, *out_shape(layer, in_shape))).astype(dtype)

    def objective(x_arr, p_dict):
        y, _ = forward_layer(layer, p_dict, x_arr)
        return float((y * proj).sum())

    y, cache = forward_layer(layer, params, x)
    analytic_p, analytic_x = backward_layer(layer, params, cache, proj)

    worst = _rel_err(analytic_x, _numeric_grad(lambda a: objective(a, params), x, eps))
    for key in params:
        def f(arr, key=key):
            trial = dict(params)
            trial[key] = arr
            return objective(x, trial)

        worst = max(worst, _rel_err(analytic_p[key], _numeric_grad(f, params[key], eps)))
    return worst


def finite_difference_check_loss(classes: int, seed: int, batch: int = 4,
                                 eps: float = 1e-6) -> float:
    """Max relative error of the loss gradient against central differences."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    logits = rng.normal(size=(batch, classes)).astype(np.float64)
    labels = rng.integers(0, classes, size=batch)
    _, grad = loss_softmax_xent(logits, labels)
    numeric = _numeric_grad(lambda z: loss_softmax_xent(z, labels)[0], logits, eps)
    return _rel_err(grad, numeric)


def _numeric_grad(f, x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g
