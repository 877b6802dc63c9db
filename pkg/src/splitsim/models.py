"""Model descriptions, split-point partitioning, auxiliary heads, and size accounting.

A ModelSpec is an ordered layer chain ending in a softmax-xent head. A Block
is a contiguous slice [lo, hi) of a spec together with its parameter tensors;
the device block is [0, p) and the server block [p, I) for split point p.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, UsageError
from .nn import LayerSpec, PASS_FORWARD

BYTES_PER_ELEMENT = 4  # simulation runs in float32
BYTES_PER_LABEL = 8

_INIT_SALT_MODEL = 0
_INIT_SALT_AUX = 1


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    classes: int
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ConfigError("a model needs at least one layer")
        last = self.layers[-1]
        if last.kind != nn.HEAD or last.classes != self.classes:
            raise ConfigError(
                f"model {self.name!r} must end in a {nn.HEAD}({self.classes}) layer"
            )
        self.shapes()  # raises ConfigError if adjacent layers are incompatible

    @property
    def depth(self) -> int:
        return len(self.layers)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shapes along the chain: entry i is the input of layer i."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(nn.out_shape(layer, out[-1]))
        return out

    def shape_at(self, i: int) -> tuple[int, ...]:
        """Shape flowing between layer i-1 and layer i (i=0 is the model input)."""
        return self.shapes()[i]


@dataclass
class Block:
    """Layers [lo, hi) of a spec plus their parameter tensors."""

    spec: ModelSpec
    lo: int
    hi: int
    params: list[dict]

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return self.spec.layers[self.lo : self.hi]

    @property
    def in_shape(self) -> tuple[int, ...]:
        return self.spec.shape_at(self.lo)

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.spec.shape_at(self.hi)

    def forward(self, x: np.ndarray):
        return nn.forward_chain(self.layers, self.params, x)

    def backward(self, caches, grad_out: np.ndarray):
        return nn.backward_chain(self.layers, self.params, caches, grad_out)

    def step(self, grads, lr: float) -> None:
        nn.sgd_step(self.params, grads, lr)

    def flops(self, batch: int, passes: str = PASS_FORWARD) -> int:
        return nn.chain_flops(self.layers, self.in_shape, batch, passes)

    def copy(self) -> "Block":
        return Block(self.spec, self.lo, self.hi, copy.deepcopy(self.params))

    def param_count(self) -> int:
        return sum(int(arr.size) for p in self.params for arr in p.values())


def _init_params(layers, seed: int, salt: int, dtype) -> list[dict]:
    out = []
    for i, layer in enumerate(layers):
        rng = np.random.default_rng(np.random.SeedSequence([seed, salt, i]))
        out.append(nn.init_layer_params(layer, rng, dtype))
    return out


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Block:
    """Instantiate the full model as one block with freshly seeded parameters."""
    return Block(spec, 0, spec.depth, _init_params(spec.layers, seed, _INIT_SALT_MODEL, dtype))


def split_model(full: Block, p: int) -> tuple[Block, Block]:
    """Cut a full model into device block [0, p) and server block [p, I).

    Parameter tensors are copied, so composing the two halves reproduces the
    original forward pass bit for bit while leaving the original untouched.
    """
    if full.lo != 0 or full.hi != full.spec.depth:
        raise UsageError("split_model expects a block covering the whole model")
    depth = full.spec.depth
    if not 1 <= p < depth:
        raise ConfigError(f"split point must satisfy 1 <= p < {depth}, got {p}")
    device = Block(full.spec, 0, p, copy.deepcopy(full.params[:p]))
    server = Block(full.spec, p, depth, copy.deepcopy(full.params[p:]))
    return device, server


def scaled_dim(dim: int, ratio: float) -> int:
    """Width of a rescaled layer: round half up, never below one unit."""
    return max(1, int(math.floor(dim * ratio + 0.5)))


def generate_auxiliary(server: Block, ratio: float, classes: int, seed: int,
                       dtype=np.float32) -> Block:
    """Build the compact two-layer head that lets the device block train locally.

    The first layer replicates the server block's first parametric layer at a
    reduced width (output channels for conv, output units for dense); the
    second is a fully connected classifier feeding the same softmax-xent loss.
    Non-parametric server layers sitting before that first parametric layer
    (relu, flatten) are carried over so shapes line up at any split point.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"aux width ratio must be in (0, 1], got {ratio}")
    prefix: list[LayerSpec] = []
    first = None
    for layer in server.layers:
        if layer.parametric:
            first = layer
            break
        if layer.kind == nn.HEAD:
            break
        prefix.append(layer)
    if first is None:
        raise ConfigError(
            "server block has no dense/conv layer to replicate for the auxiliary head"
        )
    if first.kind == nn.DENSE:
        replica = nn.dense(first.in_dim, scaled_dim(first.out_dim, ratio))
    else:
        replica = nn.conv2d(first.in_ch, scaled_dim(first.out_ch, ratio),
                            first.ksize, first.stride, first.pad)

    shape = server.in_shape
    for layer in prefix + [replica]:
        shape = nn.out_shape(layer, shape)
    flat = int(np.prod(shape))
    layers = tuple(prefix) + (replica, nn.flatten(), nn.dense(flat, classes), nn.head(classes))
    aux_spec = ModelSpec(layers, server.in_shape, classes, name=f"aux[{server.spec.name}]")
    return Block(aux_spec, 0, aux_spec.depth,
                 _init_params(aux_spec.layers, seed, _INIT_SALT_AUX, dtype))


# ---------------------------------------------------------------------------
# size accounting


def param_bytes(block: Block) -> int:
    """Wire size of a block's parameters at 4 bytes per element."""
    return BYTES_PER_ELEMENT * block.param_count()


def layer_param_bytes(spec: ModelSpec) -> list[int]:
    """Per-layer parameter bytes, derived from the layer geometry."""
    out = []
    for layer in spec.layers:
        if layer.kind == nn.DENSE:
            count = layer.in_dim * layer.out_dim + layer.out_dim
        elif layer.kind == nn.CONV2D:
            count = layer.out_ch * layer.in_ch * layer.ksize * layer.ksize + layer.out_ch
        else:
            count = 0
        out.append(BYTES_PER_ELEMENT * count)
    return out


def activation_elements(spec: ModelSpec, p: int) -> int:
    """Per-sample element count of the tensor crossing split point p."""
    if not 1 <= p < spec.depth:
        raise ConfigError(f"split point must satisfy 1 <= p < {spec.depth}, got {p}")
    return int(np.prod(spec.shape_at(p)))


def activation_bytes(spec: ModelSpec, p: int, n_samples: int,
                     include_labels: bool = True) -> int:
    """Wire size of n_samples activations cut at p, plus labels when enabled."""
    per_sample = BYTES_PER_ELEMENT * activation_elements(spec, p)
    if include_labels:
        per_sample += BYTES_PER_LABEL
    return per_sample * n_samples


# ---------------------------------------------------------------------------
# shipped toy models


def toy_cnn(classes: int = 5, input_shape: tuple[int, int, int] = (1, 8, 8),
            widths: tuple[int, int] = (6, 12), hidden: int = 32) -> ModelSpec:
    """Small two-conv CNN for image-patch style inputs."""
    c_in, h, w = input_shape
    c1, c2 = widths
    flat = c2 * ((h + 1) // 2) * ((w + 1) // 2)  # second conv halves the map (stride 2, pad 1, k 3)
    layers = (
        nn.conv2d(c_in, c1, 3, stride=1, pad=1),
        nn.relu(),
        nn.conv2d(c1, c2, 3, stride=2, pad=1),
        nn.relu(),
        nn.flatten(),
        nn.dense(flat, hidden),
        nn.relu(),
        nn.dense(hidden, classes),
        nn.head(classes),
    )
    return ModelSpec(layers, input_shape, classes, name="toy-cnn")


def toy_mlp(classes: int = 5, input_dim: int = 16,
            hidden: tuple[int, ...] = (24, 24)) -> ModelSpec:
    """Small fully connected model for flat synthetic data."""
    layers: list[LayerSpec] = []
    d = input_dim
    for width in hidden:
        layers.append(nn.dense(d, width))
        layers.append(nn.relu())
        d = width
    layers.append(nn.dense(d, classes))
    layers.append(nn.head(classes))
    return ModelSpec(tuple(layers), (input_dim,), classes, name="toy-mlp")


MODEL_PRESETS = {"toy-cnn": toy_cnn, "toy-mlp": toy_mlp}
