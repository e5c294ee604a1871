"""Network building blocks: 5x5 convolutions, dense layers, dropout,
spatial soft-argmax keypoints, state tiling and one-hot action codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

KERNEL = 5
PADDING = 2

ACTIVATIONS = {
    "relu": dc.relu,
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "softmax": lambda x: dc.softmax(x, axis=-1),
    "linear": lambda x: x,
}


@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    activation: str = "relu"
    kernel: int = KERNEL

    def __post_init__(self):
        if self.kernel != KERNEL:
            raise ValueError("convolution blocks use 5x5 kernels")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def output_extent(self, extent: int) -> int:
        return -(-extent // self.stride)


def conv_block(x: Tensor, spec: ConvBlockSpec, weight: Tensor, bias: Tensor) -> Tensor:
    """5x5 convolution with zero padding 2, bias, then ``spec.activation``."""
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv_block: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != (spec.out_channels, spec.in_channels, KERNEL, KERNEL):
        raise ShapeError(f"conv_block: weight shape {weight.shape} does not match {spec}")
    y = dc.conv2d(x, weight, stride=spec.stride, padding=PADDING)
    y = y + bias.reshape(1, -1, 1, 1)
    return ACTIVATIONS[spec.activation](y)


def upconv_block(x: Tensor, weight: Tensor, bias: Tensor, skip: Tensor | None = None,
                 skip_weight: Tensor | None = None, activation: str = "relu") -> Tensor:
    """Upsample x2 then 5x5 convolution, optionally over ``[x, skip]`` channels.

    ``x`` is ``(N*m, C, h, w)`` and ``skip`` is ``(N, Cs, h, w)``: the skip map
    is shared by the ``m`` rows that belong to one sample, so its share of the
    convolution is computed once per sample.  Convolving the concatenation
    equals the sum of the two per-part convolutions.
    """
    y = dc.upconv2d(x, weight)
    if skip is not None:
        n = skip.shape[0]
        if y.shape[0] % n:
            raise ShapeError(f"upconv_block: {y.shape[0]} rows not divisible by {n} skip maps")
        m = y.shape[0] // n
        s = dc.upconv2d(skip, skip_weight)
        y = (y.reshape(n, m, *y.shape[1:]) + s.reshape(n, 1, *s.shape[1:])).reshape(y.shape)
    y = y + bias.reshape(1, -1, 1, 1)
    return ACTIVATIONS[activation](y)


def tile_state(features: Tensor, state) -> Tensor:
    """Append the per-sample state vector as constant channels.

    ``features`` is ``(N, C, H, W)``; ``state`` is ``(N, S)``.
    """
    if not isinstance(state, Tensor):
        state = features.graph.constant(state)
    n, _, h, w = features.shape
    if state.shape[0] != n or len(state.shape) != 2:
        raise ShapeError(f"tile_state: state {state.shape} does not match features {features.shape}")
    if state.shape[1] == 0:
        return features
    tiled = dc.broadcast(state.reshape(n, -1, 1, 1), (n, state.shape[1], h, w))
    return dc.concat([features, tiled], axis=1)


_GRIDS: dict[tuple[int, int, str], tuple[np.ndarray, np.ndarray]] = {}


def keypoint_grid(height: int, width: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (x, y) cell coordinates; x follows columns, y follows rows, both on [-1, 1]."""
    key = (height, width, np.dtype(dtype).str)
    if key not in _GRIDS:
        xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
        ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        _GRIDS[key] = (gx.reshape(-1).astype(dtype), gy.reshape(-1).astype(dtype))
    return _GRIDS[key]


def spatial_soft_argmax(features: Tensor, temperature: float = 1.0) -> Tensor:
    """Expected grid coordinates under a per-channel spatial softmax.

    ``(N, K, H, W)`` -> ``(N, 2K)`` ordered ``x1, y1, ..., xK, yK``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n, k, h, w = features.shape
    flat = features.reshape(n, k, h * w)
    if temperature != 1.0:
        flat = flat * (1.0 / temperature)
    p = dc.softmax(flat, axis=-1)
    gx, gy = keypoint_grid(h, w, features.graph.dtype)
    grid = np.stack([gx, gy], axis=1)  # (HW, 2)
    coords = p @ features.graph.constant(grid)  # (N, K, 2)
    return coords.reshape(n, 2 * k)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout.  ``mode`` is ``"train"`` or ``"infer"``; inference is the identity."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "infer" or rate == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    return x * x.graph.constant(keep / (1.0 - rate))


def dropout_array(x: np.ndarray, rate: float, mode: str, seed: int) -> np.ndarray:
    """Array form of :func:`dropout` with an integer seed."""
    g = dc.Graph("double")
    out = dropout(g.constant(x), rate, mode, np.random.default_rng(seed))
    return out.value


def one_hot(action, vocab_size: int) -> np.ndarray:
    """One-hot code(s) for integer action id(s); vectorised over arrays of ids."""
    ids = np.asarray(action)
    if np.any(ids < 0) or np.any(ids >= vocab_size):
        raise ValueError(f"action id(s) {action} outside vocabulary of size {vocab_size}")
    return np.eye(vocab_size)[ids]


def dense(x: Tensor, weight: Tensor, bias: Tensor, activation: str = "linear") -> Tensor:
    """``activation(x @ weight + bias)`` for ``(N, in)`` inputs and ``(in, out)`` weights."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    return ACTIVATIONS[activation](x @ weight + bias)


# -- initialisers ---------------------------------------------------------------


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_conv(rng, in_ch: int, out_ch: int) -> tuple[np.ndarray, np.ndarray]:
    w = he_uniform(rng, (out_ch, in_ch, KERNEL, KERNEL), in_ch * KERNEL * KERNEL)
    return w, np.zeros(out_ch, np.float32)


def init_dense(rng, n_in: int, n_out: int, activation: str = "relu", zero: bool = False):
    if zero:
        w = np.zeros((n_in, n_out), np.float32)
    elif activation == "relu":
        w = he_uniform(rng, (n_in, n_out), n_in)
    else:
        w = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
    return w, np.zeros(n_out, np.float32)
