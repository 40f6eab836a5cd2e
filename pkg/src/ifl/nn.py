"""Minimal numpy neural-network engine.

Layers cache their last forward input and expose explicit ``forward`` /
``backward`` methods. Parameters live on the layer as float32 arrays and are
only ever changed by :func:`sgd_step`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an array does not have the shape a layer expects."""


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    @property
    def params(self) -> list[np.ndarray]:
        return []

    @params.setter
    def params(self, values):
        if list(values):
            raise ValueError(f"{self.kind} has no parameters")

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (no batch dimension)."""
        return tuple(input_shape)

    def check_input(self, x: np.ndarray) -> None:
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        return self._cache

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = np.zeros((out_dim, in_dim), dtype=DTYPE)
        self.b = np.zeros(out_dim, dtype=DTYPE)

    @property
    def params(self):
        return [self.W, self.b]

    @params.setter
    def params(self, values):
        W, b = values
        if W.shape != (self.out_dim, self.in_dim) or b.shape != (self.out_dim,):
            raise ShapeError(
                f"dense({self.in_dim}->{self.out_dim}): got W{W.shape}, b{b.shape}"
            )
        self.W, self.b = W, b

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_dim,):
            raise ShapeError(f"expected ({self.in_dim},), got {tuple(input_shape)}")
        return (self.out_dim,)

    def check_input(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected (batch, {self.in_dim}), got {x.shape}")

    def forward(self, x):
        self._cache = x
        return x @ self.W.T + self.b

    def backward(self, grad):
        x = self._cached()
        if grad.shape != (x.shape[0], self.out_dim):
            raise ShapeError(f"expected grad {(x.shape[0], self.out_dim)}, got {grad.shape}")
        dW = grad.T @ x
        db = grad.sum(axis=0)
        return grad @ self.W, [dW, db]

    def __repr__(self):
        return f"Dense({self.in_dim}, {self.out_dim})"


class Conv2d(Layer):
    """2-D cross-correlation over NCHW input, computed with im2col."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.W = np.zeros((out_channels, in_channels, kernel, kernel), dtype=DTYPE)
        self.b = np.zeros(out_channels, dtype=DTYPE)

    @property
    def params(self):
        return [self.W, self.b]

    @params.setter
    def params(self, values):
        W, b = values
        expect = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if W.shape != expect or b.shape != (self.out_channels,):
            raise ShapeError(f"conv2d: expected W{expect}, got W{W.shape}, b{b.shape}")
        self.W, self.b = W, b

    def _out_hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(
                f"expected ({self.in_channels}, H, W), got {tuple(input_shape)}"
            )
        oh, ow = self._out_hw(*input_shape[1:])
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {tuple(input_shape)} too small for kernel")
        return (self.out_channels, oh, ow)

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected (batch, C, H, W), got {x.shape}")
        self.output_shape(x.shape[1:])

    def forward(self, x):
        n, c, h, w = x.shape
        p, s, k = self.padding, self.stride, self.kernel
        oh, ow = self._out_hw(h, w)
        # im2col in channel-last order: rows (n, oh, ow), columns (ki, kj, c)
        xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        xp[:, p:p + h, p:p + w, :] = x.transpose(0, 2, 3, 1)
        cols = np.empty((n, oh, ow, k, k, c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i:i + s * oh:s, j:j + s * ow:s, :]
        cols = cols.reshape(n * oh * ow, k * k * c)
        out = cols @ self.W.transpose(2, 3, 1, 0).reshape(k * k * c, -1) + self.b
        self._cache = (x.shape, cols)
        return out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        (n, c, h, w), cols = self._cached()
        oh, ow = self._out_hw(h, w)
        if grad.shape != (n, self.out_channels, oh, ow):
            raise ShapeError(
                f"expected grad {(n, self.out_channels, oh, ow)}, got {grad.shape}"
            )
        k, s, p = self.kernel, self.stride, self.padding
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        Wt = self.W.transpose(2, 3, 1, 0).reshape(k * k * c, -1)
        dW = (g2.T @ cols).reshape(self.out_channels, k, k, c).transpose(0, 3, 1, 2)
        db = g2.sum(axis=0)
        dcols = (g2 @ Wt.T).reshape(n, oh, ow, k, k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), [np.ascontiguousarray(dW), db]

    def __repr__(self):
        return f"Conv2d({self.in_channels}, {self.out_channels}, kernel={self.kernel})"


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped (floor division). Ties route to the first maximum."""

    kind = "maxpool2d"

    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"expected (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        if h < self.window or w < self.window:
            raise ShapeError(f"input {tuple(input_shape)} smaller than pool window")
        return (c, h // self.window, w // self.window)

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected (batch, C, H, W), got {x.shape}")
        self.output_shape(x.shape[1:])

    def _offsets(self):
        k = self.window
        return [(i, j) for i in range(k) for j in range(k)]

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.window
        oh, ow = h // k, w // k
        views = [x[:, :, i:oh * k:k, j:ow * k:k] for i, j in self._offsets()]
        out = views[0]
        for v in views[1:]:
            out = np.maximum(out, v)
        # first offset attaining the max takes the whole gradient
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for v in views:
            m = (v == out) & ~taken
            taken |= m
            masks.append(m)
        self._cache = (x.shape, masks)
        return out

    def backward(self, grad):
        (n, c, h, w), masks = self._cached()
        k = self.window
        oh, ow = h // k, w // k
        if grad.shape != (n, c, oh, ow):
            raise ShapeError(f"expected grad {(n, c, oh, ow)}, got {grad.shape}")
        dx = np.zeros((n, c, h, w), dtype=grad.dtype)
        for (i, j), m in zip(self._offsets(), masks):
            dx[:, :, i:oh * k:k, j:ow * k:k] = grad * m
        return dx, []

    def __repr__(self):
        return f"MaxPool2d({self.window})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return x * self._cache

    def backward(self, grad):
        mask = self._cached()
        if grad.shape != mask.shape:
            raise ShapeError(f"expected grad {mask.shape}, got {grad.shape}")
        return grad * mask, []


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._cached()
        if grad.shape != (shape[0], int(np.prod(shape[1:]))):
            raise ShapeError(f"expected grad for input {shape}, got {grad.shape}")
        return grad.reshape(shape), []


class Block:
    """An ordered stack of layers trained as one unit."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return f"Block({self.layers!r})"

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(x)
            except ShapeError as err:
                raise ShapeError(f"layer {i} ({layer!r}): {err}") from None
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, list[list[np.ndarray]]]:
        """Backpropagate ``grad`` through the block.

        Returns the gradient w.r.t. the block input and a per-layer list of
        parameter gradients (empty for parameter-free layers). Parameters are
        not touched.
        """
        param_grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            try:
                grad, pg = layer.backward(grad)
            except (ShapeError, RuntimeError) as err:
                raise type(err)(f"layer {i} ({layer!r}): {err}") from None
            param_grads[i] = pg
        return grad, param_grads

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def flat_grads(self, param_grads: list[list[np.ndarray]]) -> list[np.ndarray]:
        return [g for pg in param_grads for g in pg]

    def set_params(self, values: list[np.ndarray]) -> None:
        values = list(values)
        pos = 0
        for layer in self.layers:
            n = len(layer.params)
            layer.params = values[pos:pos + n]
            pos += n
        if pos != len(values):
            raise ShapeError(f"got {len(values)} tensors, block holds {pos}")

    def copy_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as err:
                raise ShapeError(f"layer {i} ({layer!r}): {err}") from None
        return shape

    def astype(self, dtype) -> "Block":
        """Cast every parameter in place; used for float64 gradient checks."""
        for layer in self.layers:
            if layer.params:
                layer.params = [p.astype(dtype) for p in layer.params]
        return self


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    b, c = logits.shape
    if b < 1:
        raise ValueError("empty batch")
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    log_prob = shifted[rows, labels] - np.log(total[:, 0])
    loss = float(-log_prob.mean())
    grad = exp / total
    grad[rows, labels] -= 1
    grad /= b
    return loss, grad.astype(logits.dtype, copy=False)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], config: OptimizerConfig):
    """In-place ``p -= lr * g`` for every pair; returns ``params``."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
    lr = config.learning_rate
    for p, g in zip(params, grads):
        p -= p.dtype.type(lr) * g
    return params


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer, e.g. ``LayerSpec("dense", (784, 432))``.

    ``args`` are the positional constructor arguments of the layer class.
    """

    kind: str
    args: tuple[int, ...] = ()

    def build(self) -> Layer:
        try:
            cls = LAYER_KINDS[self.kind]
        except KeyError:
            raise ValueError(f"unknown layer kind {self.kind!r}") from None
        return cls(*self.args)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "args": list(self.args)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], tuple(int(a) for a in d.get("args", ())))


LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2d, MaxPool2d, ReLU, Flatten)
}


def init_params(spec: LayerSpec | Layer, rng: np.random.Generator) -> Layer:
    """Build (if given a spec) and initialise a layer.

    Weights are He-normal, std = sqrt(2 / fan_in); biases are zero.
    """
    layer = spec.build() if isinstance(spec, LayerSpec) else spec
    if isinstance(layer, Dense):
        fan_in = layer.in_dim
    elif isinstance(layer, Conv2d):
        fan_in = layer.in_channels * layer.kernel ** 2
    else:
        return layer
    W = rng.standard_normal(layer.W.shape) * np.sqrt(2.0 / fan_in)
    layer.params = [W.astype(DTYPE), np.zeros_like(layer.b, dtype=DTYPE)]
    return layer
