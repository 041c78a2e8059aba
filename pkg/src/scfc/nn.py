"""Small numpy layer stack with hand-written backward passes and L2-regularized SGD.

Tensors are plain ``numpy.ndarray`` objects in float64.  Image tensors use the
``(batch, channels, height, width)`` layout; dense tensors ``(batch, features)``.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)``.  Caches are returned rather than
stored on the layer so that several workers can share one set of weights.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BackwardWithoutForwardError, NonFiniteGradientError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    l2_lambda: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.l2_lambda >= 0:
            raise ValueError(f"l2_lambda must be >= 0, got {self.l2_lambda}")


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer: stateless unless it owns ``params``."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def config(self):
        return {"type": self.kind}


class Conv2D(Layer):
    """Valid (unpadded) 2-D convolution, weights ``(out_ch, in_ch, k, k)``."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        self.params["W"] = glorot_uniform(
            rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out
        )
        self.params["b"] = np.zeros(out_channels)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"conv2d kernel {self.kernel} larger than input {h}x{w}")
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        return (self.out_channels, ho, wo)

    def forward(self, x):
        W, b = self.params["W"], self.params["b"]
        s, k = self.stride, self.kernel
        # (n, c, ho, wo, k, k)
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        y = cols @ W.reshape(self.out_channels, -1).T + b
        y = y.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return y, (x.shape, cols)

    def backward(self, dy, cache):
        x_shape, cols = cache
        W = self.params["W"]
        s, k = self.stride, self.kernel
        n, f, ho, wo = dy.shape
        dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, f)
        dW = (dy_flat.T @ cols).reshape(W.shape)
        db = dy_flat.sum(axis=0)
        dx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.einsum(
                    "nfhw,fc->nchw", dy, W[:, :, i, j]
                )
        return dx, {"W": dW, "b": db}

    def config(self):
        return {
            "type": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
        }


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2x2 needs at least 2x2 input, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        blocks = (
            x[:, :, : 2 * ho, : 2 * wo]
            .reshape(n, c, ho, 2, wo, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, 4)
        )
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, dy, cache):
        x_shape, idx = cache
        n, c, h, w = x_shape
        ho, wo = h // 2, w // 2
        blocks = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, :, : 2 * ho, : 2 * wo] = (
            blocks.reshape(n, c, ho, wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, 2 * ho, 2 * wo)
        )
        return dx, {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, cache):
        return dy * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Dense(Layer):
    """Fully connected layer ``y = x W^T + b`` with ``W`` of shape ``(out, in)``."""

    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = glorot_uniform(
            rng, (out_features, in_features), in_features, out_features
        )
        self.params["b"] = np.zeros(out_features)

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(
                f"dense expects ({self.in_features},), got {tuple(input_shape)}"
            )
        return (self.out_features,)

    def forward(self, x):
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, dy, cache):
        x = cache
        return dy @ self.params["W"], {"W": dy.T @ x, "b": dy.sum(axis=0)}

    def config(self):
        return {"type": self.kind, "in_features": self.in_features, "out_features": self.out_features}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        # split by sign so exp never overflows
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    def backward(self, dy, cache):
        y = cache
        return dy * y * (1.0 - y), {}


_LAYER_TYPES = {
    cls.kind: cls for cls in (Conv2D, MaxPool2x2, ReLU, Flatten, Dense, Sigmoid)
}


def layer_from_config(cfg, rng=None):
    cfg = dict(cfg)
    cls = _LAYER_TYPES[cfg.pop("type")]
    if cls in (Conv2D, Dense):
        return cls(rng=rng, **cfg)
    return cls()


class LayerStack:
    """An ordered sequence of layers with a fixed per-sample input shape.

    ``forward`` keeps the activation caches of the most recent call so that
    ``backward`` can be invoked afterwards; ``predict`` runs the same
    computation without touching that state.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
            except ShapeError as err:
                raise ShapeError(f"layer {i} ({layer.kind}): {err}", layer_index=i) from None
        self._caches = None

    @property
    def output_shape(self):
        return self.shapes[-1]

    def _run(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                f"expected per-sample shape {self.input_shape}, got {x.shape[1:]}",
                layer_index=0,
            )
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def forward(self, x):
        y, self._caches = self._run(x)
        return y

    def predict(self, x):
        return self._run(x)[0]

    def backward(self, dy):
        """Return ``(dx, grads)``; ``grads[i]`` maps param name to gradient for layer i."""
        if self._caches is None:
            raise BackwardWithoutForwardError("backward called without a preceding forward")
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, grads[i] = self.layers[i].backward(dy, self._caches[i])
        return dy, grads

    def clear_cache(self):
        self._caches = None

    def weight_arrays(self):
        """Regularized arrays only (biases excluded)."""
        return [layer.params["W"] for layer in self.layers if "W" in layer.params]

    def l2_norm_sq(self):
        return float(sum(np.sum(w * w) for w in self.weight_arrays()))

    def config(self):
        return {"input_shape": list(self.input_shape), "layers": [l.config() for l in self.layers]}

    @classmethod
    def from_config(cls, cfg, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(cfg["input_shape"], [layer_from_config(c, rng) for c in cfg["layers"]])

    def state(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out[f"{prefix}{i}.{name}"] = arr
        return out

    def load_state(self, arrays, prefix=""):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                arr = arrays[f"{prefix}{i}.{name}"]
                if arr.shape != layer.params[name].shape:
                    raise ShapeError(f"checkpoint shape mismatch at layer {i}.{name}", layer_index=i)
                layer.params[name] = np.array(arr, dtype=np.float64)


def encoder_stack(input_hw, rng):
    """Shared encoder: two conv blocks, then FC 64 and FC 32 (all ReLU)."""
    h, w = input_hw
    layers = [
        Conv2D(1, 8, 3, 1, rng=rng),
        ReLU(),
        MaxPool2x2(),
        Conv2D(8, 16, 3, 1, rng=rng),
        ReLU(),
        MaxPool2x2(),
        Flatten(),
    ]
    flat = LayerStack((1, h, w), layers).output_shape[0]
    layers += [Dense(flat, 64, rng=rng), ReLU(), Dense(64, 32, rng=rng), ReLU()]
    return LayerStack((1, h, w), layers)


def sgd_step(stack, grads, cfg):
    """In-place ``w <- w - lr * (g + 2*lambda*w)``; biases get plain SGD."""
    if len(grads) != len(stack.layers):
        raise ShapeError(f"got {len(grads)} gradient groups for {len(stack.layers)} layers")
    for i, (layer, g) in enumerate(zip(stack.layers, grads)):
        for name, arr in (g or {}).items():
            if arr.shape != layer.params[name].shape:
                raise ShapeError(f"gradient shape mismatch at layer {i}.{name}", layer_index=i)
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradientError(
                    f"non-finite gradient at layer {i} ({layer.kind}.{name})", layer_index=i
                )
    lr, lam = cfg.learning_rate, cfg.l2_lambda
    for layer, g in zip(stack.layers, grads):
        for name, arr in (g or {}).items():
            p = layer.params[name]
            if name == "W":
                p -= lr * (arr + 2.0 * lam * p)
            else:
                p -= lr * arr
    stack.clear_cache()
    return stack


def save_checkpoint(path, stacks, sgd=None, meta=None):
    """Write named stacks to an ``.npz`` file; float64 values round-trip exactly."""
    header = {
        "version": CHECKPOINT_VERSION,
        "stacks": {name: s.config() for name, s in stacks.items()},
        "sgd": asdict(sgd) if sgd is not None else None,
        "meta": meta or {},
    }
    arrays = {}
    for name, s in stacks.items():
        arrays.update(s.state(prefix=f"{name}/"))
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return Path(path)


def load_checkpoint(path):
    """Return ``(stacks, sgd_config_or_None, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        stacks = {}
        for name, cfg in header["stacks"].items():
            s = LayerStack.from_config(cfg)
            s.load_state(data, prefix=f"{name}/")
            stacks[name] = s
    sgd = SgdConfig(**header["sgd"]) if header["sgd"] else None
    return stacks, sgd, header["meta"]
