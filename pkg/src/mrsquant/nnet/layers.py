"""Layers of the 1-D CNN with exact backward passes.

Activations are ``(batch, length, channels)`` arrays (channels last), which
lets a stride-1 convolution run as one matrix product per kernel tap over
the flattened, zero-padded batch. Layers follow the
dtype of their parameters; use float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    """Base layer: ``forward`` caches what ``backward`` needs."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        pass


class Conv1D(Layer):
    """Cross-correlation with bias and zero padding ``kernel // 2`` ("same" at stride 1).

    Weights are stored as ``(out_ch, in_ch, kernel)``.
    """

    kind = "conv1d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise ShapeError(f"conv kernel must be odd, got {kernel}")
        if stride < 1:
            raise ShapeError(f"conv stride must be >= 1, got {stride}")
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.pad = kernel // 2

    def config(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride}

    def out_shape(self, in_shape):
        length, ch = in_shape
        if ch != self.in_ch:
            raise ShapeError(f"conv1d expects {self.in_ch} input channels, got {ch}")
        if length < self.kernel:
            raise ShapeError(f"conv1d input length {length} shorter than kernel {self.kernel}")
        return ((length + 2 * self.pad - self.kernel) // self.stride + 1, self.out_ch)

    def init_params(self, rng, dtype):
        fan_in = self.in_ch * self.kernel
        bound = np.sqrt(1.0 / fan_in)
        self.params["w"] = rng.uniform(-bound, bound,
                                       (self.out_ch, self.in_ch, self.kernel)).astype(dtype)
        self.params["b"] = np.zeros(self.out_ch, dtype=dtype)

    def forward(self, x):
        b, length, ch = x.shape
        l_out, _ = self.out_shape((length, ch))
        xp = np.pad(x, ((0, 0), (self.pad, self.pad), (0, 0)))
        w = self.params["w"]
        if self.stride == 1 and ch >= 8:
            # tap-wise products on the flattened padded batch: row r of the
            # output sums rows r..r+k-1 of the input, no im2col copy needed
            flat = xp.reshape(-1, ch)
            rows = flat.shape[0] - self.kernel + 1
            taps = np.ascontiguousarray(w.transpose(2, 1, 0))  # (kernel, in, out)
            out = np.empty((flat.shape[0], self.out_ch), dtype=x.dtype)
            acc = out[:rows]
            np.matmul(flat[:rows], taps[0], out=acc)
            for j in range(1, self.kernel):
                acc += flat[j:j + rows] @ taps[j]
            out[rows:] = 0
            out = out.reshape(b, length + 2 * self.pad, self.out_ch)[:, :l_out]
            out += self.params["b"]
            self._cache = ("taps", flat, x.shape, l_out)
            return out
        win = sliding_window_view(xp, self.kernel, axis=1)[:, ::self.stride][:, :l_out]
        cols = win.reshape(b * l_out, ch * self.kernel)
        out = cols @ w.reshape(self.out_ch, -1).T
        out += self.params["b"]
        self._cache = ("im2col", cols, x.shape, l_out)
        return out.reshape(b, l_out, self.out_ch)

    def backward(self, grad, need_input_grad: bool = True):
        mode, data, (b, length, ch), l_out = self._cache
        w = self.params["w"]
        self.grads["b"] = grad.sum(axis=(0, 1))
        if mode == "taps":
            lp = length + 2 * self.pad
            gfull = np.zeros((b, lp, self.out_ch), dtype=grad.dtype)
            gfull[:, :l_out] = grad
            rows = data.shape[0] - self.kernel + 1
            g = gfull.reshape(-1, self.out_ch)[:rows]
            gt = np.ascontiguousarray(g.T)
            gw = np.stack([gt @ data[j:j + rows] for j in range(self.kernel)], axis=-1)
            self.grads["w"] = gw
            if not need_input_grad:
                return None
            taps = np.ascontiguousarray(w.transpose(2, 0, 1))  # (kernel, out, in)
            dflat = np.zeros_like(data)
            for j in range(self.kernel):
                dflat[j:j + rows] += g @ taps[j]
            return dflat.reshape(b, lp, ch)[:, self.pad:self.pad + length]
        g2 = grad.reshape(b * l_out, self.out_ch)
        wmat = w.reshape(self.out_ch, -1)
        self.grads["w"] = (g2.T @ data).reshape(w.shape)
        if not need_input_grad:
            return None
        dcols = (g2 @ wmat).reshape(b, l_out, ch, self.kernel)
        dxp = np.zeros((b, length + 2 * self.pad, ch), dtype=grad.dtype)
        span = self.stride * (l_out - 1) + 1
        for j in range(self.kernel):
            dxp[:, j:j + span:self.stride, :] += dcols[..., j]
        return dxp[:, self.pad:self.pad + length, :]


class CReLU(Layer):
    """``concat(r(x), -r(-x))`` along channels with ``r(x) = max(0, x)``.

    The first half carries the positive part, the second half ``min(x, 0)``.
    """

    kind = "crelu"

    def out_shape(self, in_shape):
        *lead, ch = in_shape
        return (*lead, 2 * ch)

    def forward(self, x):
        self._x = x
        return np.concatenate([np.maximum(x, 0), np.minimum(x, 0)], axis=-1)

    def backward(self, grad):
        x = self._x
        ch = x.shape[-1]
        return grad[..., :ch] * (x > 0) + grad[..., ch:] * (x < 0)


class MaxPool1D(Layer):
    """Non-overlapping max pooling; ties route the gradient to the first maximum."""

    kind = "maxpool1d"

    def __init__(self, width: int):
        super().__init__()
        if width < 1:
            raise ShapeError(f"pool width must be >= 1, got {width}")
        self.width = width

    def config(self):
        return {"kind": self.kind, "width": self.width}

    def out_shape(self, in_shape):
        length, ch = in_shape
        if length % self.width:
            raise ShapeError(f"pool width {self.width} does not divide length {length}")
        return (length // self.width, ch)

    def forward(self, x):
        b, length, ch = x.shape
        self.out_shape((length, ch))
        win = x.reshape(b, length // self.width, self.width, ch)
        best = win[:, :, 0]
        for j in range(1, self.width):
            best = np.maximum(best, win[:, :, j])
        self._cache = (win, best)
        return best

    def backward(self, grad):
        win, best = self._cache
        hit = win == best[:, :, None, :]
        if np.count_nonzero(hit) != best.size:
            # exact ties: keep only the first maximum of each window
            hit &= np.cumsum(hit, axis=2) == 1
        out = hit * grad[:, :, None, :]
        return out.reshape(win.shape[0], -1, win.shape[-1])


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    """Fully connected layer ``x @ w + b`` with ``w`` of shape ``(in, out)``."""

    kind = "fc"

    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out

    def config(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ShapeError(f"fc expects input ({self.n_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def init_params(self, rng, dtype):
        bound = np.sqrt(1.0 / self.n_in)
        self.params["w"] = rng.uniform(-bound, bound, (self.n_in, self.n_out)).astype(dtype)
        self.params["b"] = np.zeros(self.n_out, dtype=dtype)

    def forward(self, x):
        if x.shape[1:] != (self.n_in,):
            raise ShapeError(f"fc expects input ({self.n_in},), got {x.shape[1:]}")
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, grad):
        self.grads["w"] = self._x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["w"].T


def layer_from_config(cfg: dict) -> Layer:
    kind = cfg["kind"]
    if kind == "conv1d":
        return Conv1D(cfg["in_ch"], cfg["out_ch"], cfg["kernel"], cfg.get("stride", 1))
    if kind == "crelu":
        return CReLU()
    if kind == "maxpool1d":
        return MaxPool1D(cfg["width"])
    if kind == "flatten":
        return Flatten()
    if kind == "fc":
        return Dense(cfg["in"], cfg["out"])
    raise ValueError(f"unknown layer kind {kind!r}")


def mse_loss(pred: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over outputs and batch, and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    label = np.asarray(label, dtype=pred.dtype)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction shape {pred.shape} != label shape {label.shape}")
    diff = pred - label
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
