"""Mini-batch training with Adam under a step learning-rate policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..datagen import Dataset
from .layers import mse_loss
from .network import Network, NetworkSpec
from .optim import Adam, step_lr


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 20_000
    batch_size: int = 64
    lr0: float = 1e-3
    gamma: float = 0.5
    step_iters: int | None = None  # None: max_iters // 8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 500
    eval_max: int | None = 2000  # validation samples scored per evaluation

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.max_iters < 1 or self.batch_size < 1:
            raise ValueError("max_iters and batch_size must be >= 1")
        if self.step_iters is not None and self.step_iters < 1:
            raise ValueError("step_iters must be >= 1")

    @property
    def step(self) -> int:
        return self.step_iters or max(1, self.max_iters // 8)

    def lr(self, iteration: int) -> float:
        return step_lr(iteration, self.lr0, self.gamma, self.step)


@dataclass
class LearningCurve:
    iterations: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def add(self, it: int, train: float, val: float) -> None:
        self.iterations.append(it)
        self.train_loss.append(train)
        self.val_loss.append(val)

    def rows(self):
        return list(zip(self.iterations, self.train_loss, self.val_loss))


def as_arrays(ds: Dataset, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Network inputs ``(count, N, 2)`` and labels ``(count, M + 1)``."""
    x = np.empty(ds.signals.shape + (2,), dtype=dtype)
    x[..., 0] = ds.signals.real
    x[..., 1] = ds.signals.imag
    return x, ds.labels.astype(dtype)


def forward_batched(net: Network, x: np.ndarray, batch: int = 256) -> np.ndarray:
    return np.concatenate([net.forward(x[i:i + batch]) for i in range(0, len(x), batch)])


def evaluate_loss(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return math.nan
    pred = forward_batched(net, x)
    return mse_loss(pred, y)[0]


def train(spec: NetworkSpec, train_data: Dataset | tuple, val_data: Dataset | tuple | None,
          cfg: TrainConfig, progress: Callable[[int, float, float], None] | None = None,
          ) -> tuple[Network, LearningCurve]:
    """Train a freshly initialised network; deterministic for a given ``cfg.seed``.

    ``train_data``/``val_data`` are datasets or ``(inputs, labels)`` array pairs.
    """
    xt, yt = train_data if isinstance(train_data, tuple) else as_arrays(train_data)
    if val_data is None:
        xv, yv = xt[:0], yt[:0]
    else:
        xv, yv = val_data if isinstance(val_data, tuple) else as_arrays(val_data)
    if yt.shape[1] != spec.output_dim:
        raise ValueError(f"labels have {yt.shape[1]} outputs, network has {spec.output_dim}")
    if len(xt) == 0:
        raise ValueError("empty training set")
    if cfg.eval_max is not None:
        xv, yv = xv[:cfg.eval_max], yv[:cfg.eval_max]

    net = Network.build(spec, seed=cfg.seed, dtype=xt.dtype)
    params = [p for _, p in net.parameters()]
    opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    curve = LearningCurve()
    bs = min(cfg.batch_size, len(xt))
    order, pos = rng.permutation(len(xt)), 0
    window, ema, best_ema = [], None, math.inf

    for it in range(cfg.max_iters):
        if pos + bs > len(xt):
            order, pos = rng.permutation(len(xt)), 0
        idx = np.sort(order[pos:pos + bs])
        pos += bs
        pred = net.forward(xt[idx])
        loss, grad = mse_loss(pred, yt[idx])
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at iteration {it}")
        net.backward(grad)
        opt.step(params, net.gradients(), cfg.lr(it))
        window.append(loss)
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        best_ema = min(best_ema, ema)
        if it >= 100 and ema > 100 * best_ema:
            raise TrainingDivergedError(
                f"smoothed loss {ema:.3g} grew 100x over its minimum {best_ema:.3g}")
        done = it + 1
        if done % cfg.eval_every == 0 or done == cfg.max_iters:
            val = evaluate_loss(net, xv, yv)
            curve.add(done, float(np.mean(window)), val)
            window = []
            if progress:
                progress(done, curve.train_loss[-1], val)
    return net, curve


def predict(net: Network, signals: np.ndarray) -> np.ndarray:
    """Amplitude estimates for complex signals ``(N,)`` or ``(count, N)``, clamped at 0."""
    signals = np.asarray(signals)
    single = signals.ndim == 1
    if single:
        signals = signals[None]
    dtype = net.layers[0].params["w"].dtype if net.layers[0].params else np.float32
    x = np.empty(signals.shape + (2,), dtype=dtype)
    x[..., 0] = signals.real
    x[..., 1] = signals.imag
    out = np.maximum(forward_batched(net, x), 0)
    return out[0] if single else out
