"""Network specification, parameter container and the MRSW weights format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import Conv1D, CReLU, Layer, MaxPool1D, ShapeError, layer_from_config

MAGIC = b"MRSW"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


@dataclass
class NetworkSpec:
    layers: list[dict]
    input_length: int
    output_dim: int
    input_channels: int = 2

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Activation shape (without batch) after each layer, input first."""
        shapes = [(self.input_length, self.input_channels)]
        for cfg in self.layers:
            shapes.append(layer_from_config(cfg).out_shape(shapes[-1]))
        if shapes[-1] != (self.output_dim,):
            raise ShapeError(f"network ends in shape {shapes[-1]}, expected ({self.output_dim},)")
        return shapes

    def to_json(self) -> dict:
        return {"layers": self.layers, "input_length": self.input_length,
                "output_dim": self.output_dim, "input_channels": self.input_channels}

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls([dict(c) for c in d["layers"]], d["input_length"], d["output_dim"],
                   d.get("input_channels", 2))


def default_spec(input_length: int, output_dim: int, widths=(16, 32, 64), kernel: int = 9,
                 pool: int = 4, hidden: int = 512) -> NetworkSpec:
    """Conv -> CReLU -> MaxPool, three times, then FC(hidden) -> FC(output_dim).

    Each CReLU doubles the channel count, so the next convolution takes
    twice the previous width.
    """
    layers, ch, length = [], 2, input_length
    for w in widths:
        layers += [{"kind": "conv1d", "in_ch": ch, "out_ch": w, "kernel": kernel, "stride": 1},
                   {"kind": "crelu"},
                   {"kind": "maxpool1d", "width": pool}]
        ch, length = 2 * w, length // pool
    layers += [{"kind": "flatten"},
               {"kind": "fc", "in": ch * length, "out": hidden},
               {"kind": "fc", "in": hidden, "out": output_dim}]
    spec = NetworkSpec(layers, input_length, output_dim)
    spec.shape_chain()
    return spec


@dataclass
class Network:
    spec: NetworkSpec
    layers: list[Layer] = field(default_factory=list)
    debug: bool = False

    @classmethod
    def build(cls, spec: NetworkSpec, seed: int = 0, dtype=np.float32, debug=False) -> "Network":
        spec.shape_chain()
        rng = np.random.default_rng(seed)
        layers = [layer_from_config(c) for c in spec.layers]
        for layer in layers:
            layer.init_params(rng, dtype)
        return cls(spec, layers, debug)

    def __post_init__(self):
        # max pooling commutes exactly with CReLU (both halves are monotone
        # maps), so each CReLU -> MaxPool pair runs pool-first: same values,
        # same gradients, a quarter of the activation work
        order = list(range(len(self.layers)))
        for i in range(len(order) - 1):
            if (isinstance(self.layers[i], CReLU)
                    and isinstance(self.layers[i + 1], MaxPool1D)):
                order[i], order[i + 1] = order[i + 1], order[i]
        self._order = order

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{k}", layer.params[k])
                for i, layer in enumerate(self.layers) for k in sorted(layer.params)]

    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``x`` is ``(batch, length, 2)``; returns ``(batch, output_dim)``."""
        expect = (self.spec.input_length, self.spec.input_channels)
        if x.shape[1:] != expect:
            raise ShapeError(f"network input must be (batch, {expect[0]}, {expect[1]}), "
                             f"got {x.shape}")
        for i in self._order:
            layer = self.layers[i]
            x = layer.forward(x)
            if self.debug and not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activation after {layer.kind}")
        return x

    def backward(self, grad: np.ndarray, need_input_grad: bool = False) -> np.ndarray | None:
        """Backpropagate ``grad``; the input gradient is skipped unless requested."""
        for pos in range(len(self._order) - 1, -1, -1):
            layer = self.layers[self._order[pos]]
            if pos == 0 and not need_input_grad and isinstance(layer, Conv1D):
                return layer.backward(grad, need_input_grad=False)
            grad = layer.backward(grad)
        return grad


def save_weights(net: Network, path: str | Path) -> None:
    blob = json.dumps(net.spec.to_json(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for layer in net.layers:
            for key in ("w", "b"):
                if key in layer.params:
                    fh.write(np.ascontiguousarray(layer.params[key], dtype="<f4").tobytes())


def load_weights(path: str | Path, dtype=np.float32) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: not a weights file")
    if len(raw) < 12:
        raise WeightsFormatError(f"{path}: truncated header")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise WeightsFormatError(f"{path}: weights version {version}, expected {VERSION}")
    spec = NetworkSpec.from_json(json.loads(raw[12:12 + blob_len].decode("utf-8")))
    net = Network.build(spec, dtype=dtype)
    off = 12 + blob_len
    for layer in net.layers:
        for key in ("w", "b"):
            if key in layer.params:
                shape = layer.params[key].shape
                n = int(np.prod(shape))
                if len(raw) < off + 4 * n:
                    raise WeightsFormatError(f"{path}: truncated weight block")
                layer.params[key] = np.frombuffer(raw, "<f4", n, off).reshape(shape).astype(dtype)
                off += 4 * n
    if off != len(raw):
        raise WeightsFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return net
