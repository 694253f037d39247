"""Central finite-difference checks for the network layers (float64)."""

import numpy as np

from mrsquant.nnet.layers import layer_from_config, mse_loss

KINDS = ("conv1d", "crelu", "maxpool1d", "fc", "mse")
H = 1e-6


def rel_err(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f, x, h=H):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        dn = f()
        flat[i] = old
        gflat[i] = (up - dn) / (2 * h)
    return g


def random_case(kind, rng):
    """Layer config and an input array with a random shape for ``kind``."""
    b = int(rng.integers(1, 4))
    if kind == "conv1d":
        ch = int(rng.choice([1, 2, 3, 8, 10]))
        k = int(rng.choice([1, 3, 5, 7]))
        stride = int(rng.choice([1, 2]))
        length = int(rng.integers(k, 20))
        cfg = {"kind": kind, "in_ch": ch, "out_ch": int(rng.integers(1, 6)),
               "kernel": k, "stride": stride}
        x = rng.normal(size=(b, length, ch))
    elif kind == "crelu":
        shape = (b, int(rng.integers(1, 12)), int(rng.integers(1, 6)))
        # keep inputs away from the kink at zero
        x = rng.choice([-1.0, 1.0], size=shape) * (0.05 + rng.random(shape))
        cfg = {"kind": kind}
    elif kind == "maxpool1d":
        width = int(rng.integers(1, 5))
        length = width * int(rng.integers(1, 6))
        ch = int(rng.integers(1, 5))
        # distinct values spaced far beyond the step size: no ties inside a window
        x = rng.permutation(b * length * ch).reshape(b, length, ch) * 0.01
        x = x + rng.uniform(-1e-3, 1e-3, x.shape)
        cfg = {"kind": kind, "width": width}
    elif kind == "fc":
        n_in, n_out = int(rng.integers(1, 30)), int(rng.integers(1, 10))
        cfg = {"kind": kind, "in": n_in, "out": n_out}
        x = rng.normal(size=(b, n_in))
    else:
        raise ValueError(kind)
    return cfg, x


def check_layer(kind, rng):
    """Max relative error over the input, weight and bias gradients of one random case."""
    if kind == "mse":
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 22)))
        pred, label = rng.normal(size=shape), rng.normal(size=shape)
        _, g = mse_loss(pred, label)
        return rel_err(g, numeric_grad(lambda: mse_loss(pred, label)[0], pred))
    cfg, x = random_case(kind, rng)
    layer = layer_from_config(cfg)
    layer.init_params(rng, np.float64)
    if "b" in layer.params:
        layer.params["b"] = rng.normal(size=layer.params["b"].shape)
    out = layer.forward(x)
    proj = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(layer.forward(x) * proj))

    layer.forward(x)
    gx = layer.backward(proj)
    grads = {k: v.copy() for k, v in layer.grads.items()}
    errs = [rel_err(gx, numeric_grad(loss, x))]
    for key, p in layer.params.items():
        errs.append(rel_err(grads[key], numeric_grad(loss, p)))
    return max(errs)
