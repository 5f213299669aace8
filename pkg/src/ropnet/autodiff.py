"""Tape-based reverse-mode differentiation over model graphs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import CapabilityError, NumericError, ParameterError, ShapeError
from .model import LayerSpec, ModelSpec, apply_layer, check_batch, is_trainable


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    layer: LayerSpec | None
    value: np.ndarray
    cache: dict = field(default_factory=dict)


@dataclass
class Tape:
    """Forward record; node 0 is the input leaf and every node only refers to
    strictly earlier nodes."""

    nodes: list
    output: int
    params: dict
    mode: str

    def batch_statistics(self):
        """``{bn_layer_name: (mean, var)}`` for BN layers run in train mode."""
        return {
            node.layer.name: (node.cache["mean"], node.cache["var"])
            for node in self.nodes
            if node.op == "batch_norm" and node.cache.get("mode") == "train"
        }


class GradientSet(dict):
    """Parameter name -> gradient; ``input`` holds d(output)/d(input)."""

    input: np.ndarray | None = None


def forward_record(spec: ModelSpec, batch, params, mode="train"):
    if not spec.layers:
        raise CapabilityError(f"model {spec.name!r} has an empty graph")
    for layer in spec.layers:
        if layer.kind not in _BACKWARD:
            raise CapabilityError(f"no gradient rule for layer kind {layer.kind!r}")
    x = check_batch(spec, batch)
    nodes = [Node(0, "input", (), None, x)]
    for layer in spec.layers:
        prev = nodes[-1]
        y, cache = apply_layer(layer, prev.value, params, mode)
        nodes.append(Node(len(nodes), layer.kind, (prev.id,), layer, y, cache))
    return nodes[-1].value, Tape(nodes, nodes[-1].id, params, mode)


def backward(tape: Tape, seed):
    out = tape.nodes[tape.output].value
    seed = np.asarray(seed, dtype=out.dtype)
    if seed.shape != out.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {out.shape}")
    # Contributions per node are summed in ascending consumer id order.
    pending = {tape.output: {tape.output: seed}}
    grads = GradientSet()
    for node in reversed(tape.nodes):
        contribs = pending.pop(node.id, None)
        if contribs is None:
            continue
        g = None
        for consumer in sorted(contribs):
            g = contribs[consumer] if g is None else g + contribs[consumer]
        if node.op == "input":
            grads.input = g
            continue
        input_grads, param_grads = _BACKWARD[node.op](node, g, tape.params)
        for name, pg in param_grads.items():
            if is_trainable(name):
                grads[name] = pg
        for src, ig in zip(node.inputs, input_grads):
            pending.setdefault(src, {})[node.id] = ig
    return grads


# --------------------------------------------------------------------------
# gradient rules: (node, grad_out, params) -> (input grads, param grads)


def _conv_backward(node, g, params):
    layer = node.layer
    x = node.cache["x"]
    w = params[f"{layer.name}.weight"].astype(x.dtype, copy=False)
    cfg = layer.conv_config()
    pad_t, pad_l = cfg.pads(x.shape[1], x.shape[2])
    g = np.ascontiguousarray(g)
    gx = np.empty_like(x)
    _kernels.conv2d_grad_input(g, np.ascontiguousarray(w.transpose(0, 1, 3, 2)), cfg.stride, pad_t, pad_l, gx)
    gw = np.empty(w.shape, dtype=x.dtype)
    _kernels.conv2d_grad_weight(x, g, cfg.stride, pad_t, pad_l, gw)
    return (gx,), {f"{layer.name}.weight": gw}


def _depthwise_backward(node, g, params):
    layer = node.layer
    x = node.cache["x"]
    w = np.ascontiguousarray(params[f"{layer.name}.weight"].astype(x.dtype, copy=False))
    cfg = layer.conv_config(x.shape[-1])
    pad_t, pad_l = cfg.pads(x.shape[1], x.shape[2])
    g = np.ascontiguousarray(g)
    gx = np.empty_like(x)
    _kernels.depthwise_grad_input(g, w, cfg.stride, pad_t, pad_l, gx)
    gw = np.empty(w.shape, dtype=x.dtype)
    _kernels.depthwise_grad_weight(x, g, cfg.stride, pad_t, pad_l, gw)
    return (gx,), {f"{layer.name}.weight": gw}


def _batch_norm_backward(node, g, params):
    n = node.layer.name
    c = node.cache
    x, inv_std = c["x"], c["inv_std"]
    gamma = params[f"{n}.gamma"].astype(x.dtype, copy=False)
    x_hat = (x - c["mean"]) * inv_std
    axes = tuple(range(x.ndim - 1))
    g_beta = g.sum(axis=axes)
    g_gamma = (g * x_hat).sum(axis=axes)
    if c["mode"] == "train":
        m = x.size // x.shape[-1]
        gx = (gamma * inv_std / m) * (m * g - g_beta - x_hat * g_gamma)
    else:
        gx = g * (gamma * inv_std)
    return (gx,), {f"{n}.gamma": g_gamma, f"{n}.beta": g_beta}


def _relu_backward(node, g, params):
    return (g * (node.cache["x"] > 0),), {}


def _sigmoid_backward(node, g, params):
    y = node.cache["y"]
    return (g * y * (1 - y),), {}


def _flatten_backward(node, g, params):
    return (g.reshape(node.cache["shape"]),), {}


def _pool_backward(node, g, params):
    n, h, w, ch = node.cache["shape"]
    gx = np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, ch)).copy()
    return (gx,), {}


def _dense_backward(node, g, params):
    from .tensor import matmul

    n = node.layer.name
    x = node.cache["x"]
    w = params[f"{n}.weight"].astype(x.dtype, copy=False)
    gx = matmul(g, np.ascontiguousarray(w.T))
    gw = matmul(np.ascontiguousarray(x.T), g)
    return (gx,), {f"{n}.weight": gw, f"{n}.bias": g.sum(axis=0)}


_BACKWARD = {
    "conv": _conv_backward,
    "depthwise_conv": _depthwise_backward,
    "batch_norm": _batch_norm_backward,
    "relu": _relu_backward,
    "sigmoid": _sigmoid_backward,
    "flatten": _flatten_backward,
    "global_avg_pool": _pool_backward,
    "dense": _dense_backward,
}


# --------------------------------------------------------------------------
# finite-difference verification


def relu_signature(tape: Tape) -> bytes:
    """Packed on/off pattern of every ReLU in ``tape``; equal signatures mean
    two evaluations sit on the same smooth piece of the network."""
    masks = [np.packbits(node.cache["x"] > 0) for node in tape.nodes if node.op == "relu"]
    return b"".join(m.tobytes() for m in masks)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple | None
    tolerance: float
    checked: int
    kink_retries: int = 0

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def grad_check(f, params, analytic, h=1e-5, tolerance=1e-4, max_coords=128, seed=0, min_h=1e-8):
    """Compare ``analytic`` gradients with central differences of ``f``.

    ``f`` maps a ``{name: array}`` dict to a scalar, or to ``(scalar,
    signature)`` where the signature identifies the smooth piece of a
    piecewise-smooth objective (see :func:`relu_signature`).  When the two
    probes of a coordinate land on different pieces the difference quotient
    straddles a kink, so that coordinate is re-probed with step ``h/10``
    (down to ``min_h``).

    Parameters larger than ``max_coords`` are checked on a seeded random
    subsample.  Relative error uses ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ParameterError(f"h must be > 0, got {h}")
    rng = np.random.default_rng(seed)
    theta = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate():
        result = f(theta)
        value, signature = result if isinstance(result, tuple) else (result, None)
        value = float(value)
        if not np.isfinite(value):
            raise NumericError(f"objective returned non-finite value {value}")
        return value, signature

    evaluate()
    worst = (0.0, None, None)
    checked = retries = 0
    for name in analytic:
        p = theta[name]
        flat_idx = np.arange(p.size)
        if p.size > max_coords:
            flat_idx = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            old = p[idx]
            step = h
            while True:
                p[idx] = old + step
                fp, sp = evaluate()
                p[idx] = old - step
                fm, sm = evaluate()
                p[idx] = old
                if sp == sm or step / 10 < min_h:
                    break
                step /= 10
                retries += 1
            numeric = (fp - fm) / (2 * step)
            a = a_flat[fi]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if rel > worst[0] or worst[1] is None:
                worst = (rel, name, tuple(int(i) for i in idx))
    return GradCheckReport(worst[0], worst[1], worst[2], tolerance, checked, retries)
