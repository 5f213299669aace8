"""Binary cross-entropy and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, ValidationError

CLAMP_EPS = 1e-7


def _check_labels(y, yhat):
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ShapeError(f"labels {y.shape} and predictions {yhat.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    if not np.all(np.isfinite(yhat)):
        raise NumericError("predictions must be finite")
    return y, yhat


def bce_loss(y, yhat, eps=CLAMP_EPS) -> float:
    """Mean negative log-likelihood of Bernoulli labels ``y`` under ``yhat``.

    Predictions are clamped to ``[eps, 1 - eps]`` before taking logs.
    """
    y, yhat = _check_labels(y, yhat)
    p = np.clip(yhat.astype(np.float64), eps, 1 - eps)
    y = y.astype(np.float64)
    per_example = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(per_example.mean())


def bce_grad(y, yhat, eps=CLAMP_EPS):
    """d(bce_loss)/d(yhat); zero wherever the clamp is active."""
    y, yhat = _check_labels(y, yhat)
    p = yhat.astype(np.float64)
    inside = (p > eps) & (p < 1 - eps)
    pc = np.clip(p, eps, 1 - eps)
    g = np.where(inside, (pc - y) / (pc * (1 - pc)), 0.0) / y.size
    return g.astype(yhat.dtype if yhat.dtype.kind == "f" else np.float64)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Refuses the whole step (nothing mutates) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name}")
        if np.shape(g) != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {np.shape(g)} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step refused")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** state.t
    correction2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
