"""Vector geometry and probability primitives shared by the other modules.

Everything here is a pure function over 1-D float64 arrays. Divergences use
the natural logarithm (values in nats), so the Jensen-Shannon divergence is
bounded by ln 2. Probabilities are floored at ``CLAMP_EPS`` inside
logarithms, which keeps divergences finite at exact zeros; vectors with norm
at or below ``NORM_EPS`` are rejected as zero.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionMismatch, InvalidTemperature, ZeroVector

NORM_EPS = 1e-12
CLAMP_EPS = 1e-12


def as_vector(values) -> np.ndarray:
    """Coerce ``values`` to a non-empty, finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    return v


def _clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, CLAMP_EPS))


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving its direction."""
    v = as_vector(v)
    norm = float(np.linalg.norm(v))
    if norm <= NORM_EPS:
        raise ZeroVector(f"cannot normalize a vector with norm {norm!r}")
    return v / norm


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cosine similarity needs equal dims, got {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise ZeroVector("cosine similarity is undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def cosine_gradient(m, x) -> np.ndarray:
    """Gradient of cos(m, x) with respect to x; m is treated as a constant.

    d/dx cos(m, x) = m / (|m||x|) - cos(m, x) * x / |x|^2
    """
    m = as_vector(m)
    x = as_vector(x)
    if m.shape != x.shape:
        raise DimensionMismatch(f"dimension mismatch: {m.shape} vs {x.shape}")
    nm = float(np.linalg.norm(m))
    nx = float(np.linalg.norm(x))
    if nm <= NORM_EPS or nx <= NORM_EPS:
        raise ZeroVector("cosine gradient is undefined for zero vectors")
    c = float(np.dot(m, x) / (nm * nx))
    return m / (nm * nx) - c * x / (nx * nx)


def _check_temperature(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise InvalidTemperature(f"temperature must be positive and finite, got {tau!r}")
    return tau


def temperature_softmax(scores, tau: float) -> np.ndarray:
    """Softmax of scores/tau, computed with max-subtraction for stability."""
    tau = _check_temperature(tau)
    s = as_vector(scores)
    z = (s - float(np.max(s))) / tau
    e = np.exp(z)
    return e / float(np.sum(e))


def log_softmax(scores) -> np.ndarray:
    """Row of log-probabilities for softmax(scores); exact where softmax underflows."""
    s = as_vector(scores)
    z = s - float(np.max(s))
    return z - np.log(float(np.sum(np.exp(z))))


def softmax_vjp(probs, grad_probs) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the pre-softmax scores.

    For p = softmax(z):  dL/dz_i = p_i * (g_i - sum_j p_j g_j).
    """
    p = as_vector(probs)
    g = as_vector(grad_probs)
    if p.shape != g.shape:
        raise DimensionMismatch(f"dimension mismatch: {p.shape} vs {g.shape}")
    return p * (g - float(np.dot(p, g)))


def sigmoid(z: float) -> float:
    """Numerically stable logistic function."""
    z = float(z)
    if z >= 0.0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return float(e / (1.0 + e))


def softplus(z: float) -> float:
    """log(1 + exp(z)) without overflow."""
    z = float(z)
    return max(z, 0.0) + float(np.log1p(np.exp(-abs(z))))


def sigmoid_probability(score: float, tau: float) -> np.ndarray:
    """Two-entry distribution [p, 1 - p] with p = sigmoid(score / tau).

    This is the single-class stand-in for the cosine softmax: index 0 is the
    class, index 1 its complement.
    """
    tau = _check_temperature(tau)
    p = sigmoid(float(score) / tau)
    return np.array([p, 1.0 - p], dtype=np.float64)


def kl_divergence(q, p) -> float:
    """KL(q || p) in nats; both arguments floored at CLAMP_EPS inside the logs."""
    q = as_vector(q)
    p = as_vector(p)
    if q.shape != p.shape:
        raise DimensionMismatch(f"KL needs equal lengths, got {q.shape} vs {p.shape}")
    return float(np.sum(q * (_clamped_log(q) - _clamped_log(p))))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats: 0.5 KL(p||m) + 0.5 KL(q||m), m = (p+q)/2.

    Evaluated symmetrically, so js(p, q) == js(q, p) bitwise.
    """
    p = as_vector(p)
    q = as_vector(q)
    if p.shape != q.shape:
        raise DimensionMismatch(f"JS needs equal lengths, got {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, the verification oracle.

    grad_i = (f(x + h e_i) - f(x - h e_i)) / (2 h)
    """
    x = as_vector(x)
    if not (h > 0.0):
        raise ValueError("step size h must be positive")
    grad = np.empty_like(x)
    for i in range(x.size):
        forward = x.copy()
        backward = x.copy()
        forward[i] += h
        backward[i] -= h
        grad[i] = (float(f(forward)) - float(f(backward))) / (2.0 * h)
    return grad
