"""Objective terms with analytic gradients.

Each operation returns a :class:`LossValue` carrying the scalar value (nats)
plus the gradients a trainer needs to compose a step:

* ``grad_features``   gradient w.r.t. the instance feature vector,
* ``grad_params``     named gradients for trainable parameters,
* ``grad_inputs``     named gradients w.r.t. distribution-level inputs
                      (chained through softmax by the caller).

Prototypes are constant buffers everywhere: no loss exposes a gradient path
into a prototype entry. The domain-adversarial term bakes gradient reversal
into ``grad_features`` (the sign-flipped discriminator gradient); its
``grad_params`` stay un-reversed so the discriminator itself still learns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import mathcore
from .errors import DimensionMismatch, ZeroVector
from .mathcore import CLAMP_EPS
from .prototypes import PrototypeSet

REGULARIZER_KINDS = ("l2", "kl", "jsd")


@dataclass(frozen=True)
class LossValue:
    value: float
    grad_features: np.ndarray | None = None
    grad_params: dict[str, np.ndarray] = field(default_factory=dict)
    grad_inputs: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for the composed objective."""

    lambda_unsup: float = 1.0
    lambda_dis: float = 0.1
    lambda_pce: float = 1.0
    lambda_mut: float = 1.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")

    def as_dict(self) -> dict[str, float]:
        return {
            "lambda_unsup": float(self.lambda_unsup),
            "lambda_dis": float(self.lambda_dis),
            "lambda_pce": float(self.lambda_pce),
            "lambda_mut": float(self.lambda_mut),
        }


def _clog(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, CLAMP_EPS))


def _prototype_scores(x: np.ndarray, pset: PrototypeSet, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarities of x against every prototype, plus the proto matrix."""
    matrix = pset.matrix()
    x = mathcore.as_vector(x)
    if matrix.shape[1] != x.size:
        raise DimensionMismatch(
            f"feature dim {x.size} does not match prototype dim {matrix.shape[1]}")
    norm = float(np.linalg.norm(x))
    if norm <= mathcore.NORM_EPS:
        raise ZeroVector("prototype posterior is undefined for a zero feature")
    cos = matrix @ (x / norm)
    return cos, matrix


def prototype_posterior(x, pset: PrototypeSet, tau: float) -> np.ndarray:
    """Class distribution from cosine similarities against one prototype set.

    Multi-class sets use softmax(cos / tau); a single-class set uses the
    sigmoid pair [p, 1 - p].
    """
    cos, _ = _prototype_scores(x, pset, tau)
    if pset.class_count == 1:
        return mathcore.sigmoid_probability(float(cos[0]), tau)
    return mathcore.temperature_softmax(cos, tau)


def _branch_nll_and_cos_grad(cos: np.ndarray, label: int, tau: float,
                             class_count: int) -> tuple[float, np.ndarray]:
    """Negative log posterior at ``label`` plus its gradient w.r.t. the cosines."""
    tau = mathcore._check_temperature(tau)
    if class_count == 1:
        s = float(cos[0]) / tau
        p0 = mathcore.sigmoid(s)
        if label == 0:
            value = mathcore.softplus(-s)
            grad = np.array([(p0 - 1.0) / tau])
        else:
            value = mathcore.softplus(s)
            grad = np.array([p0 / tau])
        return value, grad
    log_probs = mathcore.log_softmax(cos / tau)
    probs = np.exp(log_probs)
    onehot = np.zeros(class_count)
    onehot[label] = 1.0
    return -float(log_probs[label]), (probs - onehot) / tau


def prototype_cross_entropy(x, pseudo_label: int, src: PrototypeSet, tgt: PrototypeSet,
                            tau: float) -> LossValue:
    """Negative log cosine-softmax posterior at the pseudo label, in both domains.

    value = -log p_src(y~|x) - log p_tgt(y~|x). ``grad_features`` is the exact
    gradient through both cosine-softmax branches; prototypes receive none.
    """
    if src.class_count != tgt.class_count:
        raise DimensionMismatch("source/target prototype sets disagree on class count")
    class_count = src.class_count
    if not (0 <= pseudo_label < max(class_count, 2)):
        raise ValueError(f"pseudo label {pseudo_label} out of range")
    x = mathcore.as_vector(x)
    norm = float(np.linalg.norm(x))
    value = 0.0
    grad = np.zeros_like(x)
    for pset in (src, tgt):
        cos, matrix = _prototype_scores(x, pset, tau)
        branch_value, grad_cos = _branch_nll_and_cos_grad(cos, pseudo_label, tau, class_count)
        value += branch_value
        # d cos_k / dx = mu_k / |x| - cos_k * x / |x|^2  (prototypes are unit norm)
        grad += (grad_cos @ matrix) / norm - float(np.dot(grad_cos, cos)) * x / (norm * norm)
    return LossValue(value=value, grad_features=grad)


def _pair_divergence(kind: str, a: np.ndarray, b: np.ndarray
                     ) -> tuple[float, np.ndarray, np.ndarray]:
    """(value, d/da, d/db) of one regularizer pair. Gradients use clamped logs."""
    if kind == "l2":
        diff = a - b
        return float(np.dot(diff, diff)), 2.0 * diff, -2.0 * diff
    if kind == "kl":
        value = mathcore.kl_divergence(a, b)
        return value, _clog(a) - _clog(b) + 1.0, -a / np.maximum(b, CLAMP_EPS)
    if kind == "jsd":
        m = 0.5 * (a + b)
        value = mathcore.js_divergence(a, b)
        return value, 0.5 * (_clog(a) - _clog(m)), 0.5 * (_clog(b) - _clog(m))
    raise ValueError(f"unknown regularizer kind {kind!r}")


def regularizer_variant(p_lin, p_src, p_tgt, kind: str) -> LossValue:
    """Couple the linear distribution to both prototype posteriors.

    l2:  |p_lin - p_src|^2 + |p_lin - p_tgt|^2
    kl:  KL(p_lin || p_src) + KL(p_lin || p_tgt)
    jsd: JS(p_lin || p_src) + JS(p_lin || p_tgt)

    ``grad_inputs`` carries d/d p_lin, d/d p_src and d/d p_tgt so the caller
    can chain each branch through its own softmax.
    """
    p_lin = mathcore.as_vector(p_lin)
    p_src = mathcore.as_vector(p_src)
    p_tgt = mathcore.as_vector(p_tgt)
    if not (p_lin.shape == p_src.shape == p_tgt.shape):
        raise DimensionMismatch(
            f"distribution length mismatch: {p_lin.shape}, {p_src.shape}, {p_tgt.shape}")
    v1, g_lin1, g_src = _pair_divergence(kind, p_lin, p_src)
    v2, g_lin2, g_tgt = _pair_divergence(kind, p_lin, p_tgt)
    return LossValue(
        value=v1 + v2,
        grad_inputs={"p_lin": g_lin1 + g_lin2, "p_src": g_src, "p_tgt": g_tgt},
    )


def mutual_regularization(p_lin, p_src, p_tgt) -> LossValue:
    """JS coupling between the linear distribution and both prototype posteriors."""
    return regularizer_variant(p_lin, p_src, p_tgt, "jsd")


def classification_loss(p_lin, label: int) -> LossValue:
    """Cross entropy -log p_lin[label].

    ``grad_inputs['logits']`` is the gradient through the softmax that
    produced ``p_lin`` (probs minus one-hot).
    """
    p = mathcore.as_vector(p_lin)
    if not (0 <= label < p.size):
        raise ValueError(f"label {label} out of range for {p.size} classes")
    onehot = np.zeros_like(p)
    onehot[label] = 1.0
    return LossValue(
        value=-float(_clog(p)[label]),
        grad_inputs={"logits": p - onehot},
    )


def domain_adversarial_loss(x, domain_label: int, discriminator_w,
                            discriminator_b: float) -> LossValue:
    """Binary cross entropy of a logistic domain discriminator over a feature.

    domain_label is 0 for source, 1 for target. ``grad_params`` holds the
    standard discriminator gradient; ``grad_features`` is the feature gradient
    with the gradient-reversal sign flip already applied.
    """
    x = mathcore.as_vector(x)
    w = mathcore.as_vector(discriminator_w)
    if x.shape != w.shape:
        raise DimensionMismatch(f"feature/discriminator dims differ: {x.shape} vs {w.shape}")
    if domain_label not in (0, 1):
        raise ValueError(f"domain label must be 0 or 1, got {domain_label!r}")
    z = float(np.dot(w, x)) + float(discriminator_b)
    value = mathcore.softplus(z) - domain_label * z
    dz = mathcore.sigmoid(z) - float(domain_label)
    return LossValue(
        value=value,
        grad_features=-dz * w,
        grad_params={
            "discriminator_w": dz * x,
            "discriminator_b": np.asarray(dz, dtype=np.float64),
        },
    )


_COMPONENT_WEIGHTS = {
    "sup": lambda w: 1.0,
    "unsup": lambda w: w.lambda_unsup,
    "dis": lambda w: w.lambda_dis,
    "pce": lambda w: w.lambda_pce,
    "mut": lambda w: w.lambda_mut,
}


def total_loss(components: Mapping[str, LossValue], weights: LossWeights) -> LossValue:
    """Weighted sum of the objective terms.

    value = sup + lambda_unsup * unsup + lambda_dis * dis
              + lambda_pce * pce + lambda_mut * mut

    Gradients combine linearly with the same weights; missing components
    contribute nothing.
    """
    unknown = set(components) - set(_COMPONENT_WEIGHTS)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    value = 0.0
    grad_features: np.ndarray | None = None
    grad_params: dict[str, np.ndarray] = {}
    grad_inputs: dict[str, np.ndarray] = {}
    for name, loss in components.items():
        weight = float(_COMPONENT_WEIGHTS[name](weights))
        value += weight * loss.value
        if loss.grad_features is not None:
            contrib = weight * loss.grad_features
            grad_features = contrib if grad_features is None else grad_features + contrib
        for key, grad in loss.grad_params.items():
            contrib = weight * grad
            grad_params[key] = contrib if key not in grad_params else grad_params[key] + contrib
        for key, grad in loss.grad_inputs.items():
            contrib = weight * grad
            grad_inputs[key] = contrib if key not in grad_inputs else grad_inputs[key] + contrib
    return LossValue(value=value, grad_features=grad_features,
                     grad_params=grad_params, grad_inputs=grad_inputs)
