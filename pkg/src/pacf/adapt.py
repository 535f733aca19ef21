"""Mean-teacher adaptation loop over feature vectors.

The model is deliberately small: an affine feature extractor standing in for
a backbone, a linear classifier on the embedding, and a logistic domain
discriminator. The teacher shares the architecture and tracks the student by
exponential moving average; its confidence-filtered predictions on the clean
(weakly augmented = identity) target stream become pseudo labels, while the
student always sees Gaussian-noised (strongly augmented) inputs.

A run has three phases:

1. supervised warm-up on the source only,
2. prototype initialization by running the warmed-up student over both
   domains and averaging confident embeddings per predicted class (the
   teacher is re-seeded as a copy of the student here),
3. the adaptation loop proper, where each step draws batches, generates
   pseudo labels, descends the composed objective, refreshes prototypes
   from the step's embeddings, and EMA-updates the teacher.

Every random draw comes from one seeded PCG64 generator in a documented
order (source indices, target indices, source noise, target noise per
step), so identical configs and data reproduce runs bitwise.

Single-class models (class_count == 1) use a sigmoid head: probability rows
carry [p, 1 - p] and index 1 means "no class"; only argmax == 0 instances
can become pseudo labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroVector
from .losses import LossValue, LossWeights, total_loss
from .mathcore import NORM_EPS
from .prototypes import PrototypeSet, ScoredFeatureBatch, initialize_prototypes, update_all
from .synthbench import LabeledBatch

PARAM_KEYS = (
    "extractor_w", "extractor_b",
    "classifier_w", "classifier_b",
    "discriminator_w", "discriminator_b",
)

REGULARIZERS = ("none", "l2", "kl", "jsd")


@dataclass
class ModelParams:
    """Extractor + linear classifier + domain discriminator parameters."""

    extractor_w: np.ndarray      # (input_dim, feature_dim)
    extractor_b: np.ndarray      # (feature_dim,)
    classifier_w: np.ndarray     # (feature_dim, class_count)
    classifier_b: np.ndarray     # (class_count,)
    discriminator_w: np.ndarray  # (feature_dim,)
    discriminator_b: np.ndarray  # scalar (0-d array)

    def __post_init__(self):
        for key in PARAM_KEYS:
            setattr(self, key, np.asarray(getattr(self, key), dtype=np.float64))
        d_in, d_feat = self.extractor_w.shape
        if self.extractor_b.shape != (d_feat,):
            raise DimensionMismatch("extractor bias does not match extractor width")
        if self.classifier_w.shape[0] != d_feat or self.classifier_b.shape != (self.classifier_w.shape[1],):
            raise DimensionMismatch("classifier shapes inconsistent with extractor")
        if self.discriminator_w.shape != (d_feat,) or self.discriminator_b.shape != ():
            raise DimensionMismatch("discriminator shapes inconsistent with extractor")
        for key in PARAM_KEYS:
            if not np.all(np.isfinite(getattr(self, key))):
                raise ValueError(f"{key} contains non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.extractor_w.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.extractor_w.shape[1]

    @property
    def class_count(self) -> int:
        return self.classifier_w.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(*(getattr(self, key).copy() for key in PARAM_KEYS))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {key: getattr(self, key) for key in PARAM_KEYS}

    def apply_gradients(self, grads: dict[str, np.ndarray], learning_rate: float) -> "ModelParams":
        """One gradient-descent step; parameters without a gradient are carried over."""
        new = {}
        for key in PARAM_KEYS:
            value = getattr(self, key)
            if key in grads:
                value = value - learning_rate * grads[key]
            new[key] = value
        return ModelParams(**new)

    def to_json_dict(self) -> dict:
        return {key: getattr(self, key).tolist() for key in PARAM_KEYS}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ModelParams":
        return cls(**{key: np.asarray(doc[key], dtype=np.float64) for key in PARAM_KEYS})


@dataclass(frozen=True)
class TrainerConfig:
    """Knobs for one adaptation run.

    ``pseudo_threshold`` may exceed 1 to disable pseudo labeling entirely
    (filtering keeps an instance only when its max probability reaches the
    threshold, which no probability above 1 can). ``enable_pce``,
    ``enable_adversarial`` and ``regularizer`` are the ablation switches; a
    disabled switch zeroes the matching loss weight.
    """

    tau: float = 0.05
    init_threshold: float = 0.8
    pseudo_threshold: float = 0.8
    weights: LossWeights = field(default_factory=LossWeights)
    regularizer: str = "jsd"
    enable_pce: bool = True
    enable_adversarial: bool = True
    ema_rate: float = 0.9996
    learning_rate: float = 0.05
    warmup_steps: int = 300
    steps: int = 500
    batch_size: int = 64
    feature_dim: int = 16
    augment_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau > 0.0):
            raise ValueError(f"tau must be positive, got {self.tau!r}")
        if not (0.0 < self.init_threshold <= 1.0):
            raise ValueError(f"init_threshold must lie in (0, 1], got {self.init_threshold!r}")
        if not (np.isfinite(self.pseudo_threshold) and self.pseudo_threshold > 0.0):
            raise ValueError(f"pseudo_threshold must be positive, got {self.pseudo_threshold!r}")
        if not (0.0 <= self.ema_rate < 1.0):
            raise ValueError(f"ema_rate must lie in [0, 1), got {self.ema_rate!r}")
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0.0):
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not (np.isfinite(self.augment_noise) and self.augment_noise >= 0.0):
            raise ValueError(f"augment_noise must be >= 0, got {self.augment_noise!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")

    def effective_weights(self) -> LossWeights:
        """Loss weights with the ablation switches applied."""
        w = self.weights
        return LossWeights(
            lambda_unsup=w.lambda_unsup,
            lambda_dis=w.lambda_dis if self.enable_adversarial else 0.0,
            lambda_pce=w.lambda_pce if self.enable_pce else 0.0,
            lambda_mut=w.lambda_mut if self.regularizer != "none" else 0.0,
        )

    def to_json_dict(self) -> dict:
        doc = {
            "tau": self.tau,
            "init_threshold": self.init_threshold,
            "pseudo_threshold": self.pseudo_threshold,
            "regularizer": self.regularizer,
            "enable_pce": self.enable_pce,
            "enable_adversarial": self.enable_adversarial,
            "ema_rate": self.ema_rate,
            "learning_rate": self.learning_rate,
            "warmup_steps": self.warmup_steps,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "feature_dim": self.feature_dim,
            "augment_noise": self.augment_noise,
            "seed": self.seed,
        }
        doc.update(self.weights.as_dict())
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrainerConfig":
        doc = dict(doc)
        weights = LossWeights(
            lambda_unsup=doc.pop("lambda_unsup", 1.0),
            lambda_dis=doc.pop("lambda_dis", 0.1),
            lambda_pce=doc.pop("lambda_pce", 1.0),
            lambda_mut=doc.pop("lambda_mut", 1.0),
        )
        return cls(weights=weights, **doc)


@dataclass
class AdaptationState:
    student: ModelParams
    teacher: ModelParams
    src_protos: PrototypeSet | None
    tgt_protos: PrototypeSet | None
    step: int
    rng: np.random.Generator


@dataclass(frozen=True)
class PseudoLabels:
    """Confidence-filtered teacher predictions on a target batch."""

    indices: np.ndarray  # positions within the scored batch
    labels: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class StepRecord:
    """Unweighted per-term loss values for one step plus the weighted total."""

    step: int
    loss_sup: float
    loss_unsup: float
    loss_dis: float
    loss_pce: float
    loss_mut: float
    total: float
    pseudo_count: int

    FIELDS = ("step", "loss_sup", "loss_unsup", "loss_dis", "loss_pce",
              "loss_mut", "total", "pseudo_count")


def init_state(config: TrainerConfig, input_dim: int, class_count: int) -> AdaptationState:
    """Fresh state with seeded parameters; weight draws precede all training draws."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d_feat = config.feature_dim
    student = ModelParams(
        extractor_w=rng.normal(0.0, input_dim ** -0.5, (input_dim, d_feat)),
        extractor_b=np.zeros(d_feat),
        classifier_w=rng.normal(0.0, d_feat ** -0.5, (d_feat, class_count)),
        classifier_b=np.zeros(class_count),
        discriminator_w=np.zeros(d_feat),
        discriminator_b=np.asarray(0.0),
    )
    return AdaptationState(student=student, teacher=student.copy(),
                           src_protos=None, tgt_protos=None, step=0, rng=rng)


def _batch_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _batch_softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def class_probabilities(logits: np.ndarray) -> np.ndarray:
    """Row-wise class distribution; a single logit column yields [p, 1 - p] rows."""
    if logits.shape[1] == 1:
        p0 = _batch_sigmoid(logits[:, 0])
        return np.stack([p0, 1.0 - p0], axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_probabilities(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        z = logits[:, 0]
        return np.stack([-_batch_softplus(-z), -_batch_softplus(z)], axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _prob_grad_to_logit_grad(probs: np.ndarray, grad_probs: np.ndarray,
                             logit_width: int) -> np.ndarray:
    """Row-wise softmax VJP; for a sigmoid pair only the first column carries logits."""
    inner = (probs * grad_probs).sum(axis=1, keepdims=True)
    vjp = probs * (grad_probs - inner)
    return vjp[:, :logit_width]


def _ce_logit_grad(probs: np.ndarray, labels: np.ndarray, logit_width: int) -> np.ndarray:
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return (probs - onehot)[:, :logit_width]


def forward(params: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Embedding and linear-classifier distribution for one vector or a batch."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = np.atleast_2d(arr)
    if batch.shape[1] != params.input_dim:
        raise DimensionMismatch(
            f"input dim {batch.shape[1]} does not match extractor dim {params.input_dim}")
    emb = batch @ params.extractor_w + params.extractor_b
    probs = class_probabilities(emb @ params.classifier_w + params.classifier_b)
    if single:
        return emb[0], probs[0]
    return emb, probs


def embed(params: ModelParams, x) -> np.ndarray:
    """Extractor output only."""
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if arr.shape[1] != params.input_dim:
        raise DimensionMismatch(
            f"input dim {arr.shape[1]} does not match extractor dim {params.input_dim}")
    emb = arr @ params.extractor_w + params.extractor_b
    return emb[0] if np.asarray(x).ndim == 1 else emb


def predict(params: ModelParams, x):
    """Argmax of the linear-classifier distribution; prototypes are never consulted."""
    _, probs = forward(params, x)
    if probs.ndim == 1:
        return int(np.argmax(probs))
    return probs.argmax(axis=1)


def generate_pseudo_labels(teacher: ModelParams, target_features,
                           threshold: float) -> PseudoLabels:
    """Keep teacher predictions whose max probability reaches the threshold.

    Predictions come from the clean (un-noised) features. Ties break toward
    the lowest class index via argmax. May return an empty set.
    """
    if not (np.isfinite(threshold) and threshold > 0.0):
        raise ValueError(f"threshold must be positive, got {threshold!r}")
    _, probs = forward(teacher, np.atleast_2d(np.asarray(target_features, dtype=np.float64)))
    confidence = probs.max(axis=1)
    labels = probs.argmax(axis=1)
    keep = confidence >= threshold
    if teacher.class_count == 1:
        keep &= labels == 0
    idx = np.flatnonzero(keep)
    return PseudoLabels(indices=idx, labels=labels[idx], scores=confidence[idx])


def ema_update(teacher: ModelParams, student: ModelParams, rate: float) -> ModelParams:
    """theta_teacher <- rate * theta_teacher + (1 - rate) * theta_student."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"ema rate must lie in [0, 1), got {rate!r}")
    new = {}
    for key in PARAM_KEYS:
        t = getattr(teacher, key)
        s = getattr(student, key)
        if t.shape != s.shape:
            raise DimensionMismatch(f"teacher/student shape mismatch on {key}")
        new[key] = rate * t + (1.0 - rate) * s
    return ModelParams(**new)


def _chain_to_extractor(grad_emb: np.ndarray, inputs: np.ndarray,
                        grads: dict[str, np.ndarray]) -> None:
    """Accumulate extractor gradients from per-instance embedding gradients."""
    gw = inputs.T @ grad_emb
    gb = grad_emb.sum(axis=0)
    grads["extractor_w"] = grads.get("extractor_w", 0.0) + gw
    grads["extractor_b"] = grads.get("extractor_b", 0.0) + gb


def _cross_entropy_component(params: ModelParams, inputs: np.ndarray, emb: np.ndarray,
                             probs: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean CE over a batch with gradients for classifier and extractor."""
    n = len(labels)
    logit_width = params.classifier_w.shape[1]
    log_probs = _log_probabilities(emb @ params.classifier_w + params.classifier_b)
    value = float(-log_probs[np.arange(n), labels].mean())
    grad_logits = _ce_logit_grad(probs, labels, logit_width) / n
    grads = {
        "classifier_w": emb.T @ grad_logits,
        "classifier_b": grad_logits.sum(axis=0),
    }
    grad_emb = grad_logits @ params.classifier_w.T
    _chain_to_extractor(grad_emb, inputs, grads)
    return LossValue(value=value, grad_params=grads)


def _adversarial_component(params: ModelParams, src_inputs, src_emb,
                           tgt_inputs, tgt_emb) -> LossValue:
    """Mean discriminator BCE over both domains; feature gradient is reversed."""
    emb = np.vstack([src_emb, tgt_emb])
    inputs = np.vstack([src_inputs, tgt_inputs])
    domain = np.concatenate([np.zeros(len(src_emb)), np.ones(len(tgt_emb))])
    n = len(domain)
    z = emb @ params.discriminator_w + float(params.discriminator_b)
    value = float((_batch_softplus(z) - domain * z).mean())
    dz = (_batch_sigmoid(z) - domain) / n
    grads = {
        "discriminator_w": emb.T @ dz,
        "discriminator_b": np.asarray(dz.sum()),
    }
    grad_emb = -np.outer(dz, params.discriminator_w)  # gradient reversal
    _chain_to_extractor(grad_emb, inputs, grads)
    return LossValue(value=value, grad_params=grads)


def _prototype_geometry(emb: np.ndarray, pset: PrototypeSet
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row norms, cosines against all prototypes, and the prototype matrix."""
    matrix = pset.matrix()
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms <= NORM_EPS):
        raise ZeroVector("zero-norm embedding in prototype geometry")
    cos = (emb / norms[:, None]) @ matrix.T
    return norms, cos, matrix


def _cos_grad_to_embedding(grad_cos: np.ndarray, cos: np.ndarray, emb: np.ndarray,
                           norms: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Chain per-row cosine-score gradients back to the embeddings."""
    radial = (grad_cos * cos).sum(axis=1)
    return grad_cos @ matrix / norms[:, None] - radial[:, None] * emb / (norms ** 2)[:, None]


def _posterior_rows(cos: np.ndarray, tau: float, class_count: int) -> np.ndarray:
    if class_count == 1:
        p0 = _batch_sigmoid(cos[:, 0] / tau)
        return np.stack([p0, 1.0 - p0], axis=1)
    z = cos / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _pce_component(params: ModelParams, inputs: np.ndarray, emb: np.ndarray,
                   labels: np.ndarray, src: PrototypeSet, tgt: PrototypeSet,
                   tau: float) -> LossValue:
    """Mean prototype cross entropy over pseudo-labeled embeddings."""
    n = len(labels)
    class_count = src.class_count
    total_value = 0.0
    grad_emb = np.zeros_like(emb)
    for pset in (src, tgt):
        norms, cos, matrix = _prototype_geometry(emb, pset)
        if class_count == 1:
            s = cos[:, 0] / tau
            sign = np.where(labels == 0, -1.0, 1.0)
            total_value += float(_batch_softplus(sign * s).mean())
            p0 = _batch_sigmoid(s)
            grad_cos = ((p0 - (labels == 0)) / tau)[:, None] / n
        else:
            z = cos / tau
            zmax = z.max(axis=1, keepdims=True)
            log_probs = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
            total_value += float(-log_probs[np.arange(n), labels].mean())
            probs = np.exp(log_probs)
            onehot = np.zeros_like(probs)
            onehot[np.arange(n), labels] = 1.0
            grad_cos = (probs - onehot) / tau / n
        grad_emb += _cos_grad_to_embedding(grad_cos, cos, emb, norms, matrix)
    grads: dict[str, np.ndarray] = {}
    _chain_to_extractor(grad_emb, inputs, grads)
    return LossValue(value=total_value, grad_params=grads)


def _pair_divergence_rows(kind: str, a: np.ndarray, b: np.ndarray
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise (value, d/da, d/db) of one regularizer pair."""
    def clog(x):
        return np.log(np.maximum(x, 1e-12))

    if kind == "l2":
        diff = a - b
        return (diff * diff).sum(axis=1), 2.0 * diff, -2.0 * diff
    if kind == "kl":
        value = (a * (clog(a) - clog(b))).sum(axis=1)
        return value, clog(a) - clog(b) + 1.0, -a / np.maximum(b, 1e-12)
    if kind == "jsd":
        m = 0.5 * (a + b)
        value = 0.5 * (a * (clog(a) - clog(m))).sum(axis=1) \
            + 0.5 * (b * (clog(b) - clog(m))).sum(axis=1)
        return value, 0.5 * (clog(a) - clog(m)), 0.5 * (clog(b) - clog(m))
    raise ValueError(f"unknown regularizer kind {kind!r}")


def _mut_component(params: ModelParams, inputs: np.ndarray, emb: np.ndarray,
                   probs: np.ndarray, src: PrototypeSet, tgt: PrototypeSet,
                   tau: float, kind: str) -> LossValue:
    """Mean regularizer coupling the linear distribution to both posteriors.

    Gradients flow into the linear branch (classifier + extractor) and into
    the embedding through both prototype posteriors; prototypes get none.
    """
    n = len(emb)
    logit_width = params.classifier_w.shape[1]
    norms_s, cos_s, matrix_s = _prototype_geometry(emb, src)
    norms_t, cos_t, matrix_t = _prototype_geometry(emb, tgt)
    p_src = _posterior_rows(cos_s, tau, src.class_count)
    p_tgt = _posterior_rows(cos_t, tau, tgt.class_count)
    v1, g_lin1, g_src = _pair_divergence_rows(kind, probs, p_src)
    v2, g_lin2, g_tgt = _pair_divergence_rows(kind, probs, p_tgt)
    value = float((v1 + v2).mean())

    grad_logits = _prob_grad_to_logit_grad(probs, g_lin1 + g_lin2, logit_width) / n
    grads = {
        "classifier_w": emb.T @ grad_logits,
        "classifier_b": grad_logits.sum(axis=0),
    }
    grad_emb = grad_logits @ params.classifier_w.T
    grad_cos_s = _prob_grad_to_logit_grad(p_src, g_src, src.class_count) / tau / n
    grad_cos_t = _prob_grad_to_logit_grad(p_tgt, g_tgt, tgt.class_count) / tau / n
    grad_emb = grad_emb + _cos_grad_to_embedding(grad_cos_s, cos_s, emb, norms_s, matrix_s)
    grad_emb = grad_emb + _cos_grad_to_embedding(grad_cos_t, cos_t, emb, norms_t, matrix_t)
    _chain_to_extractor(grad_emb, inputs, grads)
    return LossValue(value=value, grad_params=grads)


def _prototypes_ready(state: AdaptationState) -> bool:
    return (state.src_protos is not None and state.tgt_protos is not None
            and state.src_protos.fully_initialized and state.tgt_protos.fully_initialized)


def train_step(state: AdaptationState, source: LabeledBatch, target_features,
               config: TrainerConfig, warmup: bool = False
               ) -> tuple[AdaptationState, StepRecord]:
    """One optimization step; returns the successor state and its record.

    Draw order per step: source indices, target indices, source noise,
    target noise. Warm-up steps keep that order but train on the supervised
    term only and leave teacher and prototypes untouched.
    """
    target_features = np.asarray(target_features, dtype=np.float64)
    rng = state.rng
    src_idx = rng.integers(0, len(source), size=config.batch_size)
    tgt_idx = rng.integers(0, len(target_features), size=config.batch_size)
    src_noise = rng.standard_normal((config.batch_size, source.dim))
    tgt_noise = rng.standard_normal((config.batch_size, target_features.shape[1]))

    xs = source.features[src_idx]
    ys = source.labels[src_idx]
    xt = target_features[tgt_idx]

    pseudo = PseudoLabels(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                          np.empty(0))
    if not warmup:
        pseudo = generate_pseudo_labels(state.teacher, xt, config.pseudo_threshold)

    xs_aug = xs + config.augment_noise * src_noise
    xt_aug = xt + config.augment_noise * tgt_noise
    student = state.student
    emb_s, probs_s = forward(student, xs_aug)
    emb_t, probs_t = forward(student, xt_aug)

    weights = config.effective_weights()
    components = {"sup": _cross_entropy_component(student, xs_aug, emb_s, probs_s, ys)}
    if len(pseudo) and weights.lambda_unsup > 0.0:
        kept = pseudo.indices
        components["unsup"] = _cross_entropy_component(
            student, xt_aug[kept], emb_t[kept], probs_t[kept], pseudo.labels)
    if not warmup and weights.lambda_dis > 0.0:
        components["dis"] = _adversarial_component(student, xs_aug, emb_s, xt_aug, emb_t)
    if len(pseudo) and _prototypes_ready(state):
        kept = pseudo.indices
        if weights.lambda_pce > 0.0:
            components["pce"] = _pce_component(
                student, xt_aug[kept], emb_t[kept], pseudo.labels,
                state.src_protos, state.tgt_protos, config.tau)
        if weights.lambda_mut > 0.0:
            components["mut"] = _mut_component(
                student, xt_aug[kept], emb_t[kept], probs_t[kept],
                state.src_protos, state.tgt_protos, config.tau, config.regularizer)

    combined = total_loss(components, weights)
    new_student = student.apply_gradients(combined.grad_params, config.learning_rate)

    src_protos = state.src_protos
    tgt_protos = state.tgt_protos
    if not warmup and src_protos is not None:
        src_protos = update_all(src_protos, emb_s, ys)
        if len(pseudo) and tgt_protos is not None:
            tgt_protos = update_all(tgt_protos, emb_t[pseudo.indices], pseudo.labels)

    teacher = state.teacher if warmup else ema_update(state.teacher, new_student,
                                                      config.ema_rate)
    next_state = AdaptationState(student=new_student, teacher=teacher,
                                 src_protos=src_protos, tgt_protos=tgt_protos,
                                 step=state.step + 1, rng=rng)

    def component_value(name: str) -> float:
        return components[name].value if name in components else 0.0

    record = StepRecord(
        step=next_state.step,
        loss_sup=component_value("sup"),
        loss_unsup=component_value("unsup"),
        loss_dis=component_value("dis"),
        loss_pce=component_value("pce"),
        loss_mut=component_value("mut"),
        total=combined.value,
        pseudo_count=len(pseudo),
    )
    return next_state, record


def warmup_run(state: AdaptationState, source: LabeledBatch, target_features,
               config: TrainerConfig) -> tuple[AdaptationState, list[StepRecord]]:
    """Supervised warm-up on the source stream."""
    records = []
    for _ in range(config.warmup_steps):
        state, record = train_step(state, source, target_features, config, warmup=True)
        records.append(record)
    return state, records


def initialize_from_warmup(state: AdaptationState, source: LabeledBatch,
                           target_features, config: TrainerConfig) -> AdaptationState:
    """Prototype initialization from the warmed-up student, per domain.

    The student runs inference over the clean features of each domain; per
    predicted class, embeddings whose confidence reaches ``init_threshold``
    are averaged and normalized. The teacher restarts as a student copy.
    """
    class_count = state.student.class_count
    protos = {}
    for domain, feats in (("source", source.features), ("target", target_features)):
        emb, probs = forward(state.student, np.asarray(feats, dtype=np.float64))
        batch = ScoredFeatureBatch(emb, probs.argmax(axis=1), probs.max(axis=1))
        protos[domain] = initialize_prototypes(batch, config.init_threshold, domain,
                                               class_count)
    return AdaptationState(student=state.student, teacher=state.student.copy(),
                           src_protos=protos["source"], tgt_protos=protos["target"],
                           step=state.step, rng=state.rng)


def train_run(state: AdaptationState, source: LabeledBatch, target_features,
              config: TrainerConfig) -> tuple[AdaptationState, list[StepRecord]]:
    """The adaptation loop: ``config.steps`` full train steps."""
    records = []
    for _ in range(config.steps):
        state, record = train_step(state, source, target_features, config)
        records.append(record)
    return state, records


@dataclass
class RunResult:
    state: AdaptationState
    warmup_records: list[StepRecord]
    records: list[StepRecord]
    config: TrainerConfig


def run_experiment(source: LabeledBatch, target_features, config: TrainerConfig,
                   class_count: int | None = None) -> RunResult:
    """Warm-up, prototype initialization, then the adaptation loop."""
    target_features = np.asarray(target_features, dtype=np.float64)
    if class_count is None:
        if len(source.labels) == 0 or source.labels.max() < 0:
            raise ValueError("cannot infer class count from an unlabeled source batch")
        class_count = int(source.labels.max()) + 1
    state = init_state(config, source.dim, class_count)
    state, warmup_records = warmup_run(state, source, target_features, config)
    state = initialize_from_warmup(state, source, target_features, config)
    state, records = train_run(state, source, target_features, config)
    return RunResult(state=state, warmup_records=warmup_records, records=records,
                     config=config)


def checkpoint_to_json_dict(state: AdaptationState, config: TrainerConfig,
                            config_hash: str) -> dict:
    """Checkpoint document: parameters, prototype sets, step counter, config."""
    return {
        "format": "pacf-checkpoint-v1",
        "config_hash": config_hash,
        "step": state.step,
        "trainer_config": config.to_json_dict(),
        "student": state.student.to_json_dict(),
        "teacher": state.teacher.to_json_dict(),
        "src_prototypes": state.src_protos.to_json_dict() if state.src_protos else None,
        "tgt_prototypes": state.tgt_protos.to_json_dict() if state.tgt_protos else None,
    }


def state_from_checkpoint(doc: dict) -> tuple[AdaptationState, TrainerConfig, str]:
    """Rebuild a state (with a fresh RNG) plus its trainer config and hash."""
    config = TrainerConfig.from_json_dict(doc["trainer_config"])
    state = AdaptationState(
        student=ModelParams.from_json_dict(doc["student"]),
        teacher=ModelParams.from_json_dict(doc["teacher"]),
        src_protos=PrototypeSet.from_json_dict(doc["src_prototypes"])
        if doc.get("src_prototypes") else None,
        tgt_protos=PrototypeSet.from_json_dict(doc["tgt_prototypes"])
        if doc.get("tgt_prototypes") else None,
        step=int(doc["step"]),
        rng=np.random.Generator(np.random.PCG64(config.seed)),
    )
    return state, config, doc.get("config_hash", "")
