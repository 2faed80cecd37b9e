"""Minimal differentiable-model engine.

Models are dense/ReLU stacks over flattened grids or mean-pooled token
embeddings, trained with plain SGD on the mean batch loss. Everything runs
in float64; forward, losses, gradients, and parameter updates are pure
functions, so a model value can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import GRID, MODALITIES, TOKEN
from .errors import InvalidInputError


@dataclass(frozen=True)
class ArchSpec:
    """Layer plan for one client model.

    The trunk is ``backbone_widths`` dense+ReLU layers; ``extra_pairs``
    additional dense+ReLU pairs of width ``extra_width`` sit between the
    trunk and the classifier head. Grid inputs are flattened; token inputs
    go through an embedding table and are mean-pooled over the sequence.
    """

    modality: str = GRID
    num_classes: int = 4
    grid_side: int = 8
    vocab_size: int = 64
    max_seq_len: int = 16
    embed_dim: int = 16
    backbone_widths: tuple[int, ...] = (64,)
    extra_pairs: int = 0
    extra_width: int = 128

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise InvalidInputError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.num_classes < 2:
            raise InvalidInputError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.modality == GRID and self.grid_side < 1:
            raise InvalidInputError("grid_side must be positive")
        if self.modality == TOKEN and min(self.vocab_size, self.max_seq_len, self.embed_dim) < 1:
            raise InvalidInputError("vocab_size, max_seq_len, embed_dim must be positive")
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        if any(w < 1 for w in self.backbone_widths):
            raise InvalidInputError("backbone widths must be positive")
        if self.extra_pairs < 0 or self.extra_width < 1:
            raise InvalidInputError("extra_pairs must be >= 0 and extra_width positive")

    @property
    def input_dim(self) -> int:
        return self.grid_side**2 if self.modality == GRID else self.embed_dim

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.backbone_widths + (self.extra_width,) * self.extra_pairs


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    iterations: int = 1
    batch_size: int = 32

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations < 0:
            raise InvalidInputError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class Model:
    """Parameter bundle; value-like and never mutated in place."""

    arch: ArchSpec
    embedding: np.ndarray | None
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    rng_seed: int

    def param_arrays(self) -> list[np.ndarray]:
        arrays = [] if self.embedding is None else [self.embedding]
        for weight, bias in self.layers:
            arrays.extend((weight, bias))
        return arrays

    def with_params(self, arrays: Sequence[np.ndarray]) -> "Model":
        arrays = list(arrays)
        embedding = None
        if self.embedding is not None:
            embedding = arrays.pop(0)
        layers = tuple((arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2))
        return replace(self, embedding=embedding, layers=layers)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def build_model(arch: ArchSpec, seed: int) -> Model:
    """Deterministic init: uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    embedding = None
    if arch.modality == TOKEN:
        embedding = _glorot(rng, arch.vocab_size, arch.embed_dim)
    dims = (arch.input_dim,) + arch.hidden_widths + (arch.num_classes,)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        layers.append((_glorot(rng, fan_in, fan_out), np.zeros(fan_out)))
    return Model(arch=arch, embedding=embedding, layers=tuple(layers), rng_seed=seed)


# ---------------------------------------------------------------------------
# Losses (single-sample public ops + batched internals)
# ---------------------------------------------------------------------------


def _as_logits(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise InvalidInputError(f"{name} must be a non-empty 1-d array")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite")
    return arr


def softmax(logits) -> np.ndarray:
    """Stable softmax of a logits vector: exp(x - max) normalized."""
    x = _as_logits(logits, "logits")
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(logits) -> np.ndarray:
    x = _as_logits(logits, "logits")
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label], computed via log-sum-exp."""
    x = _as_logits(logits, "logits")
    if not 0 <= label < x.size:
        raise InvalidInputError(f"label {label} out of range for {x.size} classes")
    return float(-log_softmax(x)[label])


def cross_entropy_grad(logits, label: int) -> np.ndarray:
    """d cross_entropy / d logits = softmax(logits) - onehot(label)."""
    x = _as_logits(logits, "logits")
    if not 0 <= label < x.size:
        raise InvalidInputError(f"label {label} out of range for {x.size} classes")
    grad = softmax(x)
    grad[label] -= 1.0
    return grad


def kl_distill_loss(student_logits, teacher_logits, temperature: float = 1.0) -> float:
    """KL(softmax(teacher/T) || softmax(student/T)).

    Zero exactly when the softened distributions coincide; tiny negative
    rounding residue is clamped to 0.
    """
    student = _as_logits(student_logits, "student_logits")
    teacher = _as_logits(teacher_logits, "teacher_logits")
    if student.size != teacher.size:
        raise InvalidInputError(
            f"student/teacher length mismatch: {student.size} != {teacher.size}"
        )
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be > 0, got {temperature}")
    log_p = log_softmax(teacher / temperature)
    log_q = log_softmax(student / temperature)
    value = float(np.sum(np.exp(log_p) * (log_p - log_q)))
    return max(value, 0.0)


def kl_distill_grad(student_logits, teacher_logits, temperature: float = 1.0) -> np.ndarray:
    """d kl_distill_loss / d student_logits = (softmax(s/T) - softmax(t/T)) / T."""
    student = _as_logits(student_logits, "student_logits")
    teacher = _as_logits(teacher_logits, "teacher_logits")
    if student.size != teacher.size:
        raise InvalidInputError("student/teacher length mismatch")
    return (softmax(student / temperature) - softmax(teacher / temperature)) / temperature


def _ce_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over rows plus d(mean loss)/d(logits)."""
    rows = np.arange(logits.shape[0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = float(-log_probs[rows, labels].mean())
    grad = exp / total
    grad[rows, labels] -= 1.0
    grad /= logits.shape[0]
    return loss, grad


def _kl_batch(
    logits: np.ndarray, teacher: np.ndarray, temperature: float
) -> tuple[float, np.ndarray]:
    """Mean distillation KL over rows plus gradient w.r.t. student logits."""

    def _log_softmax_rows(mat: np.ndarray) -> np.ndarray:
        z = mat - mat.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    log_p = _log_softmax_rows(teacher / temperature)
    log_q = _log_softmax_rows(logits / temperature)
    p = np.exp(log_p)
    loss = float(np.maximum((p * (log_p - log_q)).sum(axis=1), 0.0).mean())
    grad = (np.exp(log_q) - p) / (temperature * logits.shape[0])
    return loss, grad


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def stack_features(arch: ArchSpec, batch) -> np.ndarray:
    """Stack instance features into a matrix, checking modality."""
    if len(batch) == 0:
        raise InvalidInputError("batch must be non-empty")
    for inst in batch:
        if inst.modality != arch.modality:
            raise InvalidInputError(
                f"instance modality {inst.modality!r} does not match model {arch.modality!r}"
            )
    return np.stack([inst.features for inst in batch])


def _forward_cached(model: Model, features: np.ndarray):
    """Returns (logits, token_ids, hidden_inputs, preacts)."""
    if model.arch.modality == TOKEN:
        ids = features
        hidden = model.embedding[ids].mean(axis=1)
    else:
        ids = None
        hidden = np.asarray(features, dtype=np.float64)
    inputs, preacts = [], []
    for weight, bias in model.layers[:-1]:
        inputs.append(hidden)
        z = hidden @ weight + bias
        preacts.append(z)
        hidden = np.maximum(z, 0.0)
    inputs.append(hidden)
    weight, bias = model.layers[-1]
    return hidden @ weight + bias, ids, inputs, preacts


def forward_features(model: Model, features: np.ndarray) -> np.ndarray:
    """Batch logits from a pre-stacked feature matrix."""
    logits, _, _, _ = _forward_cached(model, features)
    return logits


def forward(model: Model, batch) -> np.ndarray:
    """Logits matrix (|batch| x C), row k from instance k alone."""
    return forward_features(model, stack_features(model.arch, batch))


def _backward(model: Model, ids, inputs, preacts, dlogits: np.ndarray) -> list[np.ndarray]:
    """Gradients in param_arrays() order from d(loss)/d(logits)."""
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = []
    delta = dlogits
    for k in range(len(model.layers) - 1, -1, -1):
        weight, _ = model.layers[k]
        layer_grads.append((inputs[k].T @ delta, delta.sum(axis=0)))
        if k > 0:
            delta = (delta @ weight.T) * (preacts[k - 1] > 0)
        else:
            delta = delta @ weight.T
    layer_grads.reverse()
    grads: list[np.ndarray] = []
    if model.embedding is not None:
        seq_len = ids.shape[1]
        grad_emb = np.zeros_like(model.embedding)
        # mean pooling spreads the pooled gradient evenly over positions
        np.add.at(grad_emb, ids.ravel(), np.repeat(delta / seq_len, seq_len, axis=0))
        grads.append(grad_emb)
    for weight_grad, bias_grad in layer_grads:
        grads.extend((weight_grad, bias_grad))
    return grads


def _loss_and_param_grads(
    model: Model,
    features: np.ndarray,
    target,
    loss_kind: str,
    temperature: float = 1.0,
) -> tuple[float, list[np.ndarray]]:
    logits, ids, inputs, preacts = _forward_cached(model, features)
    if loss_kind == "ce":
        loss, dlogits = _ce_batch(logits, target)
    elif loss_kind == "kl":
        loss, dlogits = _kl_batch(logits, target, temperature)
    else:
        raise InvalidInputError(f"unknown loss_kind {loss_kind!r}")
    return loss, _backward(model, ids, inputs, preacts, dlogits)


def sgd_step_features(
    model: Model,
    features: np.ndarray,
    target,
    loss_kind: str,
    learning_rate: float,
    temperature: float = 1.0,
) -> tuple[Model, float]:
    """One SGD update on the mean batch loss; fast path on stacked features."""
    loss, grads = _loss_and_param_grads(model, features, target, loss_kind, temperature)
    params = [p - learning_rate * g for p, g in zip(model.param_arrays(), grads)]
    return model.with_params(params), loss


def train_step(
    model: Model,
    batch,
    labels=None,
    *,
    cfg: TrainConfig,
    loss_kind: str = "ce",
    teacher_logits: np.ndarray | None = None,
    temperature: float = 1.0,
) -> tuple[Model, float]:
    """One SGD update from a batch of instances.

    ``loss_kind='ce'`` trains against ``labels``; ``loss_kind='kl'`` distills
    against fixed ``teacher_logits`` (one row per instance) at ``temperature``.
    """
    features = stack_features(model.arch, batch)
    if loss_kind == "ce":
        target = np.asarray(labels, dtype=np.int64)
        if target.shape != (len(batch),):
            raise InvalidInputError("labels must align with the batch")
        if target.min() < 0 or target.max() >= model.arch.num_classes:
            raise InvalidInputError("label out of range")
    elif loss_kind == "kl":
        target = np.asarray(teacher_logits, dtype=np.float64)
        if target.shape != (len(batch), model.arch.num_classes):
            raise InvalidInputError("teacher_logits must be |batch| x C")
        if not temperature > 0:
            raise InvalidInputError(f"temperature must be > 0, got {temperature}")
    else:
        raise InvalidInputError(f"unknown loss_kind {loss_kind!r}")
    return sgd_step_features(model, features, target, loss_kind, cfg.learning_rate, temperature)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    model: Model,
    batch,
    labels,
    epsilon: float = 1e-4,
    samples_per_array: int = 4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic CE gradients and central differences.

    A seeded subset of entries is probed in every parameter array (always
    including that array's largest-magnitude gradient). The denominator is
    floored at 1e-2 so near-zero entries are effectively compared absolutely.
    """
    if not 0 < epsilon <= 1e-2:
        raise InvalidInputError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    features = stack_features(model.arch, batch)
    target = np.asarray(labels, dtype=np.int64)
    _, analytic = _loss_and_param_grads(model, features, target, "ce")

    def loss_at(arrays: list[np.ndarray]) -> float:
        logits = forward_features(model.with_params(arrays), features)
        loss, _ = _ce_batch(logits, target)
        return loss

    rng = np.random.default_rng(seed)
    base = model.param_arrays()
    worst = 0.0
    for idx, (array, grad) in enumerate(zip(base, analytic)):
        count = min(samples_per_array, array.size)
        probes = set(rng.choice(array.size, size=count, replace=False).tolist())
        probes.add(int(np.abs(grad).argmax()))
        for flat in sorted(probes):
            original = array.flat[flat]
            perturbed = array.copy()
            perturbed.flat[flat] = original + epsilon
            up = loss_at(base[:idx] + [perturbed] + base[idx + 1 :])
            perturbed.flat[flat] = original - epsilon
            down = loss_at(base[:idx] + [perturbed] + base[idx + 1 :])
            numeric = (up - down) / (2.0 * epsilon)
            expected = grad.flat[flat]
            rel = abs(numeric - expected) / max(abs(numeric), abs(expected), 1e-2)
            worst = max(worst, rel)
    return worst
