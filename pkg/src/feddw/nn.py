"""Minimal feed-forward network engine: dense layers + ReLU, exact
backpropagation, softmax cross-entropy, and Adam.

A model is split into three named sections (feature extractor, mapping
layers, classification layer) so the consistency regularizer can reach the
final weight matrix directly. Parameters are float64 numpy arrays; every
operation is deterministic.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError, TrainingDivergedError
from .numerics import Rng, as_matrix

MODEL_FORMAT_VERSION = 1


class ReLU:
    """Elementwise max(x, 0)."""

    def __repr__(self) -> str:
        return "ReLU()"


@dataclass
class Dense:
    """Affine layer with weights of shape (out, in) and optional bias."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


Layer = Dense | ReLU


@dataclass
class Model:
    feature_extractor: list[Layer]
    mapping_layer: list[Layer]
    classification_layer: Dense
    class_count: int

    def layers(self) -> list[Layer]:
        return [*self.feature_extractor, *self.mapping_layer, self.classification_layer]

    @property
    def classifier_weights(self) -> np.ndarray:
        return self.classification_layer.weights

    def validate(self) -> None:
        if self.classification_layer.out_dim != self.class_count:
            raise InvalidInputError(
                f"classification layer outputs {self.classification_layer.out_dim}, "
                f"expected {self.class_count} classes"
            )
        dense = [l for l in self.layers() if isinstance(l, Dense)]
        for prev, nxt in zip(dense, dense[1:]):
            if prev.out_dim != nxt.in_dim:
                raise InvalidInputError(
                    f"dense layer chain mismatch: {prev.out_dim} -> {nxt.in_dim}"
                )


@dataclass(frozen=True)
class ModelSpec:
    """Shape description used to build fresh models.

    The mapping section is two dense layers ending at ``embed`` units, the
    width handed to the classification layer (128 by default).
    """

    input_dim: int
    class_count: int
    hidden: int = 128
    embed: int = 128
    classifier_bias: bool = True


def init_model(spec: ModelSpec, rng: Rng) -> Model:
    """Build a model with Kaiming-uniform fan-in initialization."""
    gen = rng.generator

    def dense(fan_in: int, fan_out: int, bias: bool) -> Dense:
        bound = math.sqrt(6.0 / fan_in)
        w = gen.uniform(-bound, bound, size=(fan_out, fan_in))
        b = gen.uniform(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), size=fan_out) if bias else None
        return Dense(w, b)

    model = Model(
        feature_extractor=[dense(spec.input_dim, spec.hidden, True), ReLU()],
        mapping_layer=[
            dense(spec.hidden, spec.embed, True),
            ReLU(),
            dense(spec.embed, spec.embed, True),
            ReLU(),
        ],
        classification_layer=dense(spec.embed, spec.class_count, spec.classifier_bias),
        class_count=spec.class_count,
    )
    model.validate()
    return model


def clone_model(model: Model) -> Model:
    return copy.deepcopy(model)


def param_arrays(model: Model) -> list[np.ndarray]:
    """Parameters in canonical order: layer order, weights before bias."""
    out: list[np.ndarray] = []
    for layer in model.layers():
        if isinstance(layer, Dense):
            out.append(layer.weights)
            if layer.bias is not None:
                out.append(layer.bias)
    return out


def param_count(model: Model) -> int:
    return sum(p.size for p in param_arrays(model))


def flatten_params(model: Model) -> np.ndarray:
    return np.concatenate([p.ravel() for p in param_arrays(model)])


def set_flat_params(model: Model, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    params = param_arrays(model)
    expected = sum(p.size for p in params)
    if flat.ndim != 1 or flat.size != expected:
        raise InvalidInputError(f"flat parameter vector has {flat.size} entries, expected {expected}")
    offset = 0
    for p in params:
        p[...] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size


def forward(model: Model, batch) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the network on a batch (rows are samples).

    Returns the logits and a cache of per-layer inputs sufficient for an
    exact backward pass.
    """
    x = as_matrix(batch, "batch")
    cache: list[np.ndarray] = []
    for layer in model.layers():
        cache.append(x)
        if isinstance(layer, Dense):
            if x.shape[1] != layer.in_dim:
                raise InvalidInputError(
                    f"batch has {x.shape[1]} features, layer expects {layer.in_dim}"
                )
            x = x @ layer.weights.T
            if layer.bias is not None:
                x = x + layer.bias
        else:
            x = np.maximum(x, 0.0)
    return x, cache


def _check_labels(labels, class_count: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise InvalidInputError("labels must be a 1-D integer vector")
    if y.size and (y.min() < 0 or y.max() >= class_count):
        raise InvalidInputError(
            f"label out of range [0, {class_count}): min={y.min()}, max={y.max()}"
        )
    return y


def cross_entropy_loss(logits, labels) -> float:
    """Mean negative log-likelihood of the true class, computed in log space."""
    logits = as_matrix(logits, "logits")
    y = _check_labels(labels, logits.shape[1])
    if y.size != logits.shape[0]:
        raise InvalidInputError(f"{logits.shape[0]} logit rows vs {y.size} labels")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(y.size), y]))


def backward(
    model: Model,
    cache: list[np.ndarray],
    logits: np.ndarray,
    labels,
    extra_classifier_grad: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Exact gradient of the mean cross-entropy w.r.t. every parameter.

    ``extra_classifier_grad``, when given, is added to the gradient of the
    classification-layer weights only (it carries loss terms that depend on
    those weights but not on the batch).
    """
    y = _check_labels(labels, model.class_count)
    batch = logits.shape[0]
    if extra_classifier_grad is not None:
        extra_classifier_grad = np.asarray(extra_classifier_grad, dtype=np.float64)
        if extra_classifier_grad.shape != model.classifier_weights.shape:
            raise InvalidInputError(
                f"extra classifier gradient shape {extra_classifier_grad.shape} "
                f"!= classifier weight shape {model.classifier_weights.shape}"
            )

    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(batch), y] -= 1.0
    delta = probs / batch

    layers = model.layers()
    rev: list[tuple[np.ndarray, np.ndarray | None] | None] = []
    for layer, x in zip(reversed(layers), reversed(cache)):
        if isinstance(layer, Dense):
            dw = delta.T @ x
            db = delta.sum(axis=0) if layer.bias is not None else None
            delta = delta @ layer.weights
            rev.append((dw, db))
        else:
            delta = delta * (x > 0)
            rev.append(None)

    if extra_classifier_grad is not None:
        dw, db = rev[0]  # reversed order: classification layer comes first
        rev[0] = (dw + extra_classifier_grad, db)

    grads: list[np.ndarray] = []
    for entry in reversed(rev):
        if entry is None:
            continue
        dw, db = entry
        grads.append(dw)
        if db is not None:
            grads.append(db)
    return grads


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_adam(model: Model, learning_rate: float) -> AdamState:
    params = param_arrays(model)
    return AdamState(
        learning_rate=learning_rate,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(model: Model, state: AdamState, grads: list[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place."""
    params = param_arrays(model)
    if len(grads) != len(params):
        raise InvalidInputError(f"{len(grads)} gradient arrays for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient in optimizer step")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def evaluate(model: Model, features, labels, batch_size: int = 1024) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a dataset, batched."""
    x = as_matrix(features, "features")
    y = _check_labels(labels, model.class_count)
    n = x.shape[0]
    if n == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = x[start : start + batch_size]
        yb = y[start : start + batch_size]
        logits, _ = forward(model, xb)
        loss_sum += cross_entropy_loss(logits, yb) * xb.shape[0]
        correct += int(np.sum(logits.argmax(axis=1) == yb))
    return loss_sum / n, correct / n


def _layer_specs(layers: list[Layer]) -> list[dict]:
    specs = []
    for layer in layers:
        if isinstance(layer, Dense):
            specs.append(
                {"kind": "dense", "out": layer.out_dim, "in": layer.in_dim,
                 "bias": layer.bias is not None}
            )
        else:
            specs.append({"kind": "relu"})
    return specs


def _build_layers(specs: list[dict]) -> list[Layer]:
    layers: list[Layer] = []
    for s in specs:
        if s["kind"] == "dense":
            layers.append(
                Dense(np.zeros((s["out"], s["in"])), np.zeros(s["out"]) if s["bias"] else None)
            )
        elif s["kind"] == "relu":
            layers.append(ReLU())
        else:
            raise FormatError(f"unknown layer kind {s['kind']!r} in model manifest")
    return layers


def model_manifest(model: Model) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "class_count": model.class_count,
        "feature_extractor": _layer_specs(model.feature_extractor),
        "mapping_layer": _layer_specs(model.mapping_layer),
        "classification_layer": _layer_specs([model.classification_layer])[0],
    }


def save_model(model: Model, directory, stem: str = "model") -> None:
    """Write parameters as a flat little-endian float64 blob + JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}.params").write_bytes(flatten_params(model).astype("<f8").tobytes())
    (directory / f"{stem}.json").write_text(json.dumps(model_manifest(model), indent=2) + "\n")


def load_model(directory, stem: str = "model") -> Model:
    directory = Path(directory)
    manifest_path = directory / f"{stem}.json"
    params_path = directory / f"{stem}.params"
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version in {manifest_path}")
    clf = _build_layers([manifest["classification_layer"]])[0]
    model = Model(
        feature_extractor=_build_layers(manifest["feature_extractor"]),
        mapping_layer=_build_layers(manifest["mapping_layer"]),
        classification_layer=clf,
        class_count=int(manifest["class_count"]),
    )
    raw = params_path.read_bytes()
    expected = param_count(model) * 8
    if len(raw) != expected:
        raise FormatError(f"{params_path}: expected {expected} bytes, found {len(raw)}")
    set_flat_params(model, np.frombuffer(raw, dtype="<f8"))
    model.validate()
    return model
