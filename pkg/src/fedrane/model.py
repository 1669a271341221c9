"""Per-client neural model: MLP feature extractor, predictor head, losses,
plain SGD, and lossless parameter flattening for the server.

Parameters are plain numpy arrays grouped in `MLPParams`. Training wraps
them in tape `Var`s batch by batch (`params_to_vars`), runs the forward
builders below, and reads gradients back in the same canonical order that
`flatten` uses, so client updates and server aggregation always agree on
the layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from fedrane.numeric import Var, add, backward, exp, log, matmul, relu, scale, sumv

Layout = tuple[tuple[str, tuple[int, ...], int], ...]


@dataclass
class MLPParams:
    """Weights of one client model.

    extractor: affine layers ending in the embedding; all but the last are
        followed by relu.
    predictor: affine layers ending in class logits.
    lra_weights: per message-passing step (w, w_recv, w_send), each
        embed_dim x embed_dim.
    """

    extractor: list[tuple[np.ndarray, np.ndarray]]
    predictor: list[tuple[np.ndarray, np.ndarray]]
    lra_weights: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)


@dataclass(frozen=True)
class FlatParams:
    """A model serialized to one float64 vector plus its layout record."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        expected = sum(int(np.prod(shape)) for _, shape, _ in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ValueError(f"values length {self.values.size} does not match layout ({expected})")


def init_params(
    in_dim: int,
    hidden: tuple[int, ...],
    embed_dim: int,
    predictor_hidden: tuple[int, ...],
    classes: int,
    mp_steps: int,
    seed: int,
) -> MLPParams:
    """Symmetric uniform init, a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    def chain(dims):
        return [
            (glorot(dims[i], dims[i + 1]), np.zeros(dims[i + 1]))
            for i in range(len(dims) - 1)
        ]

    extractor = chain((in_dim, *hidden, embed_dim))
    predictor = chain((embed_dim, *predictor_hidden, classes))
    lra_weights = [
        tuple(glorot(embed_dim, embed_dim) for _ in range(3)) for _ in range(mp_steps)
    ]
    return MLPParams(extractor=extractor, predictor=predictor, lra_weights=lra_weights)


def iter_arrays(params: MLPParams) -> Iterator[tuple[str, np.ndarray]]:
    """Canonical (name, array) order shared by flatten and gradient collection."""
    for i, (w, b) in enumerate(params.extractor):
        yield f"extractor.{i}.weight", w
        yield f"extractor.{i}.bias", b
    for i, (w, b) in enumerate(params.predictor):
        yield f"predictor.{i}.weight", w
        yield f"predictor.{i}.bias", b
    for i, (w, wm, wn) in enumerate(params.lra_weights):
        yield f"relational.{i}.w", w
        yield f"relational.{i}.w_recv", wm
        yield f"relational.{i}.w_send", wn


def flatten(params: MLPParams) -> FlatParams:
    """Serialize to one vector; layer order then row-major within each array."""
    names, chunks, layout = [], [], []
    offset = 0
    for name, arr in iter_arrays(params):
        layout.append((name, tuple(arr.shape), offset))
        chunks.append(np.ravel(arr))
        offset += arr.size
        names.append(name)
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return FlatParams(values=values, layout=tuple(layout))


def unflatten(flat: FlatParams, layout: Optional[Layout] = None) -> MLPParams:
    """Rebuild an MLPParams from a flat vector; inverse of flatten."""
    if layout is not None and layout != flat.layout:
        raise ValueError("layout mismatch between flat vector and requested layout")
    groups: dict[str, dict[int, dict[str, np.ndarray]]] = {"extractor": {}, "predictor": {}, "relational": {}}
    for name, shape, offset in flat.layout:
        kind, idx, part = name.split(".")
        size = int(np.prod(shape))
        arr = flat.values[offset : offset + size].reshape(shape).copy()
        groups[kind].setdefault(int(idx), {})[part] = arr
    extractor = [
        (groups["extractor"][i]["weight"], groups["extractor"][i]["bias"])
        for i in sorted(groups["extractor"])
    ]
    predictor = [
        (groups["predictor"][i]["weight"], groups["predictor"][i]["bias"])
        for i in sorted(groups["predictor"])
    ]
    lra_weights = [
        (groups["relational"][i]["w"], groups["relational"][i]["w_recv"], groups["relational"][i]["w_send"])
        for i in sorted(groups["relational"])
    ]
    return MLPParams(extractor=extractor, predictor=predictor, lra_weights=lra_weights)


def sgd_step(params: FlatParams, grads: FlatParams, lr: float) -> FlatParams:
    """values - lr * grads; both operands must share one layout."""
    if params.layout != grads.layout:
        raise ValueError("sgd_step: parameter and gradient layouts differ")
    return FlatParams(values=params.values - lr * grads.values, layout=params.layout)


def flat_to_json(flat: FlatParams) -> str:
    doc = {
        "layout": [[name, list(shape), offset] for name, shape, offset in flat.layout],
        "values": flat.values.tolist(),
    }
    return json.dumps(doc)


def flat_from_json(text: str) -> FlatParams:
    doc = json.loads(text)
    layout = tuple((name, tuple(shape), offset) for name, shape, offset in doc["layout"])
    return FlatParams(values=np.asarray(doc["values"], dtype=np.float64), layout=layout)


@dataclass
class ModelVars:
    """MLPParams mirrored into tape Vars for one forward/backward pass."""

    extractor: list[tuple[Var, Var]]
    predictor: list[tuple[Var, Var]]
    lra_weights: list[tuple[Var, Var, Var]]


def params_to_vars(params: MLPParams) -> ModelVars:
    return ModelVars(
        extractor=[(Var(w), Var(b)) for w, b in params.extractor],
        predictor=[(Var(w), Var(b)) for w, b in params.predictor],
        lra_weights=[tuple(Var(a) for a in step) for step in params.lra_weights],
    )


def collect_grads(mvars: ModelVars, params: MLPParams) -> FlatParams:
    """Read adjoints off the Vars in canonical order, as a FlatParams.

    Vars that never entered the loss graph keep a zero gradient.
    """

    def grad_of(v: Var) -> np.ndarray:
        return v.grad if v.grad is not None else np.zeros_like(v.value)

    shadow = MLPParams(
        extractor=[(grad_of(w), grad_of(b).reshape(-1)) for w, b in mvars.extractor],
        predictor=[(grad_of(w), grad_of(b).reshape(-1)) for w, b in mvars.predictor],
        lra_weights=[tuple(grad_of(v) for v in step) for step in mvars.lra_weights],
    )
    flat = flatten(shadow)
    if flat.layout != flatten(params).layout:
        raise ValueError("gradient layout does not match parameter layout")
    return flat


def _affine_chain(layers: list[tuple[Var, Var]], x: Var) -> Var:
    """Affine layers with relu between them; the last layer stays linear."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = add(matmul(h, w), b)
        if i < len(layers) - 1:
            h = relu(h)
    return h


def extract_features(mvars: ModelVars, x: Var) -> Var:
    """Batch features -> embeddings, recorded on the tape."""
    return _affine_chain(mvars.extractor, x)


def predict_logits(mvars: ModelVars, z: Var) -> Var:
    """Embeddings -> class logits, recorded on the tape."""
    return _affine_chain(mvars.predictor, z)


def feature_extract(params: MLPParams, x: np.ndarray) -> np.ndarray:
    """Evaluation-mode embedding of a batch."""
    return extract_features(params_to_vars(params), Var(x)).value


def predict(params: MLPParams, z: np.ndarray) -> np.ndarray:
    """Evaluation-mode logits for a batch of embeddings."""
    return predict_logits(params_to_vars(params), Var(z)).value


def cross_entropy_graph(logits: Var, labels: np.ndarray) -> Var:
    """Mean -log softmax(logits)[label], log-sum-exp stabilized."""
    labels = np.asarray(labels)
    n, c = logits.value.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    row_max = logits.value.max(axis=1, keepdims=True)  # constant shift
    shifted = add(logits, -row_max)
    lse = log(sumv(exp(shifted), axis=1))
    log_probs = add(shifted, scale(lse, -1.0))
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return scale(sumv(scale(log_probs, onehot)), -1.0 / n)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    loss = cross_entropy_graph(Var(logits), labels)
    return loss.item()


def total_loss(pred_loss: float, cd_loss: float, lambda_cd: float) -> float:
    """pred_loss + lambda_cd * cd_loss."""
    if lambda_cd < 0:
        raise ValueError("lambda_cd must be >= 0")
    return pred_loss + lambda_cd * cd_loss


def accuracy(params: MLPParams, z: np.ndarray, labels: np.ndarray) -> float:
    logits = predict(params, z)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
