"""Round-based federated training loop.

Each round every client copies the global model, trains locally (with or
without relational augmentation), and the server combines the resulting
deviations — either by Nash bargaining or by sample-ratio averaging. Noise
sources are all derived from the master seed through fixed SeedSequence
tags, so a run is a pure function of its RunConfig and repeated runs are
bit-identical. Clients execute sequentially; concurrency could not change
the result because every client owns a derived stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from fedrane import data as data_mod
from fedrane import gne, lra, model
from fedrane.model import FlatParams, MLPParams
from fedrane.numeric import Var, add, backward, scale

AGGREGATORS = ("gne", "fedavg")

# seed derivation tags; never reorder (would silently change all runs)
_TAG_DATA, _TAG_HOLDOUT, _TAG_PARTITION, _TAG_SPLIT, _TAG_INIT, _TAG_SHUFFLE = range(6)


@dataclass
class RunConfig:
    """Everything a run depends on; two equal configs give identical runs."""

    clients: int = 20
    rounds: int = 10
    local_epochs: int = 5
    batch_size: int = 128
    lr: float = 0.5
    lambda_r: float = 0.1
    lambda_cd: float = 0.2
    tau1: float = 0.8
    mp_steps: int = 2
    alpha: float = 0.5
    seed: int = 0
    aggregator: str = "gne"
    lra_enabled: bool = True
    attention_softmax: bool = False
    # dataset: synthetic mixture unless csv_path is given
    classes: int = 4
    dim: int = 8
    per_class: int = 250
    spread: float = 0.25
    csv_path: Optional[str] = None
    holdout_fraction: float = 0.1
    # model sizes
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 64
    predictor_hidden: tuple[int, ...] = (64,)
    # relational mining controls
    tau_edge: float = 1e-3
    slim_max_iter: int = 50
    slim_tol: float = 1e-6
    # optional per-batch graph dump (JSONL path)
    dump_graphs: Optional[str] = None

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        positive = {
            "clients": self.clients,
            "local_epochs": self.local_epochs + 1,  # 0 epochs allowed
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lambda_r": self.lambda_r,
            "tau1": self.tau1,
            "alpha": self.alpha,
            "holdout_fraction": self.holdout_fraction,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rounds < 0 or self.mp_steps < 0 or self.lambda_cd < 0:
            raise ValueError("rounds, mp_steps and lambda_cd must be >= 0")
        self.hidden = tuple(self.hidden)
        self.predictor_hidden = tuple(self.predictor_hidden)


@dataclass
class RoundMetrics:
    round: int
    gfl_accuracy: float
    pfl_accuracy: float
    per_client_loss: list[float]
    cosine: list[float]
    bargain_residual: float
    converged: bool
    weights: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.gfl_accuracy <= 1.0 and 0.0 <= self.pfl_accuracy <= 1.0):
            raise ValueError("accuracies must lie in [0, 1]")
        if self.cosine and (min(self.cosine) < -1.0 - 1e-9 or max(self.cosine) > 1.0 + 1e-9):
            raise ValueError("cosines must lie in [-1, 1]")


def _seed_for(master: int, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((master, *tags))


def _derived_int_seed(master: int, *tags: int) -> int:
    return int(_seed_for(master, *tags).generate_state(1)[0])


def cosine_diagnostic(g, delta) -> np.ndarray:
    """cos(angle) between each client deviation and the applied global update.

    Zero-norm deviation columns report 0 by convention; a zero update
    direction is an error.
    """
    m = g.g if isinstance(g, gne.DeviationMatrix) else np.asarray(g, dtype=np.float64)
    vec = delta.values if isinstance(delta, FlatParams) else np.asarray(delta, dtype=np.float64)
    dnorm = np.linalg.norm(vec)
    if dnorm == 0.0:
        raise ValueError("update direction is zero")
    col_norms = np.linalg.norm(m, axis=0)
    dots = m.T @ vec
    safe = np.where(col_norms > 0.0, col_norms, 1.0)
    return np.where(col_norms > 0.0, dots / (safe * dnorm), 0.0)


def _batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(indices.size)
    shuffled = indices[order]
    for start in range(0, shuffled.size, batch_size):
        yield shuffled[start : start + batch_size]


def _train_one_client(
    client_id: int,
    theta_global: FlatParams,
    config: RunConfig,
    partition: data_mod.Partition,
    dataset: data_mod.Dataset,
    round_idx: int,
    dump: Optional[Callable[[dict], None]] = None,
) -> tuple[FlatParams, float]:
    """Local training for one round; returns (new params, mean batch loss)."""
    if partition.train_indices.size == 0:
        raise ValueError(f"client {client_id}: empty train set")
    flat = theta_global
    losses: list[float] = []
    for epoch in range(config.local_epochs):
        rng = np.random.default_rng(
            _seed_for(config.seed, _TAG_SHUFFLE, round_idx, client_id, epoch)
        )
        for batch_no, batch_idx in enumerate(_batches(partition.train_indices, config.batch_size, rng)):
            if batch_idx.size < 2:
                continue  # augmentation and its loss need at least two samples
            params = model.unflatten(flat)
            mvars = model.params_to_vars(params)
            x = dataset.features[batch_idx]
            y = dataset.labels[batch_idx]
            if config.lra_enabled:
                out = lra.lra_forward(
                    mvars,
                    x,
                    lambda_r=config.lambda_r,
                    tau1=config.tau1,
                    steps=config.mp_steps,
                    tau_edge=config.tau_edge,
                    attention_softmax=config.attention_softmax,
                    slim_max_iter=config.slim_max_iter,
                    slim_tol=config.slim_tol,
                )
                logits = model.predict_logits(mvars, out.z_tilde)
                pred_loss = model.cross_entropy_graph(logits, y)
                loss = add(pred_loss, scale(out.cd_loss, config.lambda_cd))
                if dump is not None:
                    dump(
                        {
                            "round": round_idx,
                            "client": client_id,
                            "epoch": epoch,
                            "batch": batch_no,
                            "corr": np.round(out.corr, 6).tolist(),
                            "mined": np.round(out.graph.b, 6).tolist(),
                            "adjacency_eigvals": np.round(
                                np.linalg.eigvalsh(out.graph.a), 6
                            ).tolist(),
                            "cd_loss": out.cd_loss.item(),
                        }
                    )
            else:
                z = model.extract_features(mvars, Var(x))
                logits = model.predict_logits(mvars, z)
                loss = model.cross_entropy_graph(logits, y)
            backward(loss)
            grads = model.collect_grads(mvars, params)
            flat = model.sgd_step(flat, grads, config.lr)
            losses.append(loss.item())
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return flat, mean_loss


def client_execute(
    client_id: int,
    theta_global: FlatParams,
    config: RunConfig,
    partition: data_mod.Partition,
    dataset: data_mod.Dataset,
    round_idx: int = 0,
) -> FlatParams:
    """One client's local update for a round (parameters only)."""
    flat, _ = _train_one_client(client_id, theta_global, config, partition, dataset, round_idx)
    return flat


@dataclass
class ServerResult:
    theta: FlatParams
    weights: np.ndarray
    residual: float
    converged: bool


def server_execute(
    theta: FlatParams,
    client_params: list[FlatParams],
    counts: list[int],
    config: RunConfig,
) -> ServerResult:
    """Combine client results into the next global model.

    The bargaining path reports its KKT residual; the sample-ratio path
    reports -1 as a not-applicable sentinel.
    """
    if not client_params:
        raise ValueError("need at least one client result")
    devs = gne.compute_deviations(theta, client_params)
    if config.aggregator == "gne":
        result = gne.nash_solve(devs)
        new_theta = gne.aggregate(theta, devs, result.p)
        return ServerResult(
            theta=new_theta,
            weights=result.p,
            residual=result.residual,
            converged=result.converged,
        )
    weights = gne.fedavg_weights(counts)
    new_theta = gne.aggregate(theta, devs, weights)
    return ServerResult(theta=new_theta, weights=weights, residual=-1.0, converged=True)


def _evaluate(
    params: MLPParams,
    features: np.ndarray,
    labels: np.ndarray,
    config: RunConfig,
) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) over fixed-order batches.

    With augmentation enabled the evaluation pipeline mirrors training:
    each batch is mined and message-passed before prediction. A trailing
    singleton batch falls back to the raw embedding.
    """
    n = labels.size
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, config.batch_size):
        x = features[start : start + config.batch_size]
        y = labels[start : start + config.batch_size]
        if config.lra_enabled and x.shape[0] >= 2:
            out = lra.lra_forward(
                params,
                x,
                lambda_r=config.lambda_r,
                tau1=config.tau1,
                steps=config.mp_steps,
                tau_edge=config.tau_edge,
                attention_softmax=config.attention_softmax,
                slim_max_iter=config.slim_max_iter,
                slim_tol=config.slim_tol,
            )
            z = out.z_tilde.value
        else:
            z = model.feature_extract(params, x)
        logits = model.predict(params, z)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        loss_sum += model.cross_entropy(logits, y) * y.size
    return correct / n, loss_sum / n


@dataclass
class RunOutput:
    metrics: list[RoundMetrics]
    global_params: FlatParams
    client_params: list[FlatParams]
    config: RunConfig


def run(config: RunConfig) -> RunOutput:
    """Execute a full federated run per the configuration.

    Emits one metrics record per round plus a round-0 record for the
    freshly initialized model. The global-pool score is accuracy on a
    held-out stratified sample; the personalized score is the unweighted
    mean of each client's accuracy on its own test split, using that
    round's post-training local model.
    """
    if config.csv_path:
        dataset = data_mod.load_csv(config.csv_path)
    else:
        dataset = data_mod.generate_synthetic(
            config.classes,
            config.dim,
            config.per_class,
            config.spread,
            _derived_int_seed(config.seed, _TAG_DATA),
        )
    kept, held = data_mod.holdout_split(
        dataset, config.holdout_fraction, _derived_int_seed(config.seed, _TAG_HOLDOUT)
    )
    local_pool = data_mod.Dataset(
        features=dataset.features[kept],
        labels=dataset.labels[kept],
        num_classes=dataset.num_classes,
    )
    partitions = data_mod.dirichlet_partition(
        local_pool,
        config.clients,
        config.alpha,
        _derived_int_seed(config.seed, _TAG_PARTITION),
    )
    partitions = [
        data_mod.split_local(p, 0.75, _derived_int_seed(config.seed, _TAG_SPLIT, p.client_id))
        if p.indices.size >= 4
        else data_mod.Partition(
            client_id=p.client_id,
            indices=p.indices,
            train_indices=p.indices,
            test_indices=p.indices,
        )
        for p in partitions
    ]

    init = model.init_params(
        in_dim=local_pool.features.shape[1],
        hidden=config.hidden,
        embed_dim=config.embed_dim,
        predictor_hidden=config.predictor_hidden,
        classes=dataset.num_classes,
        mp_steps=config.mp_steps,
        seed=_derived_int_seed(config.seed, _TAG_INIT),
    )
    theta = model.flatten(init)

    dump_fh = open(config.dump_graphs, "w", encoding="utf-8") if config.dump_graphs else None

    def dump_record(record: dict) -> None:
        dump_fh.write(json.dumps(record) + "\n")

    gfl_x, gfl_y = dataset.features[held], dataset.labels[held]

    def pfl_of(client_flats: list[FlatParams]) -> tuple[float, list[float]]:
        accs = []
        for p, flat in zip(partitions, client_flats):
            params = model.unflatten(flat)
            acc, _ = _evaluate(
                params,
                local_pool.features[p.test_indices],
                local_pool.labels[p.test_indices],
                config,
            )
            accs.append(acc)
        return float(np.mean(accs)), accs

    try:
        metrics: list[RoundMetrics] = []
        gfl0, _ = _evaluate(model.unflatten(theta), gfl_x, gfl_y, config)
        pfl0, _ = pfl_of([theta] * config.clients)
        metrics.append(
            RoundMetrics(
                round=0,
                gfl_accuracy=gfl0,
                pfl_accuracy=pfl0,
                per_client_loss=[],
                cosine=[0.0] * config.clients,
                bargain_residual=-1.0,
                converged=True,
                weights=[],
            )
        )

        client_flats = [theta] * config.clients
        for round_idx in range(1, config.rounds + 1):
            client_flats = []
            losses = []
            for p in partitions:
                flat, mean_loss = _train_one_client(
                    p.client_id,
                    theta,
                    config,
                    p,
                    local_pool,
                    round_idx,
                    dump=dump_record if dump_fh else None,
                )
                client_flats.append(flat)
                losses.append(mean_loss)
            counts = [int(p.train_indices.size) for p in partitions]
            server = server_execute(theta, client_flats, counts, config)
            delta = server.theta.values - theta.values
            devs = gne.compute_deviations(theta, client_flats)
            if np.linalg.norm(delta) > 0.0:
                cosines = cosine_diagnostic(devs, delta)
            else:
                cosines = np.zeros(config.clients)
            theta = server.theta

            gfl, _ = _evaluate(model.unflatten(theta), gfl_x, gfl_y, config)
            pfl, _ = pfl_of(client_flats)
            metrics.append(
                RoundMetrics(
                    round=round_idx,
                    gfl_accuracy=gfl,
                    pfl_accuracy=pfl,
                    per_client_loss=losses,
                    cosine=cosines.tolist(),
                    bargain_residual=server.residual,
                    converged=server.converged,
                    weights=np.asarray(server.weights, dtype=np.float64).tolist(),
                )
            )
    finally:
        if dump_fh:
            dump_fh.close()

    return RunOutput(
        metrics=metrics, global_params=theta, client_params=client_flats, config=config
    )


CSV_HEADER = "round,gfl,pfl,residual,converged,min_cosine,mean_cosine"


def metrics_to_csv(metrics: list[RoundMetrics]) -> str:
    lines = [CSV_HEADER]
    for m in metrics:
        cos = m.cosine if m.cosine else [0.0]
        lines.append(
            ",".join(
                [
                    str(m.round),
                    repr(m.gfl_accuracy),
                    repr(m.pfl_accuracy),
                    repr(m.bargain_residual),
                    str(int(m.converged)),
                    repr(min(cos)),
                    repr(float(np.mean(cos))),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def metrics_to_json(output: RunOutput) -> str:
    doc = {
        "config": _config_doc(output.config),
        "rounds": [asdict(m) for m in output.metrics],
    }
    return json.dumps(doc, indent=1)


def _config_doc(config: RunConfig) -> dict:
    doc = asdict(config)
    doc["hidden"] = list(config.hidden)
    doc["predictor_hidden"] = list(config.predictor_hidden)
    return doc
