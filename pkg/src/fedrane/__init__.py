"""Desk-scale federated learning with per-batch relational augmentation of
sample embeddings and Nash-bargaining aggregation of client deviations."""

from fedrane.data import (
    Dataset,
    Partition,
    dirichlet_partition,
    generate_synthetic,
    load_csv,
    save_csv,
    split_local,
)
from fedrane.federation import RoundMetrics, RunConfig, run
from fedrane.gne import (
    BargainWeights,
    DeviationMatrix,
    aggregate,
    compute_deviations,
    fedavg_weights,
    gram,
    nash_solve,
    utilities,
)
from fedrane.lra import (
    RelationalGraph,
    attention_weights,
    build_graph,
    contrastive_loss,
    lra_forward,
    message_passing,
    pearson_matrix,
    slim_objective,
    slim_solve,
)
from fedrane.model import (
    FlatParams,
    MLPParams,
    cross_entropy,
    feature_extract,
    flatten,
    init_params,
    predict,
    sgd_step,
    total_loss,
    unflatten,
)

__version__ = "0.1.0"

__all__ = [
    "BargainWeights",
    "Dataset",
    "DeviationMatrix",
    "FlatParams",
    "MLPParams",
    "Partition",
    "RelationalGraph",
    "RoundMetrics",
    "RunConfig",
    "aggregate",
    "attention_weights",
    "build_graph",
    "compute_deviations",
    "contrastive_loss",
    "cross_entropy",
    "dirichlet_partition",
    "fedavg_weights",
    "feature_extract",
    "flatten",
    "generate_synthetic",
    "gram",
    "init_params",
    "load_csv",
    "lra_forward",
    "message_passing",
    "nash_solve",
    "pearson_matrix",
    "predict",
    "run",
    "save_csv",
    "sgd_step",
    "slim_objective",
    "slim_solve",
    "split_local",
    "total_loss",
    "unflatten",
    "utilities",
]
