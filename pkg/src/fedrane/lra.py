"""Local relational augmentation of a batch of embeddings.

Pipeline per batch: Pearson correlations between sample embeddings ->
low-rank self-reconstruction weights (an alternating sparse-linear-method
solve) -> symmetrized sample graph -> attentive message passing over the
graph -> contrastive alignment loss between original and augmented
embeddings.

The mined graph is a constant with respect to training: gradients flow
through embeddings, attention, and the passing weights, never through the
alternating solve.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from fedrane.model import MLPParams, ModelVars, extract_features, params_to_vars
from fedrane.numeric import (
    Var,
    add,
    exp,
    inv_sqrt_psd,
    log,
    matmul,
    pearson,
    row_softmax,
    scale,
    sqrt_psd_trace,
    sumv,
)

SLIM_EPS = 1e-8
TAU_EDGE = 1e-3


def pearson_matrix(z: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Pearson correlation matrix between the rows of a batch embedding.

    Rows are centered over coordinates; denominators are floored at eps so
    constant rows give ~0 off-diagonal correlation. The diagonal is forced
    to exactly 1.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 2:
        raise ValueError(f"need at least a 2x2 batch, got shape {z.shape}")
    c = z - z.mean(axis=1, keepdims=True)
    r = np.maximum(np.linalg.norm(c, axis=1), eps)
    p = (c @ c.T) / np.outer(r, r)
    np.fill_diagonal(p, 1.0)
    _check_correlation(p)
    return p


def _check_correlation(p: np.ndarray) -> None:
    if np.max(np.abs(p - p.T)) > 1e-10:
        raise AssertionError("correlation matrix is not symmetric")
    if np.max(np.abs(np.diag(p) - 1.0)) != 0.0:
        raise AssertionError("correlation diagonal must be exactly 1")
    if np.max(np.abs(p)) > 1.0 + 1e-12:
        raise AssertionError("correlation entries exceed [-1, 1]")


def slim_objective(p: np.ndarray, b: np.ndarray, lambda_r: float, eps: float = SLIM_EPS) -> float:
    """Alternating objective at the self-consistent graph weight.

    0.5 ||P - PB||_F^2 plus the low-rank penalty evaluated at its own
    optimal weight matrix, completion terms included — the quantity both
    halves of the alternating solve monotonically decrease. Up to the eps
    smoothing this is the reconstruction error plus twice lambda_r times
    the nuclear norm of B.
    """
    fit = 0.5 * np.linalg.norm(p - p @ b, "fro") ** 2
    return fit + 2.0 * lambda_r * sqrt_psd_trace(b @ b.T, eps)


def _slim_update(ptp: np.ndarray, phi: np.ndarray, lambda_r: float) -> np.ndarray:
    """Exact minimizer of 0.5||P - PB||_F^2 + lambda_r tr(B^T Phi B) with diag(B) = 0.

    One inverse and a diagonal Lagrange correction per column. For a
    spherical Phi this reduces to the classic zero-diagonal closed form
    B_ij = -H_ij / H_jj.
    """
    try:
        h = np.linalg.inv(ptp + lambda_r * (phi + phi.T))
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular system in relational mining: {exc}") from None
    hp = h @ ptp
    gamma = np.diag(hp) / np.diag(h)
    b = hp - h * gamma[None, :]
    np.fill_diagonal(b, 0.0)
    return b


def slim_solve(
    p: np.ndarray,
    lambda_r: float,
    max_iter: int = 50,
    tol: float = 1e-6,
    eps: float = SLIM_EPS,
) -> np.ndarray:
    """Mine relational weights B from a correlation matrix.

    Alternates the closed-form B update (graph weight held fixed) with the
    inverse-square-root weight refresh, from a zero start, until the
    Frobenius change in B drops below tol or max_iter is reached. The
    returned matrix has an exactly zero diagonal.
    """
    if lambda_r <= 0:
        raise ValueError("lambda_r must be positive")
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[0]
    ptp = p.T @ p
    b = np.zeros((n, n))
    for _ in range(max_iter):
        phi = inv_sqrt_psd(b @ b.T, eps)
        b_new = _slim_update(ptp, phi, lambda_r)
        delta = np.linalg.norm(b_new - b, "fro")
        b = b_new
        if delta < tol:
            break
    return b


@dataclass
class RelationalGraph:
    """Mined weights b, symmetrized adjacency a, Laplacian l, degree d."""

    b: np.ndarray
    a: np.ndarray
    l: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        if np.any(np.diag(self.b) != 0.0):
            raise AssertionError("graph weights must have a zero diagonal")
        if np.max(np.abs(self.a - self.a.T)) != 0.0 or self.a.min() < 0.0:
            raise AssertionError("adjacency must be symmetric and nonnegative")
        if np.max(np.abs(self.l.sum(axis=1))) > 1e-10:
            raise AssertionError("Laplacian rows must sum to zero")


def build_graph(b: np.ndarray) -> RelationalGraph:
    """Sample graph from mined weights: a = (|b| + |b|^T)/2, l = d - a."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ValueError(f"expected a square matrix, got {b.shape}")
    if np.any(np.diag(b) != 0.0):
        raise ValueError("mined weights must have an exactly zero diagonal")
    a = (np.abs(b) + np.abs(b).T) / 2.0
    d = np.diag(a.sum(axis=1))
    return RelationalGraph(b=b, a=a, l=d - a, d=d)


def neighborhood_mask(a: np.ndarray, tau_edge: float = TAU_EDGE) -> np.ndarray:
    """0/1 inclusion mask: edges above tau_edge, self always included."""
    mask = (np.asarray(a) > tau_edge).astype(np.float64)
    np.fill_diagonal(mask, 1.0)
    return mask


def _attention_graph(
    h: Var, wm: Var, wn: Var, mask: np.ndarray, dim: int, normalize: bool
) -> Var:
    """Scaled dot-product attention restricted to the inclusion mask."""
    hm = matmul(h, wm, tb=True)
    hn = matmul(h, wn, tb=True)
    raw = scale(matmul(hm, hn, tb=True), 1.0 / np.sqrt(dim))
    if normalize:
        return row_softmax(raw, mask=mask)
    return scale(raw, mask)


def attention_weights(
    h: np.ndarray,
    wm: np.ndarray,
    wn: np.ndarray,
    mask: np.ndarray,
    d: Optional[int] = None,
    normalize: bool = False,
    tau_edge: float = TAU_EDGE,
) -> np.ndarray:
    """Attention coefficients between batch rows over an adjacency mask.

    Entries outside the tau_edge neighborhood (self always included) are 0
    in the default raw form, or excluded from the row softmax when
    normalize is set.
    """
    h = np.asarray(h, dtype=np.float64)
    dim = h.shape[1] if d is None else d
    inc = neighborhood_mask(mask, tau_edge)
    alpha = _attention_graph(Var(h), Var(wm), Var(wn), inc, dim, normalize)
    return alpha.value


def _message_passing_graph(
    z: Var,
    mask: np.ndarray,
    weights: Sequence[tuple],
    steps: int,
    dim: int,
    normalize: bool,
) -> Var:
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if len(weights) < steps:
        raise ValueError(f"need {steps} weight triples, have {len(weights)}")
    h = z
    for l in range(steps):
        w, wm, wn = (v if isinstance(v, Var) else Var(v) for v in weights[l])
        alpha = _attention_graph(h, wm, wn, mask, dim, normalize)
        h = matmul(alpha, matmul(h, w, tb=True))
    return h


def message_passing(
    z: np.ndarray,
    graph: RelationalGraph,
    weights: Sequence[tuple],
    steps: int,
    normalize: bool = False,
    tau_edge: float = TAU_EDGE,
) -> np.ndarray:
    """Aggregate neighbor messages for `steps` rounds; steps = 0 is identity."""
    z = np.asarray(z, dtype=np.float64)
    mask = neighborhood_mask(graph.a, tau_edge)
    out = _message_passing_graph(Var(z), mask, weights, steps, z.shape[1], normalize)
    return out.value


def _contrastive_graph(z: Var, z_tilde: Var, tau1: float) -> Var:
    n = z.value.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if not 0.0 < tau1 <= 1.0:
        raise ValueError("tau1 must lie in (0, 1]")
    two_n = 2 * n
    s = scale(pearson(z, z_tilde), 1.0 / tau1)

    pos_mask = np.zeros((two_n, two_n))
    pos_mask[np.arange(n), np.arange(n) + n] = 1.0
    pos_sum = sumv(scale(s, pos_mask))

    offdiag = 1.0 - np.eye(two_n)
    row_max = np.where(offdiag > 0, s.value, -np.inf).max(axis=1, keepdims=True)
    shifted = exp(add(s, -row_max))
    denom = sumv(scale(shifted, offdiag), axis=1)
    log_denom = add(log(denom), row_max)

    anchor_rows = np.zeros((two_n, 1))
    anchor_rows[:n] = 1.0
    denom_sum = sumv(scale(log_denom, anchor_rows))
    return scale(add(denom_sum, scale(pos_sum, -1.0)), 1.0 / n)


def contrastive_loss(z: np.ndarray, z_tilde: np.ndarray, tau1: float) -> float:
    """Alignment loss between embeddings before and after augmentation.

    Rows of z and z_tilde are stacked; each original row's positive is its
    augmented counterpart, every other stacked row is a negative, and
    similarity is the Pearson coefficient between rows at temperature tau1.
    """
    loss = _contrastive_graph(Var(np.asarray(z)), Var(np.asarray(z_tilde)), tau1)
    return loss.item()


@dataclass
class LraForward:
    """Tape handles from one augmentation pass plus the mined structures."""

    z: Var
    z_tilde: Var
    cd_loss: Var
    corr: np.ndarray
    graph: RelationalGraph


def lra_forward(
    params: Union[MLPParams, ModelVars],
    x_batch: np.ndarray,
    lambda_r: float = 0.1,
    tau1: float = 0.8,
    steps: int = 2,
    tau_edge: float = TAU_EDGE,
    attention_softmax: bool = False,
    slim_max_iter: int = 50,
    slim_tol: float = 1e-6,
) -> LraForward:
    """Extract, mine, augment, and score one batch.

    The correlation matrix and the mined graph are computed from the
    current embedding values and enter the tape as constants.
    """
    mvars = params_to_vars(params) if isinstance(params, MLPParams) else params
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.shape[0] < 2:
        raise ValueError("relational augmentation needs a batch of at least 2")
    z = extract_features(mvars, Var(x_batch))
    corr = pearson_matrix(z.value)
    b = slim_solve(corr, lambda_r, max_iter=slim_max_iter, tol=slim_tol)
    graph = build_graph(b)
    mask = neighborhood_mask(graph.a, tau_edge)
    z_tilde = _message_passing_graph(
        z, mask, mvars.lra_weights, steps, z.value.shape[1], attention_softmax
    )
    cd_loss = _contrastive_graph(z, z_tilde, tau1)
    return LraForward(z=z, z_tilde=z_tilde, cd_loss=cd_loss, corr=corr, graph=graph)
