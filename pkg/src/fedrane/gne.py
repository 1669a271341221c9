"""Nash-bargaining aggregation of client model deviations.

The server stacks each client's parameter deviation as a column of G and
looks for strictly positive weights p with (G^T G) p = 1/p elementwise —
the stationarity condition of maximizing the summed log-utilities
u_k = dev_k . (G p). The solver runs a convex-concave outer loop (the
concave log term linearized at the current iterate) around a log-barrier
interior-point subproblem, with damped Newton steps on the barrier; the
barrier weight shrinks one decade per outer round.

Columns are solved in a canonical (lexicographic) order and mapped back,
which makes permutation equivariance exact, and zero columns are excluded
from the bargain with weight zero — a client that did not move has
nothing to bargain for.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from fedrane.model import FlatParams, Layout

UTIL_EPS = 1e-8
RESIDUAL_TOL = 1e-4


@dataclass
class DeviationMatrix:
    """d x K matrix whose k-th column is client k's deviation from the global model."""

    g: np.ndarray
    layout: Optional[Layout] = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        if self.g.ndim != 2:
            raise ValueError(f"deviation matrix must be 2-D, got shape {self.g.shape}")
        if not np.all(np.isfinite(self.g)):
            raise ValueError("deviation matrix contains non-finite entries")

    @property
    def num_clients(self) -> int:
        return self.g.shape[1]


@dataclass
class BargainWeights:
    """Solve result: weights, KKT residual, convergence flag, client utilities."""

    p: np.ndarray
    residual: float
    converged: bool
    utilities: np.ndarray
    iterations: int


def _as_matrix(g: Union[DeviationMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(g, DeviationMatrix):
        return g.g
    return DeviationMatrix(g=np.asarray(g)).g


def compute_deviations(
    theta_global: FlatParams, client_params: Sequence[FlatParams]
) -> DeviationMatrix:
    """Column k = client k's parameters minus the global parameters."""
    if not client_params:
        raise ValueError("need at least one client result")
    for cp in client_params:
        if cp.layout != theta_global.layout:
            raise ValueError("client parameter layout differs from global layout")
    cols = [cp.values - theta_global.values for cp in client_params]
    return DeviationMatrix(g=np.column_stack(cols), layout=theta_global.layout)


def gram(g: Union[DeviationMatrix, np.ndarray]) -> np.ndarray:
    """K x K Gram matrix of the deviation columns."""
    m = _as_matrix(g)
    return m.T @ m


def utilities(g: Union[DeviationMatrix, np.ndarray], delta: Union[FlatParams, np.ndarray]) -> np.ndarray:
    """Per-client utility of an update direction: column_k . delta."""
    m = _as_matrix(g)
    vec = delta.values if isinstance(delta, FlatParams) else np.asarray(delta, dtype=np.float64)
    if vec.shape != (m.shape[0],):
        raise ValueError(f"direction has length {vec.shape}, deviations have {m.shape[0]} rows")
    return m.T @ vec


def aggregate(
    theta: FlatParams, g: Union[DeviationMatrix, np.ndarray], p: np.ndarray
) -> FlatParams:
    """Apply the weighted deviations: theta' = theta + G p."""
    m = _as_matrix(g)
    p = np.asarray(p, dtype=np.float64)
    if m.shape[0] != theta.values.size:
        raise ValueError("deviation rows do not match parameter dimension")
    if p.shape != (m.shape[1],):
        raise ValueError(f"expected {m.shape[1]} weights, got shape {p.shape}")
    return FlatParams(values=theta.values + m @ p, layout=theta.layout)


def fedavg_weights(sample_counts: Sequence[int]) -> np.ndarray:
    """Sample-ratio weights n_k / sum(n)."""
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 1):
        raise ValueError("sample counts must all be >= 1")
    total = counts.sum()
    if total <= 0:
        raise ValueError("total sample count must be positive")
    return counts / total


def bargain_residual(g: Union[DeviationMatrix, np.ndarray], p: np.ndarray) -> float:
    """max_k |p_k (G^T G p)_k - 1| over the nonzero columns."""
    m = _as_matrix(g)
    p = np.asarray(p, dtype=np.float64)
    active = np.linalg.norm(m, axis=0) > 0.0
    if not active.any():
        raise ValueError("no deviation to aggregate")
    ma = m[:, active]
    pa = p[active]
    return float(np.max(np.abs(pa * (ma.T @ (ma @ pa)) - 1.0)))


def _feasible_start(m: np.ndarray, util_eps: float, init: Optional[np.ndarray], margin: float = 0.25) -> np.ndarray:
    """An interior point for the barrier: p > util_eps and all phi_k >= margin.

    Tries, in order: the inverse-norm warm start, the linear solve M p = 1,
    and a short Armijo descent on the convex potential 0.5 p' M p - sum log p
    (whose minimizer always has positive utilities). If some utility stays
    nonpositive it is clamped inside the logs, in which case scaling p up
    still lifts every phi above the margin.
    """
    k = m.shape[0]
    if init is not None:
        p = np.asarray(init, dtype=np.float64).copy()
        if p.shape != (k,) or np.any(p <= 0):
            raise ValueError("init must be a strictly positive length-K vector")
    else:
        p = 1.0 / np.maximum(np.sqrt(np.maximum(np.diag(m), 0.0)), util_eps)
    q = m @ p
    if np.any(q <= 0.0):
        try:
            cand = np.linalg.solve(m, np.ones(k))
            if np.all(cand > 0.0):
                p, q = cand, np.ones(k)
        except np.linalg.LinAlgError:
            pass
    if np.any(q <= 0.0):
        def potential(pp):
            return 0.5 * float(pp @ (m @ pp)) - float(np.sum(np.log(pp)))

        f0 = potential(p)
        for _ in range(1000):
            grad = q - 1.0 / p
            gn2 = float(grad @ grad)
            t = 1.0
            for _ in range(60):
                trial = p - t * grad
                if np.all(trial > 0.0):
                    f_trial = potential(trial)
                    if f_trial < f0 - 1e-4 * t * gn2:
                        p, f0 = trial, f_trial
                        break
                t *= 0.5
            else:
                break
            q = m @ p
            if np.all(q > 0.0):
                break
    # lift every constraint above the margin; with positive utilities phi
    # grows by 2 log t under p -> t p, clamped ones grow by log t
    for _ in range(64):
        phi = np.log(p) + np.log(np.maximum(m @ p, util_eps))
        worst = float(phi.min())
        if worst >= margin and np.all(p > 2.0 * util_eps):
            break
        need_phi = np.exp(max(margin - worst, 0.0))
        need_p = 4.0 * util_eps / float(p.min())
        p = p * max(need_phi, need_p, 1.1)
    return p


def _solve_active(
    m: np.ndarray,
    max_outer: int,
    max_inner: int,
    tol: float,
    util_eps: float,
    init: Optional[np.ndarray],
    res_target: float = 1e-7,
    mu_floor: float = 1e-12,
) -> tuple[np.ndarray, float, int]:
    k = m.shape[0]
    m1 = m @ np.ones(k)
    p = _feasible_start(m, util_eps, init)
    mu = 1.0
    res = float(np.max(np.abs(p * (m @ p) - 1.0)))
    outer_done = 0
    def inv_clamped(qq: np.ndarray) -> np.ndarray:
        # utilities are clamped below at util_eps inside every log; a clamped
        # utility contributes no gradient, so its client coasts on the clamp
        return np.where(qq > util_eps, 1.0 / np.maximum(qq, util_eps), 0.0)

    for outer in range(max_outer):
        outer_done = outer + 1
        p_prev = p
        q = m @ p
        # linearized concave part: c = grad of sum_k q_k + grad of sum_k log(p_k q_k)
        c = m1 + 1.0 / p + m @ inv_clamped(q)

        def barrier(pp: np.ndarray):
            if np.any(pp <= util_eps):
                return np.inf, None
            qq = m @ pp
            ph = np.log(pp) + np.log(np.maximum(qq, util_eps))
            if np.any(ph <= 0.0):
                return np.inf, None
            val = c @ pp - mu * (np.sum(np.log(ph)) + np.sum(np.log(pp - util_eps)))
            return val, (qq, ph)

        f0, aux = barrier(p)
        if aux is None:
            raise ValueError("internal error: barrier entered at an infeasible point")
        for _ in range(max_inner):
            qq, ph = aux
            iq = inv_clamped(qq)
            jphi = np.diag(1.0 / p) + m * iq[:, None]  # row k = grad phi_k
            grad = c - mu * (jphi.T @ (1.0 / ph)) - mu / (p - util_eps)
            if np.linalg.norm(grad) < 1e-9 * max(1.0, float(np.linalg.norm(c))):
                break
            scaled = m * (iq / np.sqrt(ph))[:, None]
            curved = jphi / ph[:, None]
            hess = mu * (
                np.diag(1.0 / (ph * p * p) + 1.0 / (p - util_eps) ** 2)
                + scaled.T @ scaled
                + curved.T @ curved
            )
            try:
                step = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                step = -grad
            decrement = float(grad @ step)
            t, moved = 1.0, False
            for _ in range(60):
                trial = p + t * step
                f_trial, aux_trial = barrier(trial)
                if f_trial < f0 + 1e-4 * t * decrement:
                    p, f0, aux, moved = trial, f_trial, aux_trial, True
                    break
                t *= 0.5
            if not moved:
                break
        res = float(np.max(np.abs(p * (m @ p) - 1.0)))
        settled = float(np.max(np.abs(p - p_prev))) < tol and res <= RESIDUAL_TOL
        if res <= res_target or settled:
            break
        mu = max(mu * 0.1, mu_floor)
    return p, res, outer_done


def nash_solve(
    g: Union[DeviationMatrix, np.ndarray],
    max_outer: int = 20,
    max_inner: int = 200,
    tol: float = 1e-6,
    util_eps: float = UTIL_EPS,
    init: Optional[np.ndarray] = None,
) -> BargainWeights:
    """Solve (G^T G) p = 1/p for strictly positive bargaining weights.

    Zero-norm columns are excluded and reported with weight 0. Returns the
    best iterate with its KKT residual; `converged` means the residual is
    within RESIDUAL_TOL. Raises if every column is zero.
    """
    m_full = _as_matrix(g)
    k = m_full.shape[1]
    if k < 1:
        raise ValueError("need at least one client column")
    norms = np.linalg.norm(m_full, axis=0)
    active = norms > 0.0
    if not active.any():
        raise ValueError("no deviation to aggregate")
    ga = m_full[:, active]

    # canonical column order makes permutation equivariance exact
    order = np.lexsort(ga[::-1])
    gs = ga[:, order]
    # the bargain is scale covariant (p(cG) = p(G)/c); normalizing by the
    # largest column keeps the Gram conditioned and the weight box feasible
    unit = float(norms.max())
    gs = gs / unit
    init_s = None
    if init is not None:
        init_arr = np.asarray(init, dtype=np.float64)
        if init_arr.shape != (k,):
            raise ValueError(f"init must have length {k}")
        init_s = init_arr[active][order] * unit

    p_sorted, residual, iterations = _solve_active(
        gs.T @ gs, max_outer, max_inner, tol, util_eps, init_s
    )
    p_sorted = p_sorted / unit

    p_active = np.empty_like(p_sorted)
    p_active[order] = p_sorted
    p = np.zeros(k)
    p[active] = p_active
    direction = ga @ p_active
    util = m_full.T @ direction
    return BargainWeights(
        p=p,
        residual=residual,
        converged=residual <= RESIDUAL_TOL,
        utilities=util,
        iterations=iterations,
    )
