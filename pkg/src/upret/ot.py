"""Entropic optimal transport between token sets.

The solver works on dual potentials in the log domain, so tiny regularisation
values do not underflow the Gibbs kernel. ``sinkhorn`` handles one problem and
keeps a per-iteration violation trace; ``sinkhorn_batch`` solves many padded
problems at once and is what the trainer calls for the B x B pair grid.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numba
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_ETA = 0.1
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6

_COS_SLACK = 1e-9


class ConvergenceError(RuntimeError):
    """Sinkhorn did not reach the requested marginal tolerance."""


class NonFiniteCostError(ValueError):
    """A cost entry is NaN or infinite."""


@dataclass
class CostMatrix:
    values: np.ndarray
    source: str = "raw"  # "from-alignment" or "raw"


@dataclass
class Marginals:
    p_v: np.ndarray
    p_t: np.ndarray

    def __post_init__(self):
        self.p_v = np.asarray(self.p_v, dtype=np.float64)
        self.p_t = np.asarray(self.p_t, dtype=np.float64)
        for name, p in (("p_v", self.p_v), ("p_t", self.p_t)):
            if p.ndim != 1 or p.size == 0:
                raise ValueError(f"{name} must be a non-empty vector")
            if np.any(p <= 0):
                raise ValueError(f"{name} must be strictly positive")
            if abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} sums to {p.sum()!r}, expected 1")

    @classmethod
    def uniform(cls, n_v: int, n_t: int) -> "Marginals":
        return cls(np.full(n_v, 1.0 / n_v), np.full(n_t, 1.0 / n_t))


@dataclass
class TransportPlan:
    values: np.ndarray
    iterations_used: int
    marginal_violation: float
    converged: bool
    history: list[float] = field(default_factory=list)


def cost_from_alignment(A) -> CostMatrix:
    """Cost = 1 - cosine alignment; entries land in [0, 2]."""
    A = np.asarray(A, dtype=np.float64)
    if A.size and (A.min() < -1.0 - _COS_SLACK or A.max() > 1.0 + _COS_SLACK):
        raise ValueError(
            f"alignment entries must be cosines in [-1, 1]; got range [{A.min()}, {A.max()}]"
            " (were the token features normalised?)"
        )
    return CostMatrix(1.0 - A, source="from-alignment")


def _lse(X: np.ndarray, axis: int) -> np.ndarray:
    mx = X.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(X - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def _violation(T: np.ndarray, p_v: np.ndarray, p_t: np.ndarray) -> float:
    return float(max(np.abs(T.sum(axis=1) - p_v).max(), np.abs(T.sum(axis=0) - p_t).max()))


def sinkhorn(
    C,
    m: Marginals,
    eta: float = DEFAULT_ETA,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    strict: bool = False,
) -> TransportPlan:
    """Solve min <T, C> + eta * sum T (log T - 1) subject to the marginals.

    Stops once the L-inf violation of both marginals is at most ``tol``. A
    non-converged plan is still returned (``converged=False``) unless
    ``strict`` is set, in which case ``ConvergenceError`` is raised.
    """
    C = np.asarray(getattr(C, "values", C), dtype=np.float64)
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if C.shape != (m.p_v.size, m.p_t.size):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({m.p_v.size}, {m.p_t.size})")
    if not np.all(np.isfinite(C)):
        raise NonFiniteCostError("cost matrix has non-finite entries")

    M = -C / eta
    log_a, log_b = np.log(m.p_v), np.log(m.p_t)
    f = np.zeros_like(log_a)
    g = np.zeros_like(log_b)
    history: list[float] = []
    it = 0
    viol = np.inf
    while True:
        # row sums of the current plan come for free from the f-update's lse
        lse_rows = _lse(M + g[None, :], axis=1)
        if it > 0:
            # row sums are p_v * exp(lse - lse_prev)
            delta = lse_rows - lse_prev
            viol = float(np.max(m.p_v * np.abs(np.expm1(delta))))
            history.append(viol)
            if viol <= tol or it >= max_iters:
                break
        f = log_a - lse_rows
        lse_prev = lse_rows
        g = log_b - _lse(M + f[:, None], axis=0)
        it += 1

    T = np.exp(M + f[:, None] + g[None, :])
    viol = _violation(T, m.p_v, m.p_t)
    converged = viol <= tol
    if not converged:
        msg = f"sinkhorn stopped after {it} iterations with violation {viol:.3e} > tol {tol:.1e}"
        if strict:
            raise ConvergenceError(msg)
        log.debug(msg)
    return TransportPlan(T, it, viol, converged, history)


def ot_similarity(T, A) -> float:
    """Plan-weighted alignment, sum_ij T_ij A_ij."""
    T = np.asarray(getattr(T, "values", T), dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if T.shape != A.shape:
        raise ValueError(f"plan shape {T.shape} != alignment shape {A.shape}")
    return float((T * A).sum())


def exact_ot_bruteforce(C, m: Marginals | None = None) -> float:
    """Exact OT cost for tiny instances.

    Square uniform problems (N <= 8) enumerate all N! assignments. Other small
    problems (N_v * N_t <= 12) enumerate the vertices of the transport polytope:
    every basic feasible solution is determined by a spanning tree support of
    N_v + N_t - 1 cells.
    """
    C = np.asarray(getattr(C, "values", C), dtype=np.float64)
    n_v, n_t = C.shape
    if m is None:
        m = Marginals.uniform(n_v, n_t)
    uniform = np.allclose(m.p_v, 1.0 / n_v, rtol=0, atol=1e-15) and np.allclose(m.p_t, 1.0 / n_t, rtol=0, atol=1e-15)
    if n_v == n_t and uniform:
        if n_v > 8:
            raise ValueError(f"assignment enumeration limited to N <= 8, got {n_v}")
        rows = np.arange(n_v)
        best = min(C[rows, list(p)].sum() for p in itertools.permutations(range(n_v)))
        return float(best) / n_v
    if n_v * n_t > 12:
        raise ValueError(f"vertex enumeration limited to N_v*N_t <= 12, got {n_v}x{n_t}")
    return _vertex_enumeration(C, m.p_v, m.p_t)


def _vertex_enumeration(C, p_v, p_t) -> float:
    n_v, n_t = C.shape
    cells = [(i, j) for i in range(n_v) for j in range(n_t)]
    # equality system: row sums then column sums (one redundant row dropped)
    rows = []
    for i in range(n_v):
        rows.append([1.0 if c[0] == i else 0.0 for c in cells])
    for j in range(n_t):
        rows.append([1.0 if c[1] == j else 0.0 for c in cells])
    A_eq = np.array(rows)[:-1]
    b_eq = np.concatenate([p_v, p_t])[:-1]
    k = n_v + n_t - 1
    best = np.inf
    for support in itertools.combinations(range(len(cells)), k):
        sub = A_eq[:, support]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, b_eq)
        if np.any(x < -1e-12):
            continue
        cost = float(sum(C[cells[s]] * x[n] for n, s in enumerate(support)))
        best = min(best, cost)
    return best


# ---------------------------------------------------------------- batched solver

@numba.njit(cache=True, parallel=True, fastmath={"reassoc", "contract", "arcp"})
def _sinkhorn_batch_kernel(C, n_v, n_t, eta, max_iters, tol, T, iters, viols):
    P = C.shape[0]
    for p in numba.prange(P):
        nv = n_v[p]
        nt = n_t[p]
        log_a = -np.log(nv)
        log_b = -np.log(nt)
        a = 1.0 / nv
        # shift by the min cost so the kernel's largest entry is exactly 1
        cmin = C[p, 0, 0]
        cmax = C[p, 0, 0]
        for i in range(nv):
            for j in range(nt):
                c = C[p, i, j]
                if c < cmin:
                    cmin = c
                if c > cmax:
                    cmax = c
        K = np.empty((nv, nt))
        for i in range(nv):
            for j in range(nt):
                K[i, j] = np.exp(-(C[p, i, j] - cmin) / eta)
        # the factorised lse below needs the kernel range representable
        factorised = (cmax - cmin) / eta < 600.0
        f = np.zeros(nv)
        g = np.zeros(nt)
        lse = np.empty(nv)
        lse_prev = np.empty(nv)
        eg = np.empty(nt)
        ef = np.empty(nv)
        it = 0
        viol = np.inf
        while True:
            # lse_i = log sum_j exp(M_ij + g_j)
            gmax = g[0]
            for j in range(1, nt):
                if g[j] > gmax:
                    gmax = g[j]
            if factorised:
                for j in range(nt):
                    eg[j] = np.exp(g[j] - gmax)
                for i in range(nv):
                    s = 0.0
                    for j in range(nt):
                        s += K[i, j] * eg[j]
                    lse[i] = np.log(s) + gmax
            else:
                for i in range(nv):
                    mx = -np.inf
                    for j in range(nt):
                        v = -(C[p, i, j] - cmin) / eta + g[j]
                        if v > mx:
                            mx = v
                    s = 0.0
                    for j in range(nt):
                        s += np.exp(-(C[p, i, j] - cmin) / eta + g[j] - mx)
                    lse[i] = np.log(s) + mx
            if it > 0:
                dmax = lse[0] - lse_prev[0]
                dmin = dmax
                for i in range(1, nv):
                    d = lse[i] - lse_prev[i]
                    if d > dmax:
                        dmax = d
                    if d < dmin:
                        dmin = d
                viol = a * max(np.expm1(dmax), -np.expm1(dmin))
                if viol <= tol or it >= max_iters:
                    break
            for i in range(nv):
                f[i] = log_a - lse[i]
                lse_prev[i] = lse[i]
            fmax = f[0]
            for i in range(1, nv):
                if f[i] > fmax:
                    fmax = f[i]
            if factorised:
                for i in range(nv):
                    ef[i] = np.exp(f[i] - fmax)
                for j in range(nt):
                    s = 0.0
                    for i in range(nv):
                        s += K[i, j] * ef[i]
                    g[j] = log_b - (np.log(s) + fmax)
            else:
                for j in range(nt):
                    mx = -np.inf
                    for i in range(nv):
                        v = -(C[p, i, j] - cmin) / eta + f[i]
                        if v > mx:
                            mx = v
                    s = 0.0
                    for i in range(nv):
                        s += np.exp(-(C[p, i, j] - cmin) / eta + f[i] - mx)
                    g[j] = log_b - (np.log(s) + mx)
            it += 1
        for i in range(nv):
            for j in range(nt):
                T[p, i, j] = np.exp(-(C[p, i, j] - cmin) / eta + f[i] + g[j])
        iters[p] = it
        viols[p] = viol


def sinkhorn_batch(
    C: np.ndarray,
    n_v: np.ndarray,
    n_t: np.ndarray,
    eta: float = DEFAULT_ETA,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
):
    """Solve padded problems ``C[p, :n_v[p], :n_t[p]]`` with uniform marginals.

    Returns ``(T, iterations, violations)``; padded cells of ``T`` are zero.
    Each problem is independent, so results do not depend on thread count.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    if C.ndim != 3:
        raise ValueError(f"expected (P, N_v, N_t) costs, got shape {C.shape}")
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    n_v = np.ascontiguousarray(n_v, dtype=np.int64)
    n_t = np.ascontiguousarray(n_t, dtype=np.int64)
    if np.any(n_v < 1) or np.any(n_t < 1) or n_v.max(initial=0) > C.shape[1] or n_t.max(initial=0) > C.shape[2]:
        raise ValueError("token counts out of range for the padded cost array")
    mask = (np.arange(C.shape[1])[None, :, None] < n_v[:, None, None]) & (
        np.arange(C.shape[2])[None, None, :] < n_t[:, None, None]
    )
    if not np.all(np.isfinite(C[mask])):
        raise NonFiniteCostError("cost matrix has non-finite entries")
    T = np.zeros_like(C)
    iters = np.zeros(C.shape[0], dtype=np.int64)
    viols = np.zeros(C.shape[0])
    _sinkhorn_batch_kernel(C, n_v, n_t, float(eta), int(max_iters), float(tol), T, iters, viols)
    return T, iters, viols
