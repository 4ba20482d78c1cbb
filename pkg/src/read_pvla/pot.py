"""Partial optimal transport between frame and token representations.

The alignment loss is the entropic partial-OT cost between the uniform
distribution over video rows and the uniform distribution over language rows.
Plans come from capped Sinkhorn sweeps; the loss is differentiated only through
the cosine cost matrix, with the plan treated as a constant.

:func:`exact_partial_ot` solves the same linear program exactly for small
instances and exists to check the entropic solver.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from scipy.optimize import linprog

from .autodiff import Tensor, as_tensor, inner, record
from .errors import ConfigError, DegenerateInputError, InfeasibleError, NumericError, SizeError

MODES = ("partial", "full")
SCHEMES = ("dual", "literal")
FEASIBILITY_SLACK = 1e-3
MAX_ORACLE_CELLS = 20


@dataclass(frozen=True)
class SolverConfig:
    tau: float = 0.05
    n_iter: int = 1000
    mass_grid_size: int | None = None  # None: min(N_V, N_L)
    mode: str = "partial"
    scheme: str = "dual"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.n_iter < 1:
            raise ConfigError(f"n_iter must be >= 1, got {self.n_iter}")
        if self.mass_grid_size is not None and self.mass_grid_size < 1:
            raise ConfigError(f"mass_grid_size must be >= 1, got {self.mass_grid_size}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    def masses(self, n_v: int, n_l: int) -> np.ndarray:
        if self.mode == "full":
            return np.ones(1)
        grid = self.mass_grid_size or min(n_v, n_l)
        return np.arange(1, grid + 1) / grid


@dataclass
class TransportPlan:
    T: np.ndarray
    mass: float

    def violations(self, a: np.ndarray, b: np.ndarray) -> dict[str, float]:
        """Worst excess over each constraint family (0 when satisfied)."""
        return {
            "row": float(max(0.0, (self.T.sum(axis=1) - a).max())),
            "col": float(max(0.0, (self.T.sum(axis=0) - b).max())),
            "mass": float(abs(self.T.sum() - self.mass)),
            "negative": float(max(0.0, -self.T.min())),
        }

    def is_feasible(self, a, b, slack: float = FEASIBILITY_SLACK) -> bool:
        return max(self.violations(np.asarray(a), np.asarray(b)).values()) <= slack


@dataclass
class PvlaResult:
    loss: Tensor
    best_mass: float
    plan: TransportPlan
    cost: np.ndarray

    @property
    def value(self) -> float:
        return self.loss.item()


def uniform(n: int) -> np.ndarray:
    if n < 1:
        raise DegenerateInputError("a distribution needs at least one support point")
    return np.full(n, 1.0 / n)


def check_distribution(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or (w <= 0).any():
        raise DegenerateInputError("weights must be a non-empty strictly positive vector")
    if abs(w.sum() - 1.0) > 1e-12:
        raise DegenerateInputError(f"weights must sum to 1, got {w.sum()!r}")
    return w


# cost -------------------------------------------------------------------------


def cosine_cost(hv, hl) -> Tensor:
    """``C[i, j] = 1 - cos(hv_i, hl_j)``, differentiable in both inputs."""
    hv, hl = as_tensor(hv), as_tensor(hl)
    if hv.data.ndim != 2 or hl.data.ndim != 2 or hv.shape[1] != hl.shape[1]:
        raise DegenerateInputError(f"cosine_cost: incompatible shapes {hv.shape}, {hl.shape}")
    nv = np.linalg.norm(hv.data, axis=1, keepdims=True)
    nl = np.linalg.norm(hl.data, axis=1, keepdims=True)
    if (nv == 0).any() or (nl == 0).any():
        raise DegenerateInputError("cosine_cost: zero-norm row")
    u = hv.data / nv
    w = hl.data / nl
    cost = np.clip(1.0 - u @ w.T, 0.0, 2.0)

    def back(g):
        ds = -g
        du = ds @ w
        dw = ds.T @ u
        dhv = (du - (du * u).sum(axis=1, keepdims=True) * u) / nv
        dhl = (dw - (dw * w).sum(axis=1, keepdims=True) * w) / nl
        return dhv, dhl

    return record(cost, (hv, hl), back)


# entropic solver ------------------------------------------------------------------


@numba.njit(cache=True)
def _waterfill(r, cap, s, t, order, suffix):
    # smallest kappa with sum_i min(kappa * r_i, cap_i) == s; t, order, suffix are scratch
    n = r.size
    for i in range(n):
        t[i] = cap[i] / r[i] if r[i] > 0 else np.inf
        order[i] = i
    for i in range(1, n):
        key = order[i]
        q = i - 1
        while q >= 0 and t[order[q]] > t[key]:
            order[q + 1] = order[q]
            q -= 1
        order[q + 1] = key
    free = 0.0
    for k in range(n - 1, -1, -1):
        free += r[order[k]]
        suffix[k] = free
    saturated = 0.0
    last = 0.0
    for k in range(n):
        i = order[k]
        residual = s - saturated
        if suffix[k] <= 0 or residual <= 0:
            break
        kappa = residual / suffix[k]
        if kappa <= t[i]:
            return max(kappa, last)
        saturated += cap[i]
        last = t[i]
    # every reachable entry is saturated: the largest finite threshold
    return last


@numba.njit(cache=True)
def _sinkhorn_dual(K, a, b, masses, n_iter):
    n_b, n_v, n_l = K.shape
    T = np.empty_like(K)
    r = np.empty(n_v)
    c = np.empty(n_l)
    t_v = np.empty(n_v)
    t_l = np.empty(n_l)
    o_v = np.empty(n_v, dtype=np.int64)
    o_l = np.empty(n_l, dtype=np.int64)
    s_v = np.empty(n_v)
    s_l = np.empty(n_l)
    u = np.empty(n_v)
    v = np.empty(n_l)
    for k in range(n_b):
        s = masses[k]
        u[:] = 1.0
        v[:] = 1.0
        kappa = s / K[k].sum()
        for _ in range(n_iter):
            for i in range(n_v):
                acc = 0.0
                for j in range(n_l):
                    acc += K[k, i, j] * v[j]
                r[i] = acc
            kappa = _waterfill(r, a, s, t_v, o_v, s_v)
            for i in range(n_v):
                u[i] = min(1.0, a[i] / (kappa * r[i])) if r[i] > 0 else 1.0
            for j in range(n_l):
                acc = 0.0
                for i in range(n_v):
                    acc += u[i] * K[k, i, j]
                c[j] = acc
            kappa = _waterfill(c, b, s, t_l, o_l, s_l)
            for j in range(n_l):
                v[j] = min(1.0, b[j] / (kappa * c[j])) if c[j] > 0 else 1.0
        for i in range(n_v):
            for j in range(n_l):
                T[k, i, j] = kappa * u[i] * K[k, i, j] * v[j]
    return T


@numba.njit(cache=True)
def _sinkhorn_literal(K, a, b, masses, n_iter):
    n_b, n_v, n_l = K.shape
    T = np.empty_like(K)
    for k in range(n_b):
        s = masses[k]
        scale = s / K[k].sum()
        for i in range(n_v):
            for j in range(n_l):
                T[k, i, j] = K[k, i, j] * scale
        for _ in range(n_iter):
            for i in range(n_v):
                r = 0.0
                for j in range(n_l):
                    r += T[k, i, j]
                if r > a[i]:
                    p = a[i] / r
                    for j in range(n_l):
                        T[k, i, j] *= p
            for j in range(n_l):
                c = 0.0
                for i in range(n_v):
                    c += T[k, i, j]
                if c > b[j]:
                    p = b[j] / c
                    for i in range(n_v):
                        T[k, i, j] *= p
            total = 0.0
            for i in range(n_v):
                for j in range(n_l):
                    total += T[k, i, j]
            if total > 0.0:
                p = s / total
                for i in range(n_v):
                    for j in range(n_l):
                        T[k, i, j] *= p
    return T


def _kernel(C: np.ndarray, tau: float, full_mass: bool) -> np.ndarray:
    # Shifting by the per-instance minimum cancels in the mass rescale.
    shift = C.min(axis=(1, 2), keepdims=True)
    K = np.exp(-(C - shift) / tau)
    if full_mass and ((K.sum(axis=2) == 0).any() or (K.sum(axis=1) == 0).any()):
        raise NumericError(
            f"Sinkhorn kernel underflowed to an all-zero row/column at tau={tau}; "
            "use a larger temperature"
        )
    return K


def _sweep_batch(C: np.ndarray, a, b, masses: np.ndarray, cfg: SolverConfig) -> np.ndarray:
    K = _kernel(C, cfg.tau, bool((masses >= 1.0).any()))
    kernel = _sinkhorn_dual if cfg.scheme == "dual" else _sinkhorn_literal
    return kernel(K, a, b, np.ascontiguousarray(masses, dtype=np.float64), cfg.n_iter)


def sinkhorn_partial(C, a, b, mass: float, cfg: SolverConfig | None = None) -> TransportPlan:
    """Entropic plan moving total ``mass`` under row caps ``a`` and column caps ``b``.

    The plan is kept in the scaled form ``kappa * diag(u) @ K @ diag(v)`` with
    ``K = exp(-C / tau)`` and ``u, v <= 1``, starting from ``K`` rescaled to
    ``mass``. Each sweep caps rows at ``a`` and then columns at ``b``; every
    cap step re-solves the total-mass scale ``kappa`` jointly with the capped
    factors, so the total equals ``mass`` after each step. This is exact block
    coordinate ascent on the entropic dual and converges to the unique
    entropic optimum.

    ``cfg.scheme == "literal"`` instead multiplies the current plan by
    ``min(a / T1, 1)``, then by ``min(b / T^T 1, 1)``, then rescales it to
    ``mass``. Scales can then only shrink, so entries whose kernel values
    start near underflow take thousands of sweeps to recover at small ``tau``.

    The sweep count is fixed; there is no early stopping.
    """
    cfg = cfg or SolverConfig()
    C = np.asarray(C, dtype=np.float64)
    a, b = check_distribution(a), check_distribution(b)
    if C.shape != (a.size, b.size):
        raise DegenerateInputError(f"cost shape {C.shape} does not match marginals")
    if not 0 < mass <= 1 + 1e-12:
        raise InfeasibleError(f"transported mass must lie in (0, 1], got {mass}")
    mass = min(float(mass), 1.0)
    T = _sweep_batch(C[None], a, b, np.array([mass]), cfg)[0]
    return TransportPlan(T, mass)


def solve_grid(costs: np.ndarray, cfg: SolverConfig):
    """Run every grid mass for a stack of same-shape cost matrices.

    Returns ``(plans, best_masses, losses)`` where, per instance, the plan and
    mass minimise ``<T, C>`` over the grid (ties go to the smaller mass).
    """
    costs = np.asarray(costs, dtype=np.float64)
    n_b, n_v, n_l = costs.shape
    masses = cfg.masses(n_v, n_l)
    n_g = masses.size
    stacked = np.repeat(costs, n_g, axis=0)
    plans = _sweep_batch(stacked, uniform(n_v), uniform(n_l), np.tile(masses, n_b), cfg)
    values = (plans * stacked).sum(axis=(1, 2)).reshape(n_b, n_g)
    best = values.argmin(axis=1)
    idx = np.arange(n_b) * n_g + best
    return plans[idx], masses[best], values[np.arange(n_b), best]


def pvla_from_cost(C, cfg: SolverConfig | None = None) -> tuple[float, float, TransportPlan]:
    """Alignment loss for a fixed cost matrix: ``(loss, best_mass, plan)``."""
    cfg = cfg or SolverConfig()
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or 0 in C.shape:
        raise DegenerateInputError(f"cost matrix must be a non-empty 2-D array, got {C.shape}")
    plans, masses, losses = solve_grid(C[None], cfg)
    return float(losses[0]), float(masses[0]), TransportPlan(plans[0], float(masses[0]))


def pvla_losses(pairs: Sequence[tuple], cfg: SolverConfig | None = None) -> list[PvlaResult]:
    """Alignment losses for many ``(hv, hl)`` pairs, batching same-shape costs."""
    cfg = cfg or SolverConfig()
    costs = [cosine_cost(hv, hl) for hv, hl in pairs]
    groups: dict[tuple, list[int]] = {}
    for i, c in enumerate(costs):
        groups.setdefault(c.shape, []).append(i)
    results: list[PvlaResult | None] = [None] * len(costs)
    for idxs in groups.values():
        plans, masses, _ = solve_grid(np.stack([costs[i].data for i in idxs]), cfg)
        for k, i in enumerate(idxs):
            results[i] = PvlaResult(
                loss=inner(costs[i], plans[k]),
                best_mass=float(masses[k]),
                plan=TransportPlan(plans[k], float(masses[k])),
                cost=costs[i].data,
            )
    return results


def pvla_loss(hv, hl, cfg: SolverConfig | None = None) -> PvlaResult:
    hv, hl = as_tensor(hv), as_tensor(hl)
    if hv.shape[0] < 1 or hl.shape[0] < 1:
        raise DegenerateInputError("pvla_loss needs at least one row per modality")
    return pvla_losses([(hv, hl)], cfg)[0]


def frozen_plan_loss(hv, hl, plan: np.ndarray) -> Tensor:
    """``<plan, C(hv, hl)>`` for a given plan; the objective that gets differentiated."""
    return inner(cosine_cost(hv, hl), plan)


# exact oracle ----------------------------------------------------------------------


def _validate_oracle(C, a, b, mass):
    C = np.asarray(C, dtype=np.float64)
    a, b = check_distribution(a), check_distribution(b)
    if C.shape != (a.size, b.size):
        raise DegenerateInputError(f"cost shape {C.shape} does not match marginals")
    if C.size > MAX_ORACLE_CELLS:
        raise SizeError(f"exact oracle limited to {MAX_ORACLE_CELLS} cells, got {C.size}")
    if mass < 0 or mass > 1 + 1e-12:
        raise InfeasibleError(f"transported mass must lie in (0, 1], got {mass}")
    return C, a, b, min(float(mass), 1.0)


def exact_partial_ot(C, a, b, mass: float, method: str = "lp") -> tuple[np.ndarray, float]:
    """Exact minimiser of ``<T, C>`` with capped marginals and fixed total mass.

    ``method="lp"`` solves the linear program with HiGHS. ``method="vertices"``
    adds a zero-cost dummy row and column that absorb untransported mass and
    enumerates every basic feasible solution of the resulting balanced
    problem; it is exhaustive and only practical for a handful of cells.
    """
    C, a, b, mass = _validate_oracle(C, a, b, mass)
    if mass <= 1e-15:
        return np.zeros_like(C), 0.0
    if method == "lp":
        return _exact_lp(C, a, b, mass)
    if method == "vertices":
        return _exact_vertices(C, a, b, mass)
    raise ConfigError(f"unknown oracle method {method!r}")


def _exact_lp(C, a, b, mass):
    n_v, n_l = C.shape
    a_ub = np.vstack(
        [np.kron(np.eye(n_v), np.ones((1, n_l))), np.kron(np.ones((1, n_v)), np.eye(n_l))]
    )
    res = linprog(
        C.reshape(-1),
        A_ub=a_ub,
        b_ub=np.concatenate([a, b]),
        A_eq=np.ones((1, C.size)),
        b_eq=[mass],
        bounds=(0, None),
        method="highs",
    )
    if res.status != 0:
        raise NumericError(f"exact partial OT failed: {res.message}")
    plan = np.maximum(res.x.reshape(n_v, n_l), 0.0)
    return plan, float((plan * C).sum())


def _exact_vertices(C, a, b, mass):
    n_v, n_l = C.shape
    supply = np.append(a, 1.0 - mass)
    demand = np.append(b, 1.0 - mass)
    rows, cols = n_v + 1, n_l + 1
    cells = [(i, j) for i in range(rows) for j in range(cols) if not (i == n_v and j == n_l)]
    cost = np.zeros((rows, cols))
    cost[:n_v, :n_l] = C
    # one row-sum equation is implied by the others, so drop the last
    rhs = np.concatenate([supply[:-1], demand])
    best_cost, best_plan = np.inf, None
    for basis in itertools.combinations(range(len(cells)), rows + cols - 1):
        A = np.zeros((rows + cols - 1, rows + cols - 1))
        for k, cell in enumerate(basis):
            i, j = cells[cell]
            if i < rows - 1:
                A[i, k] = 1.0
            A[rows - 1 + j, k] = 1.0
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        x = np.linalg.solve(A, rhs)
        if (x < -1e-12).any():
            continue
        plan = np.zeros((rows, cols))
        for k, cell in enumerate(basis):
            plan[cells[cell]] = max(x[k], 0.0)
        value = float((plan * cost).sum())
        if value < best_cost - 1e-15:
            best_cost, best_plan = value, plan[:n_v, :n_l].copy()
    if best_plan is None:
        raise NumericError("vertex enumeration found no basic feasible solution")
    return best_plan, best_cost


# pooled baselines -----------------------------------------------------------------


def pooled_distance(hv, hl, pooling: str = "avg", metric: str = "cosine") -> float:
    """Distance between sequence-pooled representations of the two modalities."""
    v = np.asarray(hv.data if isinstance(hv, Tensor) else hv, dtype=np.float64)
    l = np.asarray(hl.data if isinstance(hl, Tensor) else hl, dtype=np.float64)
    if v.shape[0] == 0 or l.shape[0] == 0:
        raise DegenerateInputError("pooled_distance needs non-empty sequences")
    if pooling == "avg":
        pv, pl = v.mean(axis=0), l.mean(axis=0)
    elif pooling == "max":
        pv, pl = v.max(axis=0), l.max(axis=0)
    else:
        raise ConfigError(f"pooling must be 'avg' or 'max', got {pooling!r}")
    if metric == "l2":
        return float(np.linalg.norm(pv - pl))
    if metric == "cosine":
        nv, nl = np.linalg.norm(pv), np.linalg.norm(pl)
        if nv == 0 or nl == 0:
            raise DegenerateInputError("pooled vector has zero norm under cosine distance")
        return float(1.0 - pv @ pl / (nv * nl))
    raise ConfigError(f"metric must be 'cosine' or 'l2', got {metric!r}")
