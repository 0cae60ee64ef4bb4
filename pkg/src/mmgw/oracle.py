"""Dense brute-force reference implementations for tiny instances.

Everything here materializes full product-grid tensors and is the ground
truth the factorized solvers are tested against.  Sizes are hard-capped;
these routines also back the ``--oracle`` CLI flag and the free-support
barycenter, whose complete-graph cost has no tree structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mmspace import (
    MarginalPenalty,
    PenaltyKind,
    csiszar_divergence,
    kl_divergence,
    log_density_integral,
)
from .sinkhorn import InfeasibleMarginalError, ReferenceMeasure, SinkhornConfig
from .treecost import CostTree, EdgeCostMatrix

__all__ = [
    "DensePlan",
    "product_coordinates",
    "product_plan",
    "dense_cost_matrix",
    "dense_objective",
    "dense_objective_bi",
    "dense_sinkhorn",
    "grid_search_mgw",
    "dense_free_support_bary",
    "dense_umgw",
]

SIZE_LIMIT = 10**4
PAIRWISE_LIMIT = 2000


def _sizes_of(spaces) -> Tuple[int, ...]:
    return tuple(sp.n for sp in spaces)


def _check_size(sizes, limit=SIZE_LIMIT) -> int:
    total = int(np.prod(sizes))
    if total > limit:
        raise ValueError(f"product support size {total} exceeds the dense limit {limit}")
    return total


def product_coordinates(sizes) -> np.ndarray:
    """(prod(n), N) array of multi-indices in row-major (lexicographic) order."""
    grids = np.meshgrid(*[np.arange(n) for n in sizes], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


@dataclass
class DensePlan:
    """Fully materialized multi-marginal plan plus its reference weights."""

    tensor: np.ndarray
    ref_node_weights: Tuple[np.ndarray, ...]

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        _check_size(self.tensor.shape)
        if np.any(self.tensor < 0):
            raise ValueError("plan tensor must be nonnegative")
        self.ref_node_weights = tuple(
            np.asarray(w, dtype=np.float64) for w in self.ref_node_weights
        )

    @property
    def sizes(self) -> Tuple[int, ...]:
        return self.tensor.shape

    def node_marginal(self, i: int) -> np.ndarray:
        axes = tuple(k for k in range(self.tensor.ndim) if k != i)
        return self.tensor.sum(axis=axes)

    def edge_marginal(self, i: int, j: int) -> np.ndarray:
        axes = tuple(k for k in range(self.tensor.ndim) if k not in (i, j))
        m = self.tensor.sum(axis=axes)
        return m if i < j else m.T

    def plan_mass(self) -> float:
        return float(self.tensor.sum())

    def log_ref_tensor(self) -> np.ndarray:
        nd = self.tensor.ndim
        out = np.zeros(self.sizes)
        for i, w in enumerate(self.ref_node_weights):
            shape = [1] * nd
            shape[i] = w.shape[0]
            out = out + np.log(w).reshape(shape)
        return out

    def log_density_integral(self) -> float:
        """int log(dplan/dreference) dplan, computed entrywise."""
        p = self.tensor
        pos = p > 0
        logr = self.log_ref_tensor()
        return float(np.sum(p[pos] * (np.log(p[pos]) - logr[pos])))

    def scaled(self, t: float) -> "DensePlan":
        return DensePlan(self.tensor * t, self.ref_node_weights)


def product_plan(weight_vectors, ref: ReferenceMeasure) -> DensePlan:
    """DensePlan equal to the product of the given weight vectors."""
    sizes = tuple(len(m) for m in weight_vectors)
    _check_size(sizes)
    t = np.ones(sizes)
    nd = len(sizes)
    for i, m in enumerate(weight_vectors):
        shape = [1] * nd
        shape[i] = sizes[i]
        t = t * np.asarray(m, dtype=np.float64).reshape(shape)
    return DensePlan(t, ref.node_weights)


def dense_cost_matrix(problem) -> np.ndarray:
    """Pairwise cost on the product grid: C[m, n] = c(x^m, x^n).

    Tree edges contribute their weighted squared distance mismatch; fused
    problems scale structure by ``1 - beta`` and add the per-point label
    cost ``(beta/2) (lab(m) + lab(n))``.
    """
    sizes = _sizes_of(problem.spaces)
    total = _check_size(sizes, limit=PAIRWISE_LIMIT)
    coords = product_coordinates(sizes)
    scale = 1.0 if problem.fused is None else (1.0 - problem.fused.beta)
    C = np.zeros((total, total))
    for i, j, w in problem.tree.edges:
        Di = problem.spaces[i].dist[np.ix_(coords[:, i], coords[:, i])]
        Dj = problem.spaces[j].dist[np.ix_(coords[:, j], coords[:, j])]
        C += (scale * w) * (Di - Dj) ** 2
    if problem.fused is not None and problem.label_costs:
        lab = np.zeros(total)
        for lc in problem.label_costs:
            a, b = lc.edge
            lab += lc.matrix[coords[:, a], coords[:, b]]
        C += 0.5 * problem.fused.beta * (lab[:, None] + lab[None, :])
    return C


def _dense_divergence(pen, mu_a, mu_b, target, balanced_tol) -> float:
    """D_phi(mu_a x mu_b, target x target) with materialized outer products."""
    return csiszar_divergence(
        pen,
        np.outer(mu_a, mu_b).ravel(),
        np.outer(target, target).ravel(),
        balanced_tol,
    )


def _ref_flat(plan: DensePlan) -> np.ndarray:
    out = np.ones(1)
    for w in plan.ref_node_weights:
        out = np.outer(out, w).ravel()
    return out


def dense_objective(problem, plan: DensePlan, balanced_tol=None) -> float:
    """Quadratic objective of a single plan by direct double summation."""
    C = dense_cost_matrix(problem)
    p = plan.tensor.ravel()
    total = float(p @ (C @ p))
    for i, pen in enumerate(problem.penalties):
        val = _dense_divergence(
            pen, plan.node_marginal(i), plan.node_marginal(i),
            problem.spaces[i].weights, balanced_tol,
        )
        if math.isinf(val):
            return math.inf
        total += val
    r = _ref_flat(plan)
    total += problem.eps * kl_divergence(
        np.outer(p, p).ravel(), np.outer(r, r).ravel()
    )
    return total


def dense_objective_bi(problem, plan_pi: DensePlan, plan_gamma: DensePlan,
                       balanced_tol=None) -> float:
    """Bi-convex objective of a plan pair by direct double summation."""
    C = dense_cost_matrix(problem)
    p = plan_pi.tensor.ravel()
    g = plan_gamma.tensor.ravel()
    total = float(p @ (C @ g))
    for i, pen in enumerate(problem.penalties):
        val = _dense_divergence(
            pen, plan_pi.node_marginal(i), plan_gamma.node_marginal(i),
            problem.spaces[i].weights, balanced_tol,
        )
        if math.isinf(val):
            return math.inf
        total += val
    r = _ref_flat(plan_pi)
    total += problem.eps * kl_divergence(
        np.outer(p, g).ravel(), np.outer(r, r).ravel()
    )
    return total


def _oriented_edge_matrix(c, i, j) -> np.ndarray:
    """Edge cost as an (n_i, n_j) array for tree edge (i, j)."""
    if isinstance(c, EdgeCostMatrix):
        if c.edge == (i, j):
            return c.matrix
        if c.edge == (j, i):
            return c.matrix.T
        raise ValueError(f"edge cost labeled {c.edge}, expected ({i},{j})")
    return np.asarray(c, dtype=np.float64)


class _DenseScalingState:
    """Shared machinery of the dense proxdiv solvers (log-domain tensors)."""

    def __init__(self, sizes, log_kernel, eps, ref):
        self.sizes = tuple(sizes)
        self.nd = len(sizes)
        self.eps = eps
        log_base = log_kernel
        for i in range(self.nd):
            shape = [1] * self.nd
            shape[i] = sizes[i]
            log_base = log_base + np.log(ref.node_weights[i]).reshape(shape)
        self.log_base = log_base
        self.pots = [np.zeros(n) for n in sizes]

    def set_potentials(self, pots):
        self.pots = [np.asarray(f, dtype=np.float64).copy() for f in pots]

    def log_tensor(self) -> np.ndarray:
        logp = self.log_base.copy()
        for i in range(self.nd):
            shape = [1] * self.nd
            shape[i] = self.sizes[i]
            with np.errstate(invalid="ignore"):
                logp = logp + (self.pots[i] / self.eps).reshape(shape)
        return np.where(np.isnan(logp), -np.inf, logp)

    def tensor(self) -> np.ndarray:
        return np.exp(self.log_tensor())

    def log_marginal(self, i: int) -> np.ndarray:
        from scipy.special import logsumexp

        axes = tuple(k for k in range(self.nd) if k != i)
        with np.errstate(invalid="ignore"):
            out = logsumexp(self.log_tensor(), axis=axes)
        return np.where(np.isnan(out), -np.inf, out)

    def update(self, i, log_mu, kappa) -> float:
        log_m = self.log_marginal(i)
        zero = np.isneginf(log_mu)
        if np.any(~zero & np.isneginf(log_m)):
            raise InfeasibleMarginalError("dense sinkhorn: empty kernel column")
        with np.errstate(invalid="ignore"):
            new_f = kappa * (self.pots[i] + self.eps * (log_mu - log_m))
            new_f = np.where(zero, -np.inf, new_f)
            both = zero & np.isneginf(self.pots[i])
            drift = float(np.max(np.where(both, 0.0, np.abs(new_f - self.pots[i])),
                                 initial=0.0))
        self.pots[i] = new_f
        return drift


def _run_sweeps(state, order, marginals, penalties, cfg):
    with np.errstate(divide="ignore"):
        log_mu = [np.log(np.asarray(m, dtype=np.float64)) for m in marginals]
    converged = False
    sweep = 0
    for sweep in range(1, cfg.max_iter + 1):
        drift = 0.0
        for i in order:
            pen = penalties[i]
            if pen.kind is PenaltyKind.FREE:
                continue
            kappa = 1.0 if pen.kind is PenaltyKind.BALANCED else pen.lam / (pen.lam + cfg.eps)
            drift = max(drift, state.update(i, log_mu[i], kappa))
        if drift < cfg.tolerance * cfg.eps:
            converged = True
            break
    return converged, sweep


def dense_sinkhorn(
    tree: CostTree,
    edge_costs,
    node_costs,
    marginals: Sequence[np.ndarray],
    penalties: Sequence[MarginalPenalty],
    cfg: SinkhornConfig,
    ref: ReferenceMeasure,
    init_potentials: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[DensePlan, List[np.ndarray], bool, int]:
    """Proxdiv sweeps with marginals taken by full tensor contraction.

    Same update rule and sweep order as the factorized solver; returns
    ``(plan, potentials, converged, sweeps)``.
    """
    sizes = tuple(len(m) for m in marginals)
    _check_size(sizes)
    nd = len(sizes)
    log_kernel = np.zeros(sizes)
    for k, (i, j, _) in enumerate(tree.edges):
        m = _oriented_edge_matrix(edge_costs[k], i, j)
        if i > j:
            m = m.T
        shape = [1] * nd
        shape[i], shape[j] = sizes[i], sizes[j]
        log_kernel = log_kernel - m.reshape(shape) / cfg.eps
    if node_costs is not None:
        for i in range(nd):
            shape = [1] * nd
            shape[i] = sizes[i]
            h = np.asarray(node_costs[i], dtype=np.float64)
            log_kernel = log_kernel - (h / cfg.eps).reshape(shape)
    state = _DenseScalingState(sizes, log_kernel, cfg.eps, ref)
    if init_potentials is not None:
        state.set_potentials(init_potentials)
    pre = tree.preorder(0)
    order = pre + pre[::-1]
    converged, sweep = _run_sweeps(state, order, marginals, penalties, cfg)
    return DensePlan(state.tensor(), ref.node_weights), state.pots, converged, sweep


def _dense_linear_sinkhorn(cost_flat, sizes, marginals, penalties, cfg, ref,
                           init_potentials=None):
    """Dense proxdiv solver for an arbitrary linear cost on the product grid."""
    log_kernel = -np.asarray(cost_flat, dtype=np.float64).reshape(sizes) / cfg.eps
    state = _DenseScalingState(sizes, log_kernel, cfg.eps, ref)
    if init_potentials is not None:
        state.set_potentials(init_potentials)
    order = list(range(len(sizes))) + list(range(len(sizes)))[::-1]
    _run_sweeps(state, order, marginals, penalties, cfg)
    return DensePlan(state.tensor(), ref.node_weights), state.pots


def grid_search_mgw(problem, resolution: int, max_tables: int = 2 * 10**6):
    """Exhaustive minimum of the quadratic objective over rational plans.

    Enumerates every nonnegative tensor with entries on the grid
    ``1/resolution`` whose node marginals match the input weights exactly,
    evaluates the unregularized quadratic cost on each, and returns
    ``(best_value, best_plan)``.  An exact optimum at this grain, hence an
    upper bound on the continuous problem.
    """
    sizes = _sizes_of(problem.spaces)
    total = _check_size(sizes, limit=64)
    counts = []
    for sp in problem.spaces:
        c = sp.weights * resolution
        ci = np.rint(c)
        if np.max(np.abs(c - ci), initial=0.0) > 1e-9:
            raise ValueError(
                f"marginals are not representable at grain 1/{resolution}"
            )
        counts.append(ci.astype(np.int64))
    totals = [int(c.sum()) for c in counts]
    if len(set(totals)) != 1:
        raise ValueError("balanced enumeration needs equal total masses")
    budget = totals[0]
    coords = product_coordinates(sizes)
    C = dense_cost_matrix(problem)
    nd = len(sizes)
    # last cell carrying each (node, index) pair, for dead-end pruning
    last_cell = [dict() for _ in range(nd)]
    for cell in range(total):
        for i in range(nd):
            last_cell[i][coords[cell, i]] = cell
    rem = [c.copy() for c in counts]
    values = np.zeros(total, dtype=np.int64)
    best = [math.inf, None]
    seen = [0]

    def recurse(cell: int, left: int):
        if cell == total:
            if left == 0:
                seen[0] += 1
                if seen[0] > max_tables:
                    raise RuntimeError("grid search exceeded the table budget")
                vec = values.astype(np.float64) / resolution
                val = float(vec @ (C @ vec))
                if val < best[0]:
                    best[0] = val
                    best[1] = vec.copy()
            return
        idx = coords[cell]
        vmax = min(left, min(int(rem[i][idx[i]]) for i in range(nd)))
        vmin = 0
        for i in range(nd):
            if last_cell[i][idx[i]] == cell:
                vmin = max(vmin, int(rem[i][idx[i]]))
        if vmin > vmax:
            return
        for v in range(vmin, vmax + 1):
            values[cell] = v
            for i in range(nd):
                rem[i][idx[i]] -= v
            recurse(cell + 1, left - v)
            for i in range(nd):
                rem[i][idx[i]] += v
        values[cell] = 0

    recurse(0, budget)
    if best[1] is None:
        raise ValueError("no feasible table at this resolution")
    ref = ReferenceMeasure.counting(sizes)
    plan = DensePlan(best[1].reshape(sizes), ref.node_weights)
    return best[0], plan


def _complete_graph_cost(inputs, rho) -> np.ndarray:
    """(1/2) sum_ij rho_i rho_j |d_i - d_j|^2 on the product grid."""
    sizes = _sizes_of(inputs)
    total = _check_size(sizes, limit=PAIRWISE_LIMIT)
    coords = product_coordinates(sizes)
    C = np.zeros((total, total))
    n = len(inputs)
    for i in range(n):
        Di = inputs[i].dist[np.ix_(coords[:, i], coords[:, i])]
        for j in range(i + 1, n):
            Dj = inputs[j].dist[np.ix_(coords[:, j], coords[:, j])]
            C += (rho[i] * rho[j]) * (Di - Dj) ** 2
    return C


def dense_free_support_bary(inputs, rho, eps: float = 1e-5, outer_iter: int = 60,
                            inner_cfg: Optional[SinkhornConfig] = None):
    """Bi-convex alternation on the complete-graph barycenter cost.

    Returns ``(support_coords, dstar, measure_flat)`` where ``dstar`` is the
    rho-average of the input metrics on the product grid and the measure is
    the converged plan.  Dense and tiny-scale by design: the complete-graph
    cost does not decouple over a tree.
    """
    rho = np.asarray(rho, dtype=np.float64)
    sizes = _sizes_of(inputs)
    total = _check_size(sizes)
    coords = product_coordinates(sizes)
    if len(inputs) == 1:
        return coords, inputs[0].dist.copy(), inputs[0].weights.copy()
    C = _complete_graph_cost(inputs, rho)
    marginals = [sp.weights for sp in inputs]
    ref = ReferenceMeasure.product_of_inputs(marginals)
    penalties = [MarginalPenalty.balanced()] * len(inputs)
    cfg = inner_cfg or SinkhornConfig(eps=eps, max_iter=4000, tolerance=1e-7)
    gamma = product_plan(marginals, ref)
    pi = product_plan(marginals, ref)
    pots_pi = pots_gamma = None
    for _ in range(outer_iter):
        pi, pots_pi = _dense_linear_sinkhorn(
            C @ gamma.tensor.ravel(), sizes, marginals, penalties, cfg, ref, pots_pi
        )
        gamma, pots_gamma = _dense_linear_sinkhorn(
            C @ pi.tensor.ravel(), sizes, marginals, penalties, cfg, ref, pots_gamma
        )
    dstar = np.zeros((total, total))
    for i in range(len(inputs)):
        dstar += rho[i] * inputs[i].dist[np.ix_(coords[:, i], coords[:, i])]
    return coords, dstar, pi.tensor.ravel()


def dense_umgw(problem, outer_iter: int = 30,
               inner_cfg: Optional[SinkhornConfig] = None):
    """All-dense mirror of the alternating scheme (independent solver path).

    Follows the same initialization, mass scalings and rescale steps as the
    factorized alternation but computes every marginal by tensor
    contraction and every cost by full double sums.  Returns
    ``(pi, gamma, trace)``.
    """
    sizes = _sizes_of(problem.spaces)
    _check_size(sizes, limit=PAIRWISE_LIMIT)
    ref = problem.reference
    C = dense_cost_matrix(problem)
    marginals = [sp.weights for sp in problem.spaces]
    cfg = inner_cfg or SinkhornConfig(eps=problem.eps, max_iter=2000, tolerance=1e-7)
    weights = [sp.weights for sp in problem.spaces]
    pi = product_plan(weights, ref)
    gamma = product_plan(weights, ref)
    with np.errstate(divide="ignore"):
        init_pots = [
            problem.eps * (np.log(w) - np.log(ref.node_weights[i]))
            for i, w in enumerate(weights)
        ]
    state_pi = [init_pots, problem.eps]
    state_gamma = [[f.copy() for f in init_pots], problem.eps]

    def half_step(fixed: DensePlan, state):
        mass = fixed.plan_mass()
        lin = C @ fixed.tensor.ravel()
        const = 0.0
        for i, pen in enumerate(problem.penalties):
            if pen.kind is PenaltyKind.SCALED_KL:
                const += pen.lam * log_density_integral(
                    fixed.node_marginal(i), problem.spaces[i].weights
                )
        const += problem.eps * fixed.log_density_integral()
        lin = lin + const
        eps_eff = mass * problem.eps
        eff_cfg = SinkhornConfig(eps=eps_eff, max_iter=cfg.max_iter,
                                 tolerance=cfg.tolerance)
        eff_pens = [p.scaled(mass) for p in problem.penalties]
        with np.errstate(invalid="ignore"):
            warm = [np.where(np.isnan(f * (eps_eff / state[1])), -np.inf,
                             f * (eps_eff / state[1])) for f in state[0]]
        plan, pots = _dense_linear_sinkhorn(
            lin, sizes, marginals, eff_pens, eff_cfg, ref, warm
        )
        t = math.sqrt(mass / plan.plan_mass())
        pots[0] = pots[0] + eps_eff * math.log(t)
        state[0] = pots
        state[1] = eps_eff
        return plan.scaled(t)

    trace = [dense_objective_bi(problem, pi, gamma, balanced_tol=math.inf)]
    for _ in range(outer_iter):
        pi = half_step(gamma, state_pi)
        trace.append(dense_objective_bi(problem, pi, gamma, balanced_tol=math.inf))
        gamma = half_step(pi, state_gamma)
        trace.append(dense_objective_bi(problem, pi, gamma, balanced_tol=math.inf))
    return pi, gamma, trace
