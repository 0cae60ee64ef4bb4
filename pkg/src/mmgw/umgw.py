"""Bi-convex alternating minimization for regularized unbalanced
multi-marginal Gromov-Wasserstein transport.

Each half step linearizes the quadratic cost against one plan, solves the
resulting multi-marginal transport problem with the tree Sinkhorn scheme
(marginal penalties and the entropic weight both scaled by the fixed
plan's mass), and rebalances the two plans to equal mass.  The bi-convex
objective is tracked after every half step and is non-increasing up to the
inner solver tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mmspace import (
    MarginalPenalty,
    PenaltyKind,
    csiszar_divergence,
    kl_pair_factorized,
    tensor_divergence,
)
from .sinkhorn import PlanFactors, ReferenceMeasure, SinkhornConfig, solve
from .treecost import CostTree, EdgeCostMatrix, FusedConfig, assemble_cgamma

__all__ = [
    "UmgwProblem",
    "UmgwResult",
    "TightnessReport",
    "init_plan_factors",
    "solve_umgw",
    "objective_F",
    "objective_Fbi",
    "tightness_report",
    "DegenerateMassError",
    "NumericalFailureError",
]

MASS_FLOOR = 1e-100


class DegenerateMassError(RuntimeError):
    """An iterate's total mass underflowed; the alternation cannot continue."""


class NumericalFailureError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class UmgwProblem:
    """Problem data: spaces, tree cost, marginal penalties, entropic weight."""

    spaces: Tuple
    tree: CostTree
    penalties: Tuple[MarginalPenalty, ...]
    eps: float
    reference: Optional[ReferenceMeasure] = None
    fused: Optional[FusedConfig] = None
    label_costs: Optional[Tuple[EdgeCostMatrix, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "spaces", tuple(self.spaces))
        object.__setattr__(self, "penalties", tuple(self.penalties))
        if len(self.spaces) != self.tree.n_nodes or len(self.penalties) != self.tree.n_nodes:
            raise ValueError("spaces/penalties must match the tree's node count")
        if not self.eps > 0:
            raise ValueError("eps must be positive for the iterative solver")
        if self.reference is None:
            object.__setattr__(
                self,
                "reference",
                ReferenceMeasure.counting([sp.n for sp in self.spaces]),
            )
        if self.label_costs is not None:
            object.__setattr__(self, "label_costs", tuple(self.label_costs))

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(sp.n for sp in self.spaces)


@dataclass
class UmgwResult:
    pi: PlanFactors
    gamma: PlanFactors
    objective_trace: List[float]
    converged: bool
    iterations: int
    marginal_gap: float


def init_plan_factors(problem: UmgwProblem) -> PlanFactors:
    """Factors representing the product of the input weights.

    Kernels are zero-cost; potentials are eps*log(w_i / r_i) so the implied
    plan equals the product measure under either reference convention.  At
    free-penalty nodes the input weights act as a prior that the solver
    never updates.
    """
    sizes = problem.sizes
    edge_costs = [
        np.zeros((sizes[i], sizes[j])) for i, j, _ in problem.tree.edges
    ]
    pots = []
    for i, sp in enumerate(problem.spaces):
        with np.errstate(divide="ignore"):
            pots.append(
                problem.eps
                * (np.log(sp.weights) - np.log(problem.reference.node_weights[i]))
            )
    return PlanFactors(
        problem.tree,
        problem.eps,
        edge_costs,
        None,
        problem.reference.node_weights,
        potentials=pots,
    )


def _quadratic_cross(problem: UmgwProblem, pi, gamma) -> float:
    """int int c d(pi) d(gamma) through the per-edge three-term expansion."""
    total = 0.0
    scale = 1.0 if problem.fused is None else (1.0 - problem.fused.beta)
    for i, j, w in problem.tree.edges:
        Di, Dj = problem.spaces[i].dist, problem.spaces[j].dist
        pi_i, pi_j = pi.node_marginal(i), pi.node_marginal(j)
        ga_i, ga_j = gamma.node_marginal(i), gamma.node_marginal(j)
        P = pi.edge_marginal(i, j)
        G = gamma.edge_marginal(i, j)
        term = float(pi_i @ ((Di * Di) @ ga_i))
        term += float(pi_j @ ((Dj * Dj) @ ga_j))
        term -= 2.0 * float(np.sum(P * (Di @ G @ Dj.T)))
        total += scale * w * term
    if problem.fused is not None and problem.label_costs:
        half_beta = 0.5 * problem.fused.beta
        mp, mg = pi.plan_mass(), gamma.plan_mass()
        for lc in problem.label_costs:
            a, b = lc.edge
            P = pi.edge_marginal(a, b)
            G = gamma.edge_marginal(a, b)
            total += half_beta * (mg * float(np.sum(lc.matrix * P))
                                  + mp * float(np.sum(lc.matrix * G)))
    return total


def _plan_kl(problem: UmgwProblem, factors) -> float:
    """KL of the plan against the product reference measure."""
    return (
        factors.log_density_integral()
        - factors.plan_mass()
        + problem.reference.total_mass
    )


def objective_F(problem: UmgwProblem, pi, balanced_tol=None) -> float:
    """Quadratic objective of one plan.

    Tensor marginal divergences and the tensorized entropic term are
    evaluated through their exact product factorizations; the plan itself
    stays implicit.
    """
    quad = _quadratic_cross(problem, pi, pi)
    total = quad
    for i, pen in enumerate(problem.penalties):
        val = tensor_divergence(
            pen, pi.node_marginal(i), problem.spaces[i].weights, balanced_tol
        )
        if math.isinf(val):
            return math.inf
        total += val
    mass = pi.plan_mass()
    kl = _plan_kl(problem, pi)
    total += problem.eps * (2.0 * mass * kl + (mass - problem.reference.total_mass) ** 2)
    return total


def objective_Fbi(problem: UmgwProblem, pi, gamma, balanced_tol=None) -> float:
    """Bi-convex objective of a plan pair via the product factorizations."""
    total = _quadratic_cross(problem, pi, gamma)
    for i, pen in enumerate(problem.penalties):
        mu = problem.spaces[i].weights
        pi_i, ga_i = pi.node_marginal(i), gamma.node_marginal(i)
        if pen.kind is PenaltyKind.FREE:
            continue
        if pen.kind is PenaltyKind.BALANCED:
            val = csiszar_divergence(pen, pi_i, mu, balanced_tol)
            if not math.isinf(val):
                val = csiszar_divergence(pen, ga_i, mu, balanced_tol)
            if math.isinf(val):
                return math.inf
            continue
        val = pen.lam * kl_pair_factorized(pi_i, ga_i, mu)
        if math.isinf(val):
            return math.inf
        total += val
    mp, mg = pi.plan_mass(), gamma.plan_mass()
    mr = problem.reference.total_mass
    kl_pi = _plan_kl(problem, pi)
    kl_ga = _plan_kl(problem, gamma)
    total += problem.eps * (mp * kl_ga + mg * kl_pi + (mp - mr) * (mg - mr))
    return total


def _half_step(problem, fixed, moving, inner_cfg, collect_inner_trace):
    mass = fixed.plan_mass()
    if not mass > MASS_FLOOR:
        raise DegenerateMassError(f"iterate mass {mass} underflowed")
    edge_costs, node_costs, constant = assemble_cgamma(
        problem.tree,
        problem.spaces,
        fixed,
        problem.penalties,
        problem.eps,
        problem.reference,
        fused=problem.fused,
        label_costs=problem.label_costs,
    )
    node_costs[0] = node_costs[0] + constant
    eps_eff = mass * problem.eps
    cfg = SinkhornConfig(
        eps=eps_eff,
        max_iter=inner_cfg.max_iter,
        tolerance=inner_cfg.tolerance,
        log_domain=inner_cfg.log_domain,
    )
    penalties = [p.scaled(mass) for p in problem.penalties]
    with np.errstate(invalid="ignore"):
        init_pots = [f * (eps_eff / moving.eps) for f in moving.potentials]
    init_pots = [np.where(np.isnan(f), -np.inf, f) for f in init_pots]
    marginals = [sp.weights for sp in problem.spaces]
    factors = solve(
        problem.tree,
        edge_costs,
        node_costs,
        marginals,
        penalties,
        cfg,
        problem.reference,
        init_potentials=init_pots,
        collect_trace=collect_inner_trace,
    )
    new_mass = factors.plan_mass()
    if not new_mass > MASS_FLOOR:
        raise DegenerateMassError(f"solved plan mass {new_mass} underflowed")
    return factors.rescale_by(math.sqrt(mass / new_mass)), factors.converged


def solve_umgw(
    problem: UmgwProblem,
    outer_iter: int = 50,
    inner_cfg: Optional[SinkhornConfig] = None,
    outer_tol: float = 1e-7,
    collect_inner_trace: bool = False,
    init: Optional[Tuple[PlanFactors, PlanFactors]] = None,
    marginal_tol: float = 1e-7,
) -> UmgwResult:
    """Alternate linearized transport solves for the two plans.

    Starts from the product of the input weights for both plans (or from
    ``init = (pi0, gamma0)`` when resuming), stops when the relative
    bi-convex objective change stays below ``outer_tol`` and the node
    marginals have stabilized below ``marginal_tol``, both for two
    consecutive outer iterations; reports the trace of the objective after
    every half step.  Balanced marginal divergences are evaluated as
    feasible along iterates; exact feasibility is enforced by the inner
    solver up to its tolerance.
    """
    if inner_cfg is None:
        inner_cfg = SinkhornConfig(eps=problem.eps)
    if init is None:
        pi = init_plan_factors(problem)
        gamma = init_plan_factors(problem)
    else:
        pi, gamma = init
    trace = [objective_Fbi(problem, pi, gamma, balanced_tol=math.inf)]
    inner_ok = True
    stall = 0
    iterations = 0
    prev_marg = [pi.node_marginal(i) for i in range(problem.tree.n_nodes)]
    for k in range(outer_iter):
        iterations = k + 1
        prev = trace[-1]
        pi, ok1 = _half_step(problem, gamma, pi, inner_cfg, collect_inner_trace)
        trace.append(objective_Fbi(problem, pi, gamma, balanced_tol=math.inf))
        gamma, ok2 = _half_step(problem, pi, gamma, inner_cfg, collect_inner_trace)
        trace.append(objective_Fbi(problem, pi, gamma, balanced_tol=math.inf))
        inner_ok = inner_ok and ok1 and ok2
        if any(math.isnan(v) for v in trace[-2:]):
            raise NumericalFailureError("objective became NaN", trace)
        marg = [pi.node_marginal(i) for i in range(problem.tree.n_nodes)]
        marg_drift = max(
            float(np.max(np.abs(m - p), initial=0.0))
            for m, p in zip(marg, prev_marg)
        )
        prev_marg = marg
        # the relative-objective rule alone can fire spuriously when large
        # reference constants swamp the objective, so the iterate must have
        # stabilized as well
        if (abs(trace[-1] - prev) < outer_tol * (1.0 + abs(trace[-1]))
                and marg_drift < marginal_tol):
            stall += 1
            if stall >= 2:
                break
        else:
            stall = 0
    gap = 0.0
    for i in range(problem.tree.n_nodes):
        gap = max(gap, float(np.max(np.abs(pi.node_marginal(i) - gamma.node_marginal(i)),
                                    initial=0.0)))
    return UmgwResult(
        pi=pi,
        gamma=gamma,
        objective_trace=trace,
        converged=(stall >= 2) and inner_ok,
        iterations=iterations,
        marginal_gap=gap,
    )


@dataclass(frozen=True)
class TightnessReport:
    gap_pi: float
    gap_gamma: float
    fbi: float
    applicable: bool


def tightness_report(problem: UmgwProblem, result: UmgwResult) -> TightnessReport:
    """Diagnostic gaps F(pi,pi) - F(pi,gamma) and F(gamma,gamma) - F(pi,gamma).

    For balanced marginals and a marginal conditionally negative definite
    cost, both gaps vanish at any alternation fixed point; at finite inner
    tolerance they are small positives.  With non-balanced penalties the
    gaps are still reported but flagged as not applicable.
    """
    applicable = all(p.kind is PenaltyKind.BALANCED for p in problem.penalties)
    fbi = objective_Fbi(problem, result.pi, result.gamma, balanced_tol=math.inf)
    fpp = objective_Fbi(problem, result.pi, result.pi, balanced_tol=math.inf)
    fgg = objective_Fbi(problem, result.gamma, result.gamma, balanced_tol=math.inf)
    return TightnessReport(fpp - fbi, fgg - fbi, fbi, applicable)
