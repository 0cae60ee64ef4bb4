"""Fixed- and free-support Gromov-Wasserstein barycenters.

The fixed-support barycenter of N inputs on a prescribed metric space is
the hub marginal of an (N+1)-marginal transport plan over a star tree with
edge weights rho_i and a free hub penalty.  The free-support variant lives
on the product of the input supports with the rho-averaged metric; its
complete-graph cost has no tree structure, so it is solved densely and
only at tiny scales.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mmspace import (
    LabelledMmSpace,
    MarginalPenalty,
    MmSpace,
    PenaltyKind,
)
from .sinkhorn import ReferenceMeasure, SinkhornConfig
from .treecost import CostTree, FusedConfig, barycenter_star_tree, chain_tree, fused_star_costs
from .umgw import UmgwProblem, UmgwResult, objective_F, solve_umgw
from . import oracle

__all__ = [
    "BarycenterSpec",
    "FreeSupportBarycenter",
    "ESSENTIAL_MASS",
    "fixed_support_barycenter",
    "fused_fixed_support_barycenter",
    "free_support_barycenter",
    "barycentric_loss",
    "essential_support",
    "worker_count",
]

# Mass threshold for reporting a barycenter's essential support.
ESSENTIAL_MASS = 1e-4

FREE_SUPPORT_LIMIT = 10**4


def worker_count() -> int:
    """Worker cap from MGW_THREADS (0 or unset = auto)."""
    raw = os.environ.get("MGW_THREADS", "0")
    try:
        val = int(raw)
    except ValueError:
        val = 0
    if val <= 0:
        return min(8, os.cpu_count() or 1)
    return val


@dataclass(frozen=True)
class BarycenterSpec:
    """Inputs, mixing weights and the fixed support of a barycenter problem.

    ``support.weights`` act as a prior for the unconstrained hub node: the
    hub marginal is free, so these weights only bias the entropic kernel
    (and break ties between isometric solutions).  ``input_penalties`` are
    the per-input marginal penalties as used, i.e. any rho_i scaling of KL
    weights is the caller's responsibility.
    """

    inputs: Tuple
    rho: np.ndarray
    support: MmSpace
    eps: float
    input_penalties: Tuple[MarginalPenalty, ...]
    support_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=np.float64))
        object.__setattr__(self, "input_penalties", tuple(self.input_penalties))
        n = len(self.inputs)
        if self.rho.shape != (n,):
            raise ValueError("rho must have one weight per input")
        if np.any(self.rho < 0) or abs(float(self.rho.sum()) - 1.0) > 1e-9:
            raise ValueError("rho must be nonnegative and sum to 1")
        if len(self.input_penalties) != n:
            raise ValueError("need one penalty per input")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.support_labels is not None:
            lab = np.asarray(self.support_labels, dtype=np.intp)
            if lab.shape != (self.support.n,):
                raise ValueError("support labels must cover the support")
            object.__setattr__(self, "support_labels", lab)


def _hub_prior(support: MmSpace) -> np.ndarray:
    total = support.total_mass
    if total > 0:
        return support.weights / total
    return np.full(support.n, 1.0 / support.n)


def _build_problem(spec: BarycenterSpec, fused: Optional[FusedConfig],
                   reference: Optional[ReferenceMeasure]) -> UmgwProblem:
    sizes = [sp.n for sp in spec.inputs]
    tree = barycenter_star_tree(sizes, spec.support.n, spec.rho)
    hub_space = MmSpace(spec.support.dist, _hub_prior(spec.support), name="hub")
    spaces = list(spec.inputs) + [hub_space]
    penalties = list(spec.input_penalties) + [MarginalPenalty.free()]
    label_costs = None
    if fused is not None:
        if spec.support_labels is None:
            raise ValueError("fused barycenters need support labels")
        label_costs = fused_star_costs(spec.inputs, spec.support_labels, fused, spec.rho)
    return UmgwProblem(
        spaces,
        tree,
        penalties,
        spec.eps,
        reference=reference,
        fused=fused,
        label_costs=label_costs,
    )


def fixed_support_barycenter(
    spec: BarycenterSpec,
    outer_iter: int = 50,
    inner_cfg: Optional[SinkhornConfig] = None,
    reference: Optional[ReferenceMeasure] = None,
) -> Tuple[MmSpace, UmgwResult]:
    """Barycenter measure on the prescribed support via the star-tree plan."""
    problem = _build_problem(spec, None, reference)
    assert problem.penalties[-1].kind is PenaltyKind.FREE
    result = solve_umgw(problem, outer_iter=outer_iter, inner_cfg=inner_cfg)
    hub = problem.tree.n_nodes - 1
    measure = result.pi.node_marginal(hub)
    return MmSpace(spec.support.dist, measure, name="barycenter"), result


def fused_fixed_support_barycenter(
    spec: BarycenterSpec,
    fused: FusedConfig,
    outer_iter: int = 50,
    inner_cfg: Optional[SinkhornConfig] = None,
    reference: Optional[ReferenceMeasure] = None,
) -> Tuple[LabelledMmSpace, UmgwResult]:
    """Fused variant: structure cost weighted by 1-beta, label cost by beta."""
    problem = _build_problem(spec, fused, reference)
    result = solve_umgw(problem, outer_iter=outer_iter, inner_cfg=inner_cfg)
    hub = problem.tree.n_nodes - 1
    measure = result.pi.node_marginal(hub)
    base = MmSpace(spec.support.dist, measure, name="fused-barycenter")
    labelled = LabelledMmSpace(base, spec.support_labels, spec.inputs[0].label_space)
    return labelled, result


@dataclass(frozen=True)
class FreeSupportBarycenter:
    """Barycenter on the product support with the rho-averaged metric."""

    support_tuples: np.ndarray
    dstar: np.ndarray
    measure: np.ndarray
    labels: Optional[np.ndarray] = None

    def as_mmspace(self) -> MmSpace:
        return MmSpace(self.dstar, self.measure, name="free-barycenter")


def _one_hot_labels(space: LabelledMmSpace) -> np.ndarray:
    eye = np.eye(space.label_space.n)
    return eye[space.label_of]


def free_support_barycenter(
    inputs: Sequence,
    rho,
    eps: float = 1e-5,
    outer_iter: int = 60,
) -> FreeSupportBarycenter:
    """Dense free-support barycenter (tiny scales only).

    The complete-graph cost couples every pair of inputs, which breaks the
    tree factorization, so this runs the dense alternation and is limited
    to product supports of at most ``10**4`` points.  Use the fixed-support
    mode for anything larger.
    """
    sizes = [sp.n for sp in inputs]
    total = int(np.prod(sizes))
    if total > FREE_SUPPORT_LIMIT:
        raise ValueError(
            f"free-support product size {total} exceeds {FREE_SUPPORT_LIMIT}; "
            "use fixed_support_barycenter instead"
        )
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (len(inputs),) or abs(float(rho.sum()) - 1.0) > 1e-9:
        raise ValueError("rho must be nonnegative and sum to 1")
    bases = [sp.base if isinstance(sp, LabelledMmSpace) else sp for sp in inputs]
    coords, dstar, measure = oracle.dense_free_support_bary(
        bases, rho, eps=eps, outer_iter=outer_iter
    )
    labels = None
    if all(isinstance(sp, LabelledMmSpace) for sp in inputs):
        # finite labels lifted one-hot, then rho-averaged per product point
        hots = [_one_hot_labels(sp) for sp in inputs]
        d = hots[0].shape[1]
        labels = np.zeros((coords.shape[0], d))
        for i, h in enumerate(hots):
            labels += rho[i] * h[coords[:, i]]
    return FreeSupportBarycenter(coords, dstar, measure, labels)


def _pairwise_problem(space_a, space_b, eps, penalty_a, reference):
    tree = chain_tree([space_a.n, space_b.n])
    return UmgwProblem(
        (space_a, space_b),
        tree,
        (penalty_a, MarginalPenalty.balanced()),
        eps,
        reference=reference,
    )


def barycentric_loss(
    inputs: Sequence,
    barycenter,
    eps: float,
    penalties: Optional[Sequence[MarginalPenalty]] = None,
    outer_iter: int = 30,
    inner_cfg: Optional[SinkhornConfig] = None,
    reference_kind: str = "product",
) -> float:
    """Mean regularized GW objective between each input and the barycenter.

    Each term is a two-marginal solve (chain of length 2), balanced on the
    barycenter side; the N solves are independent and run on a small thread
    pool capped by MGW_THREADS.
    """
    if penalties is None:
        penalties = [MarginalPenalty.balanced()] * len(inputs)

    def one(i):
        sp = inputs[i]
        if reference_kind == "product":
            ref = ReferenceMeasure.product_of_inputs([sp.weights, barycenter.weights])
        else:
            ref = ReferenceMeasure.counting([sp.n, barycenter.n])
        prob = _pairwise_problem(sp, barycenter, eps, penalties[i], ref)
        res = solve_umgw(prob, outer_iter=outer_iter, inner_cfg=inner_cfg)
        return objective_F(prob, res.pi, balanced_tol=math.inf)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        vals = list(pool.map(one, range(len(inputs))))
    return float(np.mean(vals))


def essential_support(measure: np.ndarray, threshold: float = ESSENTIAL_MASS) -> np.ndarray:
    """Indices carrying mass above the reporting threshold."""
    return np.nonzero(np.asarray(measure) > threshold)[0]
