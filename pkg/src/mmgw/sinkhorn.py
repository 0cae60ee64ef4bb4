"""Multi-marginal Sinkhorn iterations for tree-structured linear costs.

The plan is never materialized: it is the product of per-node scalings,
per-node reference weights and per-edge Gibbs kernels.  Node and pairwise
marginals come out of sum-product message passing over the tree, run in the
log domain.  Marginal penalties are enforced with the standard proxdiv
scalings: exact matching (balanced), no update (free), or the damped
KL update with exponent lam/(lam+eps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._accel import lse_matvec
from .treecost import CostTree, EdgeCostMatrix
from .mmspace import MarginalPenalty, PenaltyKind

__all__ = [
    "ReferenceKind",
    "ReferenceMeasure",
    "SinkhornConfig",
    "PlanFactors",
    "solve",
    "dual_objective",
    "trace_to_csv",
    "InfeasibleMarginalError",
]


class InfeasibleMarginalError(RuntimeError):
    """A constrained marginal cannot be matched (kernel mass vanishes)."""


class ReferenceKind(Enum):
    COUNTING = "counting"
    PRODUCT_OF_INPUTS = "product_of_inputs"


@dataclass(frozen=True)
class ReferenceMeasure:
    """Product reference measure dominating the plan (entropic base)."""

    kind: ReferenceKind
    node_weights: Tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.node_weights)
        for w in ws:
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("reference weights must be strictly positive")
            w.setflags(write=False)
        object.__setattr__(self, "node_weights", ws)

    @staticmethod
    def counting(sizes: Sequence[int]) -> "ReferenceMeasure":
        return ReferenceMeasure(
            ReferenceKind.COUNTING, tuple(np.ones(int(n)) for n in sizes)
        )

    @staticmethod
    def product_of_inputs(weight_vectors: Sequence) -> "ReferenceMeasure":
        return ReferenceMeasure(
            ReferenceKind.PRODUCT_OF_INPUTS,
            tuple(np.asarray(w, dtype=np.float64).copy() for w in weight_vectors),
        )

    @property
    def total_mass(self) -> float:
        out = 1.0
        for w in self.node_weights:
            out *= float(w.sum())
        return out


@dataclass(frozen=True)
class SinkhornConfig:
    eps: float
    max_iter: int = 2000
    tolerance: float = 1e-7
    log_domain: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


def _edge_matrices(tree: CostTree, edge_costs) -> List[np.ndarray]:
    mats = []
    for k, (i, j, _) in enumerate(tree.edges):
        c = edge_costs[k]
        if isinstance(c, EdgeCostMatrix):
            if c.edge == (i, j):
                m = c.matrix
            elif c.edge == (j, i):
                m = c.matrix.T
            else:
                raise ValueError(f"edge cost {k} labeled {c.edge}, expected ({i},{j})")
        else:
            m = np.asarray(c, dtype=np.float64)
        mats.append(m)
    return mats


class PlanFactors:
    """Implicit multi-marginal plan: potentials, kernels, reference weights.

    plan(x) = prod_i exp((f_i(x_i) - h_i(x_i)) / eps) * r_i(x_i)
              * prod_(i,j) exp(-C_ij(x_i, x_j) / eps)

    Potentials live in cost units (eps * log of the scaling factors).
    Marginal queries run two-pass message passing; messages are cached and
    only the ones flowing away from an updated node are recomputed.
    """

    def __init__(
        self,
        tree: CostTree,
        eps: float,
        edge_costs,
        node_costs,
        log_ref: Sequence[np.ndarray],
        potentials: Optional[Sequence[np.ndarray]] = None,
        log_domain: bool = True,
    ):
        self.tree = tree
        self.eps = float(eps)
        self.log_domain = bool(log_domain)
        mats = _edge_matrices(tree, edge_costs)
        self.edge_log_kernels: Dict[Tuple[int, int], np.ndarray] = {}
        for (i, j, _), C in zip(tree.edges, mats):
            with np.errstate(invalid="ignore"):
                lk = -C / self.eps
            self.edge_log_kernels[(i, j)] = np.ascontiguousarray(lk)
            self.edge_log_kernels[(j, i)] = np.ascontiguousarray(lk.T)
        sizes = [lr.shape[0] for lr in (np.asarray(r) for r in log_ref)]
        self.log_ref = [np.log(np.asarray(r, dtype=np.float64)) for r in log_ref]
        if node_costs is None:
            node_costs = [np.zeros(n) for n in sizes]
        self.node_costs = [np.asarray(h, dtype=np.float64) for h in node_costs]
        if potentials is None:
            potentials = [np.zeros(n) for n in sizes]
        self.potentials = [np.asarray(f, dtype=np.float64).copy() for f in potentials]
        self._neighbors = {i: tree.neighbors(i) for i in range(tree.n_nodes)}
        self._msgs: Dict[Tuple[int, int], np.ndarray] = {}
        self.converged: bool = True
        self.sweeps: int = 0
        self.final_drift: float = 0.0
        self.trace: List[tuple] = []

    # -- internal message passing ------------------------------------------

    def _node_log_factor(self, i: int) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return (self.potentials[i] - self.node_costs[i]) / self.eps + self.log_ref[i]

    def _lse(self, lK: np.ndarray, vec: np.ndarray) -> np.ndarray:
        if self.log_domain:
            return lse_matvec(lK, vec)
        with np.errstate(over="ignore", under="ignore"):
            prod = np.exp(lK) @ np.exp(vec)
        return np.log(np.maximum(prod, 1e-300))

    def _message(self, src: int, dst: int) -> np.ndarray:
        out = self._msgs.get((src, dst))
        if out is not None:
            return out
        vec = self._node_log_factor(src).copy()
        for k in self._neighbors[src]:
            if k != dst:
                vec += self._message(k, src)
        out = self._lse(self.edge_log_kernels[(dst, src)], vec)
        self._msgs[(src, dst)] = out
        return out

    def _invalidate_from(self, i: int) -> None:
        stack = [(i, -1)]
        while stack:
            v, parent = stack.pop()
            for k in self._neighbors[v]:
                if k != parent:
                    self._msgs.pop((v, k), None)
                    stack.append((k, v))

    def _log_marginal(self, i: int) -> np.ndarray:
        vec = self._node_log_factor(i).copy()
        for k in self._neighbors[i]:
            vec += self._message(k, i)
        return vec

    # -- public queries ------------------------------------------------------

    def node_marginal(self, i: int) -> np.ndarray:
        """Exact i-th marginal of the implicit plan."""
        return np.exp(self._log_marginal(i))

    def edge_marginal(self, i: int, j: int) -> np.ndarray:
        """Pairwise marginal on tree edge (i, j), shape (n_i, n_j)."""
        if j not in self._neighbors[i]:
            raise ValueError(f"({i},{j}) is not a tree edge; pairwise marginals "
                             "of non-adjacent nodes are unsupported")
        vi = self._node_log_factor(i).copy()
        for k in self._neighbors[i]:
            if k != j:
                vi += self._message(k, i)
        vj = self._node_log_factor(j).copy()
        for k in self._neighbors[j]:
            if k != i:
                vj += self._message(k, j)
        return np.exp(vi[:, None] + self.edge_log_kernels[(i, j)] + vj[None, :])

    def plan_mass(self) -> float:
        return float(self.node_marginal(0).sum())

    def rescale_by(self, t: float) -> "PlanFactors":
        """Plan scaled by ``t``: adds eps*log(t) to the node-0 potential."""
        if not t > 0:
            raise ValueError("scale factor must be positive")
        out = self._shallow_copy()
        out.potentials[0] = self.potentials[0] + self.eps * math.log(t)
        out._msgs = dict(self._msgs)
        out._invalidate_from(0)
        return out

    def _shallow_copy(self) -> "PlanFactors":
        out = object.__new__(PlanFactors)
        out.tree = self.tree
        out.eps = self.eps
        out.log_domain = self.log_domain
        out.edge_log_kernels = self.edge_log_kernels
        out.log_ref = self.log_ref
        out.node_costs = self.node_costs
        out.potentials = [f.copy() for f in self.potentials]
        out._neighbors = self._neighbors
        out._msgs = {}
        out.converged = self.converged
        out.sweeps = self.sweeps
        out.final_drift = self.final_drift
        out.trace = list(self.trace)
        return out

    def log_density_integral(self) -> float:
        """int log(dplan/dreference) dplan, from marginals and kernels."""
        total = 0.0
        for i in range(self.tree.n_nodes):
            m = self.node_marginal(i)
            vec = (self.potentials[i] - self.node_costs[i]) / self.eps
            pos = m > 0
            total += float(np.sum(m[pos] * vec[pos]))
        for i, j, _ in self.tree.edges:
            P = self.edge_marginal(i, j)
            lk = self.edge_log_kernels[(i, j)]
            pos = P > 0
            total += float(np.sum(P[pos] * lk[pos]))
        return total

    def dense_tensor(self, limit: int = 10**4) -> np.ndarray:
        """Materialize the plan (oracle comparisons only, tiny sizes)."""
        sizes = [f.shape[0] for f in self.potentials]
        total = int(np.prod(sizes))
        if total > limit:
            raise ValueError(f"refusing to materialize {total} entries (> {limit})")
        nd = len(sizes)
        logp = np.zeros(sizes)
        for i in range(nd):
            shape = [1] * nd
            shape[i] = sizes[i]
            logp = logp + self._node_log_factor(i).reshape(shape)
        for i, j, _ in self.tree.edges:
            lk = self.edge_log_kernels[(i, j)]
            shape = [1] * nd
            shape[i] = sizes[i]
            shape[j] = sizes[j]
            if i < j:
                logp = logp + lk.reshape(shape)
            else:
                logp = logp + lk.T.reshape(shape)
        return np.exp(logp)


def _update_potential(f, log_mu, log_m, kappa, eps):
    """Proxdiv step in the log domain; returns (new_f, sup drift)."""
    zero = np.isneginf(log_mu)
    if np.any(~zero & np.isneginf(log_m)):
        raise InfeasibleMarginalError(
            "kernel carries no mass on a constrained support point"
        )
    with np.errstate(invalid="ignore"):
        new_f = kappa * (f + eps * (log_mu - log_m))
        new_f = np.where(zero, -np.inf, new_f)
        both_inf = zero & np.isneginf(f)
        diff = np.where(both_inf, 0.0, np.abs(new_f - f))
    drift = float(np.max(diff, initial=0.0))
    if np.any(np.isposinf(new_f)):
        raise InfeasibleMarginalError("potential diverged to +inf")
    return new_f, drift


def solve(
    tree: CostTree,
    edge_costs,
    node_costs,
    marginals: Sequence[np.ndarray],
    penalties: Sequence[MarginalPenalty],
    cfg: SinkhornConfig,
    ref: ReferenceMeasure,
    init_potentials: Optional[Sequence[np.ndarray]] = None,
    collect_trace: bool = False,
) -> PlanFactors:
    """Run proxdiv sweeps until the potential drift stalls.

    One sweep visits the nodes in DFS preorder from node 0 and then in
    reverse.  Stops when the sup-norm potential drift of a full sweep drops
    below ``cfg.tolerance * cfg.eps`` or after ``cfg.max_iter`` sweeps; the
    returned factors carry a ``converged`` flag either way.  Callers are
    responsible for any total-mass scaling of penalties and eps.
    """
    if not tree.is_spanning:
        raise ValueError("Sinkhorn needs a connected (spanning) cost tree")
    n_nodes = tree.n_nodes
    if len(marginals) != n_nodes or len(penalties) != n_nodes:
        raise ValueError("marginals/penalties must match the node count")
    marginals = [np.asarray(m, dtype=np.float64) for m in marginals]
    for i, m in enumerate(marginals):
        if m.shape[0] != ref.node_weights[i].shape[0]:
            raise ValueError(f"marginal {i} does not match the reference size")
    factors = PlanFactors(
        tree,
        cfg.eps,
        edge_costs,
        node_costs,
        ref.node_weights,
        potentials=init_potentials,
        log_domain=cfg.log_domain,
    )
    with np.errstate(divide="ignore"):
        log_mu = [np.log(m) for m in marginals]
    kappas = []
    for pen in penalties:
        if pen.kind is PenaltyKind.BALANCED:
            kappas.append(1.0)
        elif pen.kind is PenaltyKind.FREE:
            kappas.append(None)
        else:
            kappas.append(pen.lam / (pen.lam + cfg.eps))
    pre = tree.preorder(0)
    order = pre + pre[::-1]
    converged = False
    sweep = 0
    drift = math.inf
    for sweep in range(1, cfg.max_iter + 1):
        drift = 0.0
        violation = np.zeros(n_nodes)
        for i in order:
            if kappas[i] is None:
                continue
            log_m = factors._log_marginal(i)
            if collect_trace:
                gap = np.abs(np.exp(log_m) - marginals[i])
                violation[i] = max(violation[i], float(np.max(gap, initial=0.0)))
            new_f, d = _update_potential(
                factors.potentials[i], log_mu[i], log_m, kappas[i], cfg.eps
            )
            if d > 0.0:
                factors.potentials[i] = new_f
                factors._invalidate_from(i)
            drift = max(drift, d)
        if collect_trace:
            factors.trace.append((sweep, drift, tuple(violation), factors.plan_mass()))
        if drift < cfg.tolerance * cfg.eps:
            converged = True
            break
    factors.converged = converged
    factors.sweeps = sweep
    factors.final_drift = drift
    return factors


def dual_objective(
    factors: PlanFactors,
    marginals: Sequence[np.ndarray],
    penalties: Sequence[MarginalPenalty],
) -> float:
    """Entropic dual value of the current potentials, up to a constant.

    Block Sinkhorn updates are exact coordinate maximizations of this
    concave functional, so it is non-decreasing along sweeps.  The additive
    constant (mass of the zero-potential plan) is omitted.
    """
    eps = factors.eps
    total = 0.0
    for i, pen in enumerate(penalties):
        mu = np.asarray(marginals[i], dtype=np.float64)
        f = factors.potentials[i]
        pos = mu > 0
        if pen.kind is PenaltyKind.BALANCED:
            total += float(np.sum(f[pos] * mu[pos]))
        elif pen.kind is PenaltyKind.SCALED_KL:
            total += -pen.lam * float(np.sum(mu[pos] * (np.exp(-f[pos] / pen.lam) - 1.0)))
    total -= eps * factors.plan_mass()
    return total


def trace_to_csv(factors: PlanFactors, path) -> None:
    """Write the per-sweep convergence trace collected by ``solve``."""
    n_nodes = factors.tree.n_nodes
    header = ["sweep", "max_potential_drift"]
    header += [f"marginal_violation_{i}" for i in range(n_nodes)]
    header += ["plan_mass"]
    lines = [",".join(header)]
    for sweep, drift, violation, mass in factors.trace:
        row = [str(sweep), repr(drift)]
        row += [repr(v) for v in violation]
        row += [repr(mass)]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
