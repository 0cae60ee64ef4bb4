"""Tree-structured multi-marginal quadratic costs and their linearization.

The multi-marginal cost is a weighted sum of squared distance mismatches
along the edges of an acyclic graph.  Against a fixed plan, each edge term
linearizes into a cost matrix through the three-term expansion of the
square; the 4-index tensor is never materialized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mmspace import LabelledMmSpace, MarginalPenalty, PenaltyKind, log_density_integral

__all__ = [
    "CostTree",
    "EdgeCostMatrix",
    "FusedConfig",
    "gw_edge_linearization",
    "assemble_cgamma",
    "barycenter_star_tree",
    "chain_tree",
    "fused_star_costs",
    "mcnd_quadratic_form",
    "InfeasibleIterateError",
]


class InfeasibleIterateError(RuntimeError):
    """The current iterate has infinite divergence against its marginal."""


@dataclass(frozen=True)
class CostTree:
    """Acyclic pairwise decomposition of the multi-marginal cost.

    edges: (i, j, weight) with weight > 0.  The edge set must be acyclic;
    the Sinkhorn solver additionally requires it to be spanning.
    """

    n_nodes: int
    edges: Tuple[Tuple[int, int, float], ...]
    node_sizes: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        edges = tuple((int(i), int(j), float(w)) for i, j, w in self.edges)
        object.__setattr__(self, "edges", edges)
        seen = set()
        for i, j, w in edges:
            if i == j:
                raise ValueError(f"self-loop edge ({i},{j})")
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ValueError(f"edge ({i},{j}) out of range")
            if w <= 0:
                raise ValueError("edge weights must be positive; drop zero edges")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"repeated edge {key}")
            seen.add(key)
        # acyclicity via union-find
        parent = list(range(self.n_nodes))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j, _ in edges:
            ri, rj = find(i), find(j)
            if ri == rj:
                raise ValueError("edge set contains a cycle")
            parent[ri] = rj
        if self.node_sizes is not None:
            sizes = tuple(int(s) for s in self.node_sizes)
            if len(sizes) != self.n_nodes:
                raise ValueError("node_sizes length mismatch")
            object.__setattr__(self, "node_sizes", sizes)

    @property
    def is_spanning(self) -> bool:
        return len(self.edges) == self.n_nodes - 1

    def neighbors(self, i: int) -> List[int]:
        out = []
        for a, b, _ in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return out

    def edge_index(self, i: int, j: int) -> int:
        for k, (a, b, _) in enumerate(self.edges):
            if (a, b) == (i, j) or (a, b) == (j, i):
                return k
        raise KeyError(f"({i},{j}) is not a tree edge")

    def preorder(self, root: int = 0) -> List[int]:
        """DFS preorder from ``root``, children visited in ascending index."""
        adj = {k: [] for k in range(self.n_nodes)}
        for a, b, _ in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        for k in adj:
            adj[k].sort()
        order, stack, seen = [], [root], {root}
        while stack:
            v = stack.pop()
            order.append(v)
            for nb in reversed(adj[v]):
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(order) != self.n_nodes:
            raise ValueError("tree is not connected; Sinkhorn needs a spanning tree")
        return order

    def to_json(self) -> str:
        return json.dumps({"edges": [{"i": i, "j": j, "w": w} for i, j, w in self.edges]})

    @staticmethod
    def from_json(text: str, n_nodes: Optional[int] = None) -> "CostTree":
        data = json.loads(text)
        edges = [(e["i"], e["j"], e.get("w", 1.0)) for e in data["edges"]]
        if n_nodes is None:
            n_nodes = 1 + max(max(i, j) for i, j, _ in edges) if edges else 1
        return CostTree(n_nodes, tuple(edges))


@dataclass(frozen=True)
class EdgeCostMatrix:
    """Pairwise cost values attached to one tree edge."""

    edge: Tuple[int, int]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if not np.all(np.isfinite(m)):
            raise ValueError("edge cost entries must be finite")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class FusedConfig:
    """Structure/label trade-off for fused problems."""

    beta: float
    label_exponent: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not self.label_exponent > 0:
            raise ValueError("label exponent must be positive")


def gw_edge_linearization(Di, Dj, gamma_edge, gamma_i, gamma_j) -> np.ndarray:
    """Linearized squared-mismatch cost of one edge against a fixed plan.

    Returns M with
    ``M[a, b] = <Di[a,:]^2, gamma_i> + <Dj[b,:]^2, gamma_j> - 2 (Di @ gamma_edge @ Dj.T)[a, b]``
    which equals ``sum_{a',b'} |Di[a,a'] - Dj[b,b']|^2 gamma_edge[a',b']`` exactly.
    """
    Di = np.asarray(Di, dtype=np.float64)
    Dj = np.asarray(Dj, dtype=np.float64)
    G = np.asarray(gamma_edge, dtype=np.float64)
    gi = np.asarray(gamma_i, dtype=np.float64)
    gj = np.asarray(gamma_j, dtype=np.float64)
    ni, nj = Di.shape[0], Dj.shape[0]
    if G.shape != (ni, nj) or gi.shape != (ni,) or gj.shape != (nj,):
        raise ValueError("gw_edge_linearization: dimension mismatch")
    term_i = (Di * Di) @ gi
    term_j = (Dj * Dj) @ gj
    cross = Di @ G @ Dj.T
    return term_i[:, None] + term_j[None, :] - 2.0 * cross


def barycenter_star_tree(input_sizes: Sequence[int], support_size: int, rho) -> CostTree:
    """Star tree for the fixed-support barycenter: hub node carries the support."""
    rho = np.asarray(rho, dtype=np.float64)
    n = len(input_sizes)
    if rho.shape != (n,):
        raise ValueError("rho must have one weight per input")
    if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
        raise ValueError("rho must be nonnegative and sum to 1")
    hub = n
    edges = tuple((i, hub, float(rho[i])) for i in range(n) if rho[i] > 0)
    sizes = tuple(int(s) for s in input_sizes) + (int(support_size),)
    return CostTree(n + 1, edges, sizes)


def chain_tree(sizes: Sequence[int]) -> CostTree:
    """Path graph with unit edge weights (snapshot chains; N=2 reduces to UGW)."""
    n = len(sizes)
    if n < 2:
        raise ValueError("a chain needs at least 2 nodes")
    edges = tuple((i, i + 1, 1.0) for i in range(n - 1))
    return CostTree(n, edges, tuple(int(s) for s in sizes))


def fused_star_costs(
    labelled: Sequence[LabelledMmSpace],
    barycenter_labels,
    fused: FusedConfig,
    rho,
) -> List[EdgeCostMatrix]:
    """Additive label cost matrices for the star edges of a fused barycenter.

    For edge (i, hub) the matrix is ``L_i[a, y] = rho_i * e(label_i(a), label_hub(y))**p``
    with the shared label metric e.  The caller scales by beta/2 and the plan
    mass when assembling the linearized cost.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if len(labelled) != rho.shape[0]:
        raise ValueError("rho must match the number of labelled inputs")
    space = labelled[0].label_space
    for sp in labelled[1:]:
        if sp.label_space is not space and not np.array_equal(
            sp.label_space.dist, space.dist
        ):
            raise ValueError("all inputs must share one label space")
    ylab = np.asarray(barycenter_labels, dtype=np.intp)
    if ylab.size and (ylab.min() < 0 or ylab.max() >= space.n):
        raise ValueError("barycenter label index out of range")
    e = space.dist
    p = fused.label_exponent
    hub = len(labelled)
    out = []
    for i, sp in enumerate(labelled):
        table = e[np.ix_(sp.label_of, ylab)] ** p
        out.append(EdgeCostMatrix((i, hub), rho[i] * table))
    return out


def assemble_cgamma(
    tree: CostTree,
    spaces: Sequence,
    gamma,
    penalties: Sequence[MarginalPenalty],
    eps: float,
    reference,
    fused: Optional[FusedConfig] = None,
    label_costs: Optional[Sequence[EdgeCostMatrix]] = None,
):
    """Per-edge linearized cost of the quadratic objective against ``gamma``.

    Returns ``(edge_costs, node_costs, constant)``:

    * ``edge_costs[k]`` covers tree edge k, scaled by its weight (and by
      ``1 - beta`` for fused problems); fused label terms enter the star
      edges as ``(beta/2) * |gamma| * L_i``.
    * ``node_costs`` are zero vectors (kept for the solver's cost model).
    * ``constant`` collects the terms of the linearized cost that do not
      depend on the integration variable: the KL-marginal log-density
      integrals of ``gamma`` (weighted by their penalty scale), the
      entropic log-density of ``gamma`` against the reference (weighted by
      ``eps``), and the mirrored fused label term.

    ``gamma`` must expose ``node_marginal``, ``edge_marginal``, ``plan_mass``
    and ``log_density_integral``; both factored plans and dense oracle plans do.
    """
    mass = gamma.plan_mass()
    marg = [gamma.node_marginal(i) for i in range(tree.n_nodes)]
    struct_scale = (1.0 - fused.beta) if fused is not None else 1.0
    edge_costs = []
    for i, j, w in tree.edges:
        G = gamma.edge_marginal(i, j)
        M = gw_edge_linearization(spaces[i].dist, spaces[j].dist, G, marg[i], marg[j])
        edge_costs.append(EdgeCostMatrix((i, j), struct_scale * w * M))
    constant = 0.0
    if fused is not None and label_costs:
        half_beta = 0.5 * fused.beta
        for lc in label_costs:
            k = tree.edge_index(*lc.edge)
            a, b, _ = tree.edges[k]
            L = lc.matrix if (a, b) == lc.edge else lc.matrix.T
            edge_costs[k] = EdgeCostMatrix(
                (a, b), edge_costs[k].matrix + half_beta * mass * L
            )
            G = gamma.edge_marginal(a, b)
            constant += half_beta * float(np.sum(L * G))
    for i, pen in enumerate(penalties):
        if pen.kind is PenaltyKind.SCALED_KL:
            val = log_density_integral(marg[i], spaces[i].weights)
            if math.isinf(val):
                raise InfeasibleIterateError(
                    f"iterate marginal {i} is not absolutely continuous w.r.t. its input"
                )
            constant += pen.lam * val
    constant += eps * gamma.log_density_integral()
    node_costs = [np.zeros(m.shape[0]) for m in marg]
    return edge_costs, node_costs, constant


def mcnd_quadratic_form(cost, spaces, alpha, marginal_tol: float = 1e-10) -> float:
    """Quadratic form of the cost on a signed measure with vanishing marginals.

    ``cost`` is either a :class:`CostTree` (the form is evaluated edge by
    edge through the exact three-term expansion) or a dense
    ``prod(n) x prod(n)`` cost matrix over the row-major product grid.
    ``alpha`` is a signed tensor on the product grid; every node marginal
    must vanish (up to ``marginal_tol``), otherwise a ValueError is raised.
    """
    sizes = tuple(sp.n for sp in spaces)
    a = np.asarray(alpha, dtype=np.float64).reshape(sizes)
    for i in range(len(sizes)):
        axes = tuple(k for k in range(len(sizes)) if k != i)
        marg = a.sum(axis=axes)
        if np.max(np.abs(marg), initial=0.0) > marginal_tol:
            raise ValueError(f"node marginal {i} of alpha does not vanish")
    if isinstance(cost, CostTree):
        total = 0.0
        for i, j, w in cost.edges:
            axes = tuple(k for k in range(len(sizes)) if k not in (i, j))
            A = a.sum(axis=axes)
            if i > j:
                A = A.T
            ii, jj = min(i, j), max(i, j)
            Di, Dj = spaces[ii].dist, spaces[jj].dist
            # |d_i - d_j|^2 splits into d_i^2 + d_j^2 - 2 d_i d_j; the pure
            # terms vanish against zero marginals, kept here for exactness
            mi, mj = A.sum(axis=1), A.sum(axis=0)
            total += w * float(mi @ ((Di * Di) @ mi))
            total += w * float(mj @ ((Dj * Dj) @ mj))
            total -= 2.0 * w * float(np.sum(A * (Di @ A @ Dj.T)))
        return total
    C = np.asarray(cost, dtype=np.float64)
    flat = a.ravel()
    if C.shape != (flat.size, flat.size):
        raise ValueError("dense cost has wrong shape for the product grid")
    return float(flat @ C @ flat)
