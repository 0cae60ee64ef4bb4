import math

import numpy as np
import pytest

from mmgw.cli import zero_marginal_tensor
from mmgw.mmspace import LabelledMmSpace, LabelSpace, MarginalPenalty, MmSpace
from mmgw.sinkhorn import ReferenceMeasure
from mmgw.treecost import (
    CostTree,
    FusedConfig,
    barycenter_star_tree,
    chain_tree,
    fused_star_costs,
    gw_edge_linearization,
    mcnd_quadratic_form,
)


def euclidean_space(points, weights=None, rng=None):
    pts = np.asarray(points, dtype=float)
    d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
    n = pts.shape[0]
    if weights is None:
        weights = np.ones(n) / n
    return MmSpace(d, weights)


def dense_edge_cost(Di, Dj, gamma_edge):
    ni, nj = Di.shape[0], Dj.shape[0]
    M = np.zeros((ni, nj))
    for a in range(ni):
        for b in range(nj):
            for ap in range(ni):
                for bp in range(nj):
                    M[a, b] += (Di[a, ap] - Dj[b, bp]) ** 2 * gamma_edge[ap, bp]
    return M


class TestCostTree:
    def test_rejects_cycles_and_duplicates(self):
        with pytest.raises(ValueError, match="cycle"):
            CostTree(3, [(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)])
        with pytest.raises(ValueError, match="repeated"):
            CostTree(3, [(0, 1, 1.0), (1, 0, 1.0)])
        with pytest.raises(ValueError, match="self-loop"):
            CostTree(2, [(1, 1, 1.0)])
        with pytest.raises(ValueError, match="positive"):
            CostTree(2, [(0, 1, 0.0)])

    def test_preorder_requires_connected(self):
        forest = CostTree(4, [(0, 1, 1.0), (2, 3, 1.0)])
        assert not forest.is_spanning
        with pytest.raises(ValueError, match="not connected"):
            forest.preorder()

    def test_json_round_trip(self):
        tree = CostTree(3, [(0, 2, 0.5), (1, 2, 0.5)])
        again = CostTree.from_json(tree.to_json())
        assert again.edges == tree.edges
        assert again.n_nodes == 3


class TestTreeBuilders:
    def test_star(self):
        tree = barycenter_star_tree([4, 5], 6, [0.5, 0.5])
        assert tree.n_nodes == 3
        assert set(tree.edges) == {(0, 2, 0.5), (1, 2, 0.5)}
        assert barycenter_star_tree([3] * 5, 4, [0.2] * 5).n_nodes == 6
        single = barycenter_star_tree([3], 3, [1.0])
        assert single.edges == ((0, 1, 1.0),)

    def test_star_rejects_bad_rho(self):
        with pytest.raises(ValueError, match="sum to 1"):
            barycenter_star_tree([3, 3], 4, [0.4, 0.4])

    def test_chain(self):
        assert len(chain_tree([2] * 5).edges) == 4
        assert chain_tree([2, 2]).edges == ((0, 1, 1.0),)
        assert chain_tree([2, 2, 2]).edges == ((0, 1, 1.0), (1, 2, 1.0))
        with pytest.raises(ValueError):
            chain_tree([3])


class TestEdgeLinearization:
    def test_one_point(self):
        M = gw_edge_linearization([[0.0]], [[0.0]], [[1.0]], [1.0], [1.0])
        np.testing.assert_allclose(M, [[0.0]])

    def test_two_point_half_identity(self):
        D = np.array([[0.0, 1.0], [1.0, 0.0]])
        G = np.eye(2) / 2
        M = gw_edge_linearization(D, D, G, G.sum(1), G.sum(0))
        np.testing.assert_allclose(M, [[0.0, 1.0], [1.0, 0.0]], atol=1e-15)
        np.testing.assert_allclose(M, dense_edge_cost(D, D, G), atol=1e-15)

    def test_matches_dense_random(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            ni, nj = rng.integers(2, 7, size=2)
            Di = np.abs(rng.normal(size=(ni, ni)))
            Di = 0.5 * (Di + Di.T)
            np.fill_diagonal(Di, 0.0)
            Dj = np.abs(rng.normal(size=(nj, nj)))
            Dj = 0.5 * (Dj + Dj.T)
            np.fill_diagonal(Dj, 0.0)
            G = rng.uniform(0.0, 1.0, size=(ni, nj))
            M = gw_edge_linearization(Di, Dj, G, G.sum(1), G.sum(0))
            np.testing.assert_allclose(M, dense_edge_cost(Di, Dj, G), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gw_edge_linearization(np.zeros((2, 2)), np.zeros((2, 2)),
                                  np.zeros((3, 2)), np.zeros(2), np.zeros(2))


class TestFusedStarCosts:
    def _labelled_pair(self):
        lab = LabelSpace(np.array([[0.0, 1.0], [1.0, 0.0]]))
        rng = np.random.default_rng(6)
        spaces = []
        for labels in ([0, 1, 0], [1, 0, 1]):
            base = euclidean_space(rng.normal(size=(3, 2)))
            spaces.append(LabelledMmSpace(base, labels, lab))
        return spaces, lab

    def test_label_tables(self):
        spaces, lab = self._labelled_pair()
        cfg = FusedConfig(beta=0.5)
        out = fused_star_costs(spaces, [0, 1], cfg, [0.3, 0.7])
        assert out[0].edge == (0, 2) and out[1].edge == (1, 2)
        e = lab.dist
        want0 = 0.3 * e[np.ix_([0, 1, 0], [0, 1])] ** 2
        np.testing.assert_allclose(out[0].matrix, want0)

    def test_camel_metric_table(self):
        # pairwise label metric: 0 same, 1 for opposite parts, 1/2 otherwise
        e = np.zeros((4, 4))
        for a in range(4):
            for b in range(4):
                if a != b:
                    e[a, b] = 1.0 if abs(a - b) == 2 else 0.5
        lab = LabelSpace(e)
        base = euclidean_space(np.random.default_rng(7).normal(size=(4, 2)))
        sp = LabelledMmSpace(base, [0, 1, 2, 3], lab)
        out = fused_star_costs([sp], [0, 1, 2, 3], FusedConfig(0.5, 1.0), [1.0])
        np.testing.assert_allclose(out[0].matrix, e)

    def test_label_space_mismatch(self):
        spaces, _ = self._labelled_pair()
        other = LabelSpace(np.array([[0.0, 0.5], [0.5, 0.0]]))
        bad = LabelledMmSpace(spaces[1].base, spaces[1].label_of, other)
        with pytest.raises(ValueError, match="share one label space"):
            fused_star_costs([spaces[0], bad], [0, 1], FusedConfig(0.5), [0.5, 0.5])


def great_circle_space(n, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    d = np.arccos(np.clip(v @ v.T, -1, 1)) / np.pi
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return MmSpace(d, np.ones(n) / n)


class TestMcnd:
    def test_zero_alpha(self):
        spaces = [euclidean_space(np.random.default_rng(8).normal(size=(2, 2)))
                  for _ in range(3)]
        tree = chain_tree([2, 2, 2])
        assert mcnd_quadratic_form(tree, spaces, np.zeros((2, 2, 2))) == 0.0

    def test_rejects_nonvanishing_marginal(self):
        spaces = [euclidean_space(np.random.default_rng(9).normal(size=(2, 2)))
                  for _ in range(2)]
        tree = chain_tree([2, 2])
        with pytest.raises(ValueError, match="does not vanish"):
            mcnd_quadratic_form(tree, spaces, np.full((2, 2), 0.25))

    def test_euclidean_and_great_circle_nonpositive(self):
        rng = np.random.default_rng(10)
        spaces3 = [euclidean_space(rng.normal(size=(2, 2))) for _ in range(3)]
        tree3 = chain_tree([2, 2, 2])
        pair = [great_circle_space(3, 11), euclidean_space(rng.normal(size=(3, 2)))]
        tree2 = chain_tree([3, 3])
        worst = -math.inf
        for _ in range(200):
            a = zero_marginal_tensor(rng.normal(size=(2, 2, 2)))
            worst = max(worst, mcnd_quadratic_form(tree3, spaces3, a))
            b = zero_marginal_tensor(rng.normal(size=(3, 3)))
            worst = max(worst, mcnd_quadratic_form(tree2, pair, b))
        assert worst <= 1e-12

    def test_tree_matches_dense_cost(self):
        rng = np.random.default_rng(12)
        spaces = [euclidean_space(rng.normal(size=(2, 2))) for _ in range(3)]
        tree = CostTree(3, [(0, 1, 0.7), (1, 2, 1.3)])
        # dense pairwise cost over the row-major product grid
        from mmgw.oracle import product_coordinates

        coords = product_coordinates((2, 2, 2))
        C = np.zeros((8, 8))
        for i, j, w in tree.edges:
            Di = spaces[i].dist[np.ix_(coords[:, i], coords[:, i])]
            Dj = spaces[j].dist[np.ix_(coords[:, j], coords[:, j])]
            C += w * (Di - Dj) ** 2
        for _ in range(20):
            a = zero_marginal_tensor(rng.normal(size=(2, 2, 2)))
            v1 = mcnd_quadratic_form(tree, spaces, a)
            v2 = mcnd_quadratic_form(C, spaces, a)
            assert v1 == pytest.approx(v2, abs=1e-12)

    def test_squared_euclidean_diagnostic_runs(self):
        # exploratory: squared distances need not be cnd; just report the sign
        rng = np.random.default_rng(13)
        pts = rng.normal(size=(3, 2))
        d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2) ** 2
        spaces = [MmSpace(d, np.ones(3) / 3)] * 2
        tree = chain_tree([3, 3])
        val = mcnd_quadratic_form(tree, spaces, zero_marginal_tensor(
            rng.normal(size=(3, 3))))
        assert np.isfinite(val)
