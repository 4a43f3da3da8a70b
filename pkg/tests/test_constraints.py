import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cgat.attention import AttentionMatrix, neighborhood_softmax
from cgat.autodiff import Tensor, finite_diff_check
from cgat.constraints import (MarginConfig, TripleBatch, adaptive_negative_sample, arc_label_relation,
                              boundary_margin_loss, boundary_triples, classification_loss, node_importance,
                              sample_negatives, structure_margin_loss, structure_triples, total_loss,
                              uniform_negative_sample)
from cgat.graph import Graph, add_self_loops, random_connected_graph


def table_phi(table):
    """Score function reading a fixed N x N table."""
    t = np.asarray(table, dtype=float)
    return lambda src, dst: Tensor(t[np.asarray(src), np.asarray(dst)])


def batch(*triples):
    a, p, n = zip(*triples)
    return TripleBatch(a, p, n)


class TestMarginLosses:
    def test_structure_inactive(self):
        phi = table_phi([[0, 0.9, 0.2]] * 3)
        assert structure_margin_loss(phi, batch((0, 1, 2)), 0.1).item() == 0.0

    def test_structure_hand_value(self):
        phi = table_phi([[0, 0.5, 0.8]] * 3)
        assert structure_margin_loss(phi, batch((0, 1, 2)), 0.2).item() == pytest.approx(0.5)

    def test_equal_scores_zero_margin(self):
        phi = table_phi(np.ones((3, 3)))
        assert structure_margin_loss(phi, batch((0, 1, 2), (1, 0, 2)), 0.0).item() == 0.0

    def test_boundary_hand_value(self):
        phi = table_phi([[0, 1.0, 0.95]] * 3)
        assert boundary_margin_loss(phi, batch((0, 1, 2)), 0.1).item() == pytest.approx(0.05)

    def test_mean_over_triples(self):
        phi = table_phi([[0, 0.5, 0.8]] * 3)
        two = batch((0, 1, 2), (0, 2, 1))  # terms 0.5 and 0
        assert structure_margin_loss(phi, two, 0.2).item() == pytest.approx(0.25)

    def test_empty_batch(self):
        assert structure_margin_loss(table_phi(np.ones((2, 2))), TripleBatch.empty(), 0.2).item() == 0.0

    @given(st.integers(0, 1000), st.floats(0, 1))
    @settings(max_examples=30, deadline=None)
    def test_non_negative_and_zero_iff_satisfied(self, seed, zeta):
        rng = np.random.default_rng(seed)
        t = rng.standard_normal((5, 5))
        trip = TripleBatch(rng.integers(5, size=8), rng.integers(5, size=8), rng.integers(5, size=8))
        loss = structure_margin_loss(table_phi(t), trip, zeta).item()
        slack = t[trip.anchors, trip.negatives] + zeta - t[trip.anchors, trip.positives]
        assert loss >= 0
        assert (loss == 0) == bool((slack <= 0).all() or np.isclose(slack.max(), 0))

    def test_gradient_through_phi(self):
        rng = np.random.default_rng(0)
        trip = batch((0, 1, 2), (1, 0, 3), (2, 3, 0))
        from cgat import autodiff as ad

        def loss(p):
            phi = lambda s, d: ad.reshape(ad.matmul(ad.mul(ad.gather_rows(p["u"], s), ad.gather_rows(p["u"], d)),
                                                    Tensor(np.ones((3, 1)))), (len(s),))
            return ad.add(structure_margin_loss(phi, trip, 5.0), boundary_margin_loss(phi, trip, 5.0))
        assert finite_diff_check(loss, {"u": rng.standard_normal((4, 3))}).max_error < 1e-5


class TestImportance:
    def test_uniform_regular_clique(self):
        g = Graph.from_edges(4, [(i, j) for i in range(4) for j in range(i + 1, 4)], self_loops=True)
        attn = neighborhood_softmax(Tensor(np.zeros(g.num_arcs)), g)
        assert np.allclose(node_importance(attn), 1.0)

    def test_identity(self):
        g = add_self_loops(Graph.from_edges(3, []))
        assert np.allclose(node_importance(AttentionMatrix(g, Tensor(np.ones(3)))), 1.0)

    def test_dense_column_sums(self):
        g = Graph.from_edges(3, [(0, 1), (1, 2)], self_loops=True)
        attn = neighborhood_softmax(Tensor(np.random.default_rng(1).standard_normal(g.num_arcs)), g)
        assert np.allclose(node_importance(attn), attn.to_dense().sum(axis=0))

    @given(st.integers(2, 15), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_total_is_node_count(self, n, seed):
        rng = np.random.default_rng(seed)
        g = random_connected_graph(n, 0.3, rng, self_loops=True)
        attn = neighborhood_softmax(Tensor(rng.standard_normal(g.num_arcs)), g)
        assert node_importance(attn).sum() == pytest.approx(n)


class TestSampling:
    def test_one_hot_weights(self):
        g = Graph.from_edges(5, [(0, 1)])
        w = np.zeros(5)
        w[3] = 1.0
        assert (adaptive_negative_sample(w, 0, g, 50, 0) == 3).all()

    def test_zero_weights_fall_back_to_uniform(self):
        g = Graph.from_edges(4, [(0, 1)])
        w = np.array([1.0, 1.0, 0.0, 0.0])
        draw = adaptive_negative_sample(w, 0, g, 2000, 1)
        assert set(draw.tolist()) == {2, 3}

    def test_uniform_chi_square(self):
        g = Graph.from_edges(10, [(0, 1), (0, 2)])
        draw = adaptive_negative_sample(np.ones(10), 0, g, 10_000, np.random.default_rng(2))
        counts = np.bincount(draw, minlength=10)
        assert counts[:3].sum() == 0
        assert stats.chisquare(counts[3:]).pvalue > 0.01

    def test_two_candidates_binomial(self):
        g = Graph.from_edges(4, [(0, 1)], self_loops=True)
        draw = uniform_negative_sample(0, g, 10_000, 3)
        share = (draw == 2).mean()
        assert set(draw.tolist()) == {2, 3}
        assert abs(share - 0.5) < 3 * np.sqrt(0.25 / 10_000)

    def test_no_candidates(self):
        g = Graph.from_edges(3, [(0, 1), (0, 2), (1, 2)], self_loops=True)
        with pytest.raises(ValueError):
            uniform_negative_sample(0, g, 3, 0)

    def test_count_zero(self):
        assert uniform_negative_sample(0, Graph.from_edges(3, []), 0, 0).size == 0

    @given(st.integers(3, 20), st.integers(0, 1000), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_never_returns_closed_neighborhood(self, n, seed, weighted):
        rng = np.random.default_rng(seed)
        g = random_connected_graph(n, 0.3, rng, self_loops=bool(seed % 2))
        w = rng.random(n) if weighted else None
        open_nodes = [i for i in range(n) if len(set(g.neighbors(i).tolist()) | {i}) < n]
        if not open_nodes:
            return
        out = sample_negatives(open_nodes, g, 7, rng, weights=w)
        for a, row in zip(open_nodes, out):
            assert a not in row
            assert not g.has_arcs(np.full(7, a), row).any()


class TestTriples:
    def setup_method(self):
        # 0-1 same class, 0-2 different, 2-3 same; node 3 unlabeled
        self.g = Graph.from_edges(5, [(0, 1), (0, 2), (2, 3), (3, 4)], self_loops=True)
        self.labels = np.array([0, 0, 1, 1, 0])
        self.known = np.array([True, True, True, False, True])

    def test_relation_needs_both_labels(self):
        same, diff = arc_label_relation(self.g, self.labels, self.known)
        arcs = list(zip(self.g.rows.tolist(), self.g.indices.tolist()))
        assert same[arcs.index((0, 1))] and diff[arcs.index((0, 2))]
        assert not same[arcs.index((2, 3))] and not diff[arcs.index((2, 3))]

    def test_multi_label_shared_label_counts_as_same(self):
        g = Graph.from_edges(2, [(0, 1)])
        labels = np.array([[1, 0, 1], [0, 0, 1]])
        same, diff = arc_label_relation(g, labels, np.array([True, True]))
        assert same.all() and not diff.any()

    def test_structure_invariants(self):
        cfg = MarginConfig(negatives_per_anchor=3, positives_per_anchor=2)
        trip = structure_triples(self.g, self.labels, self.known, cfg, np.random.default_rng(0))
        _, diff = arc_label_relation(self.g, self.labels, self.known)
        bad = {(int(r), int(c)) for r, c in zip(self.g.rows[diff], self.g.indices[diff])}
        for a, p, n in zip(trip.anchors, trip.positives, trip.negatives):
            assert self.g.has_arcs([a], [p])[0] and (a, p) not in bad
            assert not self.g.has_arcs([a], [n])[0] and n != a
        assert len(trip) == 6 * len(np.unique(trip.anchors))

    def test_boundary_invariants(self):
        trip = boundary_triples(self.g, self.labels, self.known, MarginConfig(), np.random.default_rng(0))
        # self-loops are same-class arcs, so node 2 anchors with itself as positive
        assert set(trip.anchors.tolist()) == {0, 2}
        at0 = trip.anchors == 0
        assert set(trip.positives[at0].tolist()) <= {0, 1} and set(trip.negatives[at0].tolist()) == {2}
        assert set(trip.positives[~at0].tolist()) == {2} and set(trip.negatives[~at0].tolist()) == {0}

    def test_homogeneous_anchor_has_no_boundary_triples(self):
        labels = np.zeros(5, dtype=int)
        trip = boundary_triples(self.g, labels, np.ones(5, bool), MarginConfig(), np.random.default_rng(0))
        assert len(trip) == 0


class TestObjective:
    def test_confident_correct(self):
        logits = Tensor(np.eye(3) * 1e6)
        assert classification_loss(logits, np.arange(3), np.ones(3, bool)).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_logits(self):
        loss = classification_loss(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3]), np.ones(4, bool))
        assert loss.item() == pytest.approx(np.log(5))

    def test_multi_label_zero_logits(self):
        loss = classification_loss(Tensor(np.zeros((3, 4))), np.ones((3, 4), int), np.ones(3, bool))
        assert loss.item() == pytest.approx(np.log(2))

    def test_only_masked_rows_count(self):
        logits = np.array([[0.0, 0.0], [100.0, -100.0]])
        loss = classification_loss(Tensor(logits), np.array([0, 0]), np.array([False, True]))
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            classification_loss(Tensor(np.zeros((2, 2))), np.zeros(2, int), np.zeros(2, bool))

    def test_total_loss_weights(self):
        cfg = MarginConfig(lambda_g=1.0, lambda_b=2.0)
        assert total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), cfg).item() == 9.0

    def test_total_loss_reduces_to_classification(self):
        l_c = Tensor(1.25)
        assert total_loss(l_c, Tensor(2.0), Tensor(3.0), MarginConfig(lambda_g=0.0, lambda_b=0.0)) is l_c

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MarginConfig(zeta_g=-0.1)
        with pytest.raises(ValueError):
            MarginConfig(negatives_per_anchor=0)
