import numpy as np
import pytest

import option_tracing.autodiff as ad
from option_tracing.errors import DataError
from option_tracing.layers import (EmbeddingTables, FeedForwardNet, GcnParams,
                                   LstmCell, embed_subject_set, gcn_embed,
                                   lstm_step, neighbor_means, subject_multihot)


@pytest.fixture
def tables():
    return EmbeddingTables.create(np.random.default_rng(7), num_questions=9,
                                  num_subjects=5, d=4)


class TestSubjectEmbedding:
    def test_singleton_is_table_row(self, tables):
        out = embed_subject_set(tables, [3])
        np.testing.assert_allclose(out.values, tables.subject.values[3:4])

    def test_set_sums_rows(self, tables):
        out = embed_subject_set(tables, [0, 2, 4])
        want = tables.subject.values[[0, 2, 4]].sum(axis=0, keepdims=True)
        np.testing.assert_allclose(out.values, want)

    def test_order_and_duplicates_ignored(self, tables):
        a = embed_subject_set(tables, [4, 1]).values
        b = embed_subject_set(tables, [1, 4, 1]).values
        np.testing.assert_array_equal(a, b)

    def test_empty_set_rejected(self, tables):
        with pytest.raises(DataError):
            embed_subject_set(tables, [])

    def test_unknown_id_rejected(self, tables):
        with pytest.raises(DataError):
            embed_subject_set(tables, [99])

    def test_multihot_matches_gather_sum(self, tables):
        hot = subject_multihot([[0, 2], [1], [3, 4]], 5)
        out = hot @ tables.subject.values
        np.testing.assert_allclose(out[0], tables.subject.values[[0, 2]].sum(axis=0))
        np.testing.assert_allclose(out[1], tables.subject.values[1])


class TestFeedForward:
    def test_zero_params_give_zero_logits(self):
        net = FeedForwardNet(np.random.default_rng(0), [6, 5, 4])
        for w in net.weights:
            w.values[:] = 0.0
        out = net(ad.constant(np.random.default_rng(1).normal(size=(3, 6))))
        np.testing.assert_array_equal(out.values, np.zeros((3, 4)))

    def test_final_layer_is_linear(self):
        # a purely linear single layer must reproduce x @ w + b exactly
        net = FeedForwardNet(np.random.default_rng(2), [4, 3])
        x = np.random.default_rng(3).normal(size=(5, 4))
        want = x @ net.weights[0].values + net.biases[0].values
        np.testing.assert_allclose(net(ad.constant(x)).values, want)

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        net = FeedForwardNet(rng, [3, 4, 2])
        x = ad.constant(rng.normal(size=(2, 3)))
        params = list(net.weights) + list(net.biases)

        def f(*ps):
            return ad.sum_all(ad.tanh(net(x)))

        assert ad.finite_difference_check(f, params) < 1e-4


class TestLstm:
    def test_zero_everything_stays_zero(self):
        cell = LstmCell(np.random.default_rng(5), 3, 4)
        for t in list(cell.w_x.values()) + list(cell.w_h.values()) + list(cell.b.values()):
            t.values[:] = 0.0
        h = ad.constant(np.zeros((2, 4)))
        c = ad.constant(np.zeros((2, 4)))
        x = ad.constant(np.random.default_rng(6).normal(size=(2, 3)))
        h2, c2 = lstm_step(cell, h, c, x)
        np.testing.assert_array_equal(h2.values, np.zeros((2, 4)))
        np.testing.assert_array_equal(c2.values, np.zeros((2, 4)))

    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(7)
        cell = LstmCell(rng, 3, 4)
        h = ad.constant(rng.normal(size=(8, 4)))
        c = ad.constant(rng.normal(size=(8, 4)) * 3)
        h2, _ = cell.step(h, c, ad.constant(rng.normal(size=(8, 3)) * 2))
        assert np.all(np.abs(h2.values) < 1.0)

    def test_step_gradcheck(self):
        rng = np.random.default_rng(8)
        cell = LstmCell(rng, 2, 3)
        x = ad.constant(rng.normal(size=(2, 2)))
        h0 = ad.constant(rng.normal(size=(2, 3)) * 0.1)
        c0 = ad.constant(rng.normal(size=(2, 3)) * 0.1)
        params = ([cell.w_x[g] for g in cell.GATES] + [cell.w_h[g] for g in cell.GATES]
                  + [cell.b[g] for g in cell.GATES])

        def f(*ps):
            h, c = cell.step(h0, c0, x)
            return ad.add(ad.sum_all(h), ad.sum_all(c))

        assert ad.finite_difference_check(f, params) < 1e-4


class TestGraphPropagation:
    def test_neighbor_means_row_normalized(self):
        a_sq, a_qs = neighbor_means({0: (0, 1), 1: (1,)}, num_questions=2, num_subjects=3)
        np.testing.assert_allclose(a_qs[0], [0.5, 0.5, 0.0])
        np.testing.assert_allclose(a_qs[1], [0.0, 1.0, 0.0])
        np.testing.assert_allclose(a_sq[1], [0.5, 0.5])
        np.testing.assert_array_equal(a_sq[2], [0.0, 0.0])  # untagged subject

    def test_identity_weights_single_neighbor(self, tables):
        # one question tagged with one subject: level-1 row is
        # tanh(subject + question) and level-2 is tanh(question + level-1)
        params = GcnParams(np.random.default_rng(9), 4)
        eye = np.eye(4)
        for w in (params.w_ss, params.w_sq, params.w_qq, params.w_qs):
            w.values[:] = eye
        graph = {q: (q % 5,) for q in range(9)}
        graph[0] = (3,)
        graph[3] = (4,)
        graph[8] = (0,)  # subject 3 now pairs exclusively with question 0
        s1, q2 = gcn_embed(params, tables, graph, 9, 5)
        e_q = tables.question.values[0]
        e_s = tables.subject.values[3]
        np.testing.assert_allclose(s1.values[3], np.tanh(e_s + e_q), atol=1e-12)
        np.testing.assert_allclose(q2.values[0], np.tanh(e_q + np.tanh(e_s + e_q)), atol=1e-12)

    def test_zero_weights_give_zero_rows(self, tables):
        params = GcnParams(np.random.default_rng(10), 4)
        for w in (params.w_ss, params.w_sq, params.w_qq, params.w_qs):
            w.values[:] = 0.0
        s1, q2 = gcn_embed(params, tables, {0: (0,)}, 9, 5)
        np.testing.assert_array_equal(s1.values, np.zeros((5, 4)))
        np.testing.assert_array_equal(q2.values, np.zeros((9, 4)))

    def test_outputs_bounded(self, tables):
        params = GcnParams(np.random.default_rng(11), 4)
        graph = {q: tuple({q % 5, (q * 2) % 5}) for q in range(9)}
        s1, q2 = gcn_embed(params, tables, graph, 9, 5)
        assert np.all(np.abs(s1.values) < 1.0)
        assert np.all(np.abs(q2.values) < 1.0)

    def test_gradcheck_through_propagation(self, tables):
        params = GcnParams(np.random.default_rng(12), 4)
        graph = {q: (q % 5,) for q in range(9)}

        def f(*ps):
            s1, q2 = gcn_embed(params, tables, graph, 9, 5)
            return ad.add(ad.sum_all(s1), ad.sum_all(q2))

        leaves = [params.w_ss, params.w_sq, params.w_qq, params.w_qs,
                  tables.question, tables.subject]
        assert ad.finite_difference_check(f, leaves) < 1e-4
