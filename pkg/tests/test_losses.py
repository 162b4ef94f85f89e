"""Objective-function tests: closed forms, scalar oracles, gradient checks."""

import math

import numpy as np
import pytest

from densecc import autodiff as ad
from densecc.autodiff import Tensor, backward, grad_check, grad_check_params
from densecc.data import Fact
from densecc.losses import (
    RelationClassifier,
    TH_INDEX,
    atl_loss,
    atl_predict,
    bias_loss,
    clustering_loss,
    pair_labels,
)


def oracle_atl_pair(logits_row, pos_rels):
    """Direct transcription of the two-softmax objective for one pair."""
    R = len(logits_row) - 1
    l1 = 0.0
    denom_pos = math.exp(logits_row[0]) + sum(math.exp(logits_row[r + 1]) for r in pos_rels)
    for r in pos_rels:
        l1 -= math.log(math.exp(logits_row[r + 1]) / denom_pos)
    negs = [r for r in range(R) if r not in pos_rels]
    denom_neg = math.exp(logits_row[0]) + sum(math.exp(logits_row[r + 1]) for r in negs)
    l2 = -math.log(math.exp(logits_row[0]) / denom_neg)
    return l1 + l2


def oracle_clustering(feats, positive, mask, mu=1.0, lam=0.5, alpha=1.0, beta=1.0, gamma=1.0):
    pos = feats[mask & (positive > 0.5)]
    neg = feats[mask & (positive <= 0.5)]
    v1, v0 = pos.mean(axis=0), neg.mean(axis=0)

    def cos(x, y):
        return float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))

    l_dist = max(0.0, mu + cos(v0, v1)) ** 2
    l_var1 = sum(max(0.0, lam - cos(v1, f)) ** 2 for f in pos)
    l_var0 = sum(max(0.0, 2 * lam - cos(v0, f)) ** 2 for f in neg)
    return alpha * l_dist + beta * l_var0 + gamma * l_var1


class TestPairLabels:
    def test_golden(self):
        facts = {Fact(0, 1, 0), Fact(0, 1, 2), Fact(2, 0, 1)}
        labels, positive, offdiag = pair_labels(facts, 3, 3)
        assert labels.shape == (9, 3)
        assert labels[0 * 3 + 1].tolist() == [1.0, 0.0, 1.0]
        assert labels[2 * 3 + 0].tolist() == [0.0, 1.0, 0.0]
        assert positive.sum() == 2
        assert offdiag.tolist() == [False, True, True, True, False, True, True, True, False]


class TestAtlClosedForms:
    def test_zero_logits_single_positive_is_ln2(self):
        logits = Tensor(np.zeros((1, 2)))
        loss = atl_loss(logits, np.array([[1.0]]), np.array([True]))
        assert math.isclose(loss.item(), math.log(2.0), abs_tol=1e-12)

    def test_zero_logits_all_negative_is_ln2(self):
        logits = Tensor(np.zeros((1, 2)))
        loss = atl_loss(logits, np.array([[0.0]]), np.array([True]))
        assert math.isclose(loss.item(), math.log(2.0), abs_tol=1e-12)

    def test_zero_logits_two_of_three_positive(self):
        logits = Tensor(np.zeros((1, 4)))
        loss = atl_loss(logits, np.array([[1.0, 0.0, 1.0]]), np.array([True]))
        assert math.isclose(loss.item(), 2 * math.log(3.0) + math.log(2.0), abs_tol=1e-12)


class TestAtlGeneral:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        P, R = 9, 4
        logits = rng.normal(size=(P, R + 1))
        labels = (rng.random((P, R)) < 0.3).astype(float)
        mask = np.ones(P, dtype=bool)
        mask[0] = mask[4] = mask[8] = False
        got = atl_loss(Tensor(logits), labels, mask).item()
        want = np.mean(
            [
                oracle_atl_pair(logits[p], set(np.flatnonzero(labels[p])))
                for p in range(P)
                if mask[p]
            ]
        )
        assert math.isclose(got, want, abs_tol=1e-12)

    def test_mask_excludes_pairs(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(4, 3))
        labels = np.array([[1.0, 0], [0, 0], [0, 1.0], [1.0, 1.0]])
        only_two = atl_loss(Tensor(logits), labels, np.array([True, True, False, False])).item()
        want = np.mean([oracle_atl_pair(logits[p], set(np.flatnonzero(labels[p]))) for p in (0, 1)])
        assert math.isclose(only_two, want, abs_tol=1e-12)
        with pytest.raises(ValueError, match="no pairs"):
            atl_loss(Tensor(logits), labels, np.zeros(4, dtype=bool))

    def test_label_shape_guard(self):
        with pytest.raises(ValueError, match="labels shape"):
            atl_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), np.ones(2, dtype=bool))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        labels = (rng.random((6, 3)) < 0.4).astype(float)
        mask = np.ones(6, dtype=bool)

        def f(x):
            return atl_loss(x, labels, mask)

        assert grad_check(f, Tensor(rng.normal(size=(6, 4))), h=1e-6) < 1e-6

    def test_gradient_descent_solves_the_labels(self):
        rng = np.random.default_rng(3)
        P, R = 6, 2
        labels = np.array([[1, 0], [0, 0], [0, 1], [1, 1], [0, 0], [1, 0]], dtype=float)
        logits = Tensor(rng.normal(size=(P, R + 1)), requires_grad=True)
        mask = np.ones(P, dtype=bool)
        history = []
        for _ in range(120):
            logits.zero_grad()
            loss = atl_loss(logits, labels, mask)
            history.append(loss.item())
            backward(loss)
            logits.data -= 0.5 * logits.grad
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
        assert history[-1] < 0.25 * history[0]
        assert np.array_equal(atl_predict(logits.data), labels > 0.5)


class TestAtlPredict:
    def test_strictly_above_threshold(self):
        logits = np.array([[0.5, 1.0, 0.5, 0.2], [0.0, -0.1, 0.3, 0.0]])
        got = atl_predict(logits)
        assert got.tolist() == [[True, False, False], [False, True, False]]
        assert TH_INDEX == 0


class TestBiasLoss:
    def test_zero_logits_give_ln2(self):
        loss = bias_loss(Tensor(np.zeros(5)), np.array([1, 0, 1, 0, 0.0]), np.ones(5, dtype=bool))
        assert math.isclose(loss.item(), math.log(2.0), abs_tol=1e-12)

    def test_confident_correct_is_small_and_finite(self):
        logits = Tensor(np.array([100.0, -100.0]))
        loss = bias_loss(logits, np.array([1.0, 0.0]), np.ones(2, dtype=bool))
        assert 0.0 <= loss.item() < 1e-6

    def test_confident_wrong_is_clipped_finite(self):
        logits = Tensor(np.array([-500.0]))
        loss = bias_loss(logits, np.array([1.0]), np.ones(1, dtype=bool))
        assert np.isfinite(loss.item())
        assert loss.item() > 10

    def test_scalar_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=7)
        y = (rng.random(7) < 0.5).astype(float)
        mask = rng.random(7) < 0.8
        mask[0] = True
        got = bias_loss(Tensor(x), y, mask).item()
        p = 1 / (1 + np.exp(-x))
        want = np.mean([-(yy * math.log(pp) + (1 - yy) * math.log(1 - pp))
                        for pp, yy, mm in zip(p, y, mask) if mm])
        assert math.isclose(got, want, abs_tol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        y = np.array([1.0, 0, 0, 1, 0])
        mask = np.ones(5, dtype=bool)
        assert grad_check(lambda x: bias_loss(x, y, mask), Tensor(rng.normal(size=5)), h=1e-6) < 1e-6


class TestClusteringLoss:
    def test_hinges_vanish_at_reference_margins(self):
        # positives at +u, negatives at -u: cos(v0, v1) = -1 kills the
        # distance term, cos(v1, f_pos) = cos(v0, f_neg) = 1 kills both
        # variance terms at mu=1, lam=0.5
        u = np.array([1.0, 0.0, 0.0, 0.0])
        feats = np.stack([u, u, -u, -u, -u])
        positive = np.array([1, 1, 0, 0, 0.0])
        loss, used = clustering_loss(Tensor(feats), positive, np.ones(5, dtype=bool))
        assert used
        assert loss.item() == 0.0

    def test_coincident_centers_pay_full_distance_penalty(self):
        u = np.array([1.0, 0.0])
        feats = np.stack([u, u])
        loss, used = clustering_loss(
            Tensor(feats), np.array([1.0, 0.0]), np.ones(2, dtype=bool)
        )
        assert used
        # cos(v0, v1) = 1: distance term (1+1)^2 = 4, variance terms at zero
        assert math.isclose(loss.item(), 4.0, abs_tol=1e-12)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(10, 5))
        positive = (rng.random(10) < 0.4).astype(float)
        positive[:2] = 1.0
        positive[-2:] = 0.0
        mask = np.ones(10, dtype=bool)
        mask[3] = False
        got, used = clustering_loss(
            Tensor(feats), positive, mask, mu=0.8, lam=0.4, alpha=1.5, beta=0.7, gamma=2.0
        )
        assert used
        want = oracle_clustering(feats, positive, mask, mu=0.8, lam=0.4, alpha=1.5, beta=0.7, gamma=2.0)
        assert math.isclose(got.item(), want, abs_tol=1e-12)

    def test_empty_side_skips(self):
        feats = Tensor(np.ones((3, 2)))
        loss, used = clustering_loss(feats, np.zeros(3), np.ones(3, dtype=bool))
        assert not used and loss.item() == 0.0
        loss, used = clustering_loss(feats, np.ones(3), np.ones(3, dtype=bool))
        assert not used and loss.item() == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(7)
        positive = np.array([1, 1, 1, 0, 0, 0, 0.0])
        mask = np.ones(7, dtype=bool)

        def f(x):
            loss, used = clustering_loss(x, positive, mask)
            assert used
            return loss

        assert grad_check(f, Tensor(rng.normal(size=(7, 4))), h=1e-6) < 1e-4


class TestRelationClassifier:
    def _inputs(self, rng, n=3, d=8):
        ents = Tensor(rng.normal(size=(n, d)))
        feats = Tensor(rng.normal(size=(n * n, d)))
        return ents, feats

    def oracle(self, clf, ents, feats, n):
        d, dg = clf.dim, clf.group_dim
        out = np.zeros((n * n, clf.n_relations + 1))
        for s in range(n):
            for o in range(n):
                p = s * n + o
                zs = np.tanh(np.concatenate([ents[s], feats[p]]) @ clf.ws.data + clf.bs.data)
                zo = np.tanh(np.concatenate([ents[o], feats[p]]) @ clf.wo.data + clf.bo.data)
                for c in range(clf.n_relations + 1):
                    total = clf.cbias.data[c]
                    for g in range(clf.n_groups):
                        a = zs[g * dg : (g + 1) * dg]
                        b = zo[g * dg : (g + 1) * dg]
                        total += a @ clf.bilinear.data[c, g] @ b
                    out[p, c] = total
        return out

    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_matches_loop_oracle(self, groups):
        rng = np.random.default_rng(8)
        clf = RelationClassifier(dim=8, n_relations=3, n_groups=groups, seed=groups)
        clf.bilinear.data *= 30.0
        ents, feats = self._inputs(rng)
        got = clf(ents, feats, 3)
        assert got.shape == (9, 4)
        np.testing.assert_allclose(got.data, self.oracle(clf, ents.data, feats.data, 3), atol=1e-12)

    def test_group_divisibility_guard(self):
        with pytest.raises(ValueError, match="not divisible"):
            RelationClassifier(dim=6, n_relations=2, n_groups=4)

    def test_direction_sensitivity(self):
        rng = np.random.default_rng(9)
        clf = RelationClassifier(dim=8, n_relations=2, seed=1)
        clf.bilinear.data *= 30.0
        ents, feats = self._inputs(rng)
        logits = clf(ents, feats, 3).data
        assert not np.allclose(logits[0 * 3 + 1], logits[1 * 3 + 0])

    def test_end_to_end_parameter_gradients(self):
        rng = np.random.default_rng(10)
        n, d, R = 3, 4, 2
        clf = RelationClassifier(dim=d, n_relations=R, n_groups=2, seed=2)
        for p in clf.parameters().values():
            if p.data.ndim >= 2:
                p.data *= 20.0
        ents = Tensor(rng.normal(size=(n, d)))
        feats = Tensor(rng.normal(size=(n * n, d)))
        labels = (rng.random((n * n, R)) < 0.4).astype(float)
        mask = ~np.eye(n, dtype=bool).reshape(-1)

        def loss():
            return atl_loss(clf(ents, feats, n), labels, mask)

        errors = grad_check_params(loss, clf.parameters(), h=1e-5)
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, f"{worst}: {errors[worst]:.2e}"
