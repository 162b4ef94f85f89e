"""Relation classification head and the training objectives.

Logit layout: column 0 is the learned threshold class, relation r sits at
column r + 1. A relation is predicted for a pair exactly when its logit
strictly exceeds the threshold logit, so the decision boundary is adaptive
per pair rather than a global cutoff.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pairs import pair_indices

TH_INDEX = 0
_NEG_INF = -1e30
_PROB_EPS = 1e-7


class RelationClassifier:
    """Bilinear pair scorer.

    Subject and object views are tanh projections of [entity; pair feature];
    each class applies a (optionally block-diagonal) bilinear form:

        z_s = tanh(W_s [h_es; M'_so] + b_s)
        z_o = tanh(W_o [h_eo; M'_so] + b_o)
        logit_c = sum_g z_s^(g) B_c^(g) z_o^(g) + t_c

    `n_groups` > 1 splits the feature into equal blocks, shrinking the
    bilinear parameter count by that factor.
    """

    def __init__(self, dim: int, n_relations: int, n_groups: int = 1, seed: int = 0):
        if dim % n_groups != 0:
            raise ValueError(f"dim {dim} not divisible into {n_groups} groups")
        if n_relations < 1:
            raise ValueError("need at least one relation class")
        rng = np.random.default_rng([seed, 0xC1A55])
        self.dim = dim
        self.n_relations = n_relations
        self.n_groups = n_groups
        self.group_dim = dim // n_groups
        n_classes = n_relations + 1
        self.ws = Tensor(rng.normal(0.0, 0.02, size=(2 * dim, dim)), requires_grad=True)
        self.bs = Tensor(np.zeros(dim), requires_grad=True)
        self.wo = Tensor(rng.normal(0.0, 0.02, size=(2 * dim, dim)), requires_grad=True)
        self.bo = Tensor(np.zeros(dim), requires_grad=True)
        self.bilinear = Tensor(
            rng.normal(0.0, 0.02, size=(n_classes, n_groups, self.group_dim, self.group_dim)),
            requires_grad=True,
        )
        self.cbias = Tensor(np.zeros(n_classes), requires_grad=True)

    def __call__(self, entity_reps: Tensor, pair_feats: Tensor, n: int) -> Tensor:
        P = n * n
        s_idx, o_idx = pair_indices(n)
        h_s = ad.gather(entity_reps, s_idx)
        h_o = ad.gather(entity_reps, o_idx)
        z_s = ad.tanh(ad.concat([h_s, pair_feats], axis=1) @ self.ws + self.bs)
        z_o = ad.tanh(ad.concat([h_o, pair_feats], axis=1) @ self.wo + self.bo)

        dg = self.group_dim
        logits = None
        for g in range(self.n_groups):
            zs = z_s[:, g * dg : (g + 1) * dg]
            zo = z_o[:, g * dg : (g + 1) * dg]
            mixed = ad.matmul(ad.reshape(zs, (1, P, dg)), self.bilinear[:, g])
            contrib = ad.transpose(ad.tsum(mixed * ad.reshape(zo, (1, P, dg)), axis=-1))
            logits = contrib if logits is None else logits + contrib
        return logits + self.cbias

    def parameters(self) -> dict[str, Tensor]:
        return {
            "ws": self.ws, "bs": self.bs,
            "wo": self.wo, "bo": self.bo,
            "bilinear": self.bilinear, "cbias": self.cbias,
        }


def pair_labels(facts, n: int, n_relations: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binary label matrix (P, R), positive-pair vector, off-diagonal mask."""
    labels = np.zeros((n * n, n_relations))
    for f in facts:
        labels[f.head * n + f.tail, f.rel] = 1.0
    positive = (labels.sum(axis=1) > 0).astype(float)
    offdiag = ~np.eye(n, dtype=bool).reshape(-1)
    return labels, positive, offdiag


def _masked_mean(per_pair: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no pairs")
    return ad.tsum(per_pair * mask.astype(float)) / Tensor(np.array(float(count)))


def atl_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Adaptive-threshold loss, averaged over masked pairs.

    Per pair, positives compete with the threshold class in one softmax and
    the threshold competes with the negatives in another:

        L1 = -sum_{r in pos} log softmax over (pos + TH) at r
        L2 = -log softmax over (neg + TH) at TH
    """
    P, C = logits.shape
    if labels.shape != (P, C - 1):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    pos = labels > 0.5
    pos_th = np.concatenate([np.ones((P, 1), dtype=bool), pos], axis=1)
    neg_th = np.concatenate([np.ones((P, 1), dtype=bool), ~pos], axis=1)

    lse_pos = ad.logsumexp(logits + np.where(pos_th, 0.0, _NEG_INF), axis=-1)
    lse_neg = ad.logsumexp(logits + np.where(neg_th, 0.0, _NEG_INF), axis=-1)
    n_pos = labels.sum(axis=1)
    l1 = lse_pos * n_pos - ad.tsum(logits[:, 1:] * labels, axis=-1)
    l2 = lse_neg - logits[:, TH_INDEX]
    return _masked_mean(l1 + l2, mask)


def atl_predict(logits: np.ndarray) -> np.ndarray:
    """Boolean (P, R): relation logits strictly above the threshold logit."""
    return logits[:, 1:] > logits[:, TH_INDEX : TH_INDEX + 1]


def bias_loss(bias_logits: Tensor, positive: np.ndarray, mask: np.ndarray) -> Tensor:
    """Binary cross-entropy pushing a relatedness logit toward the pair label."""
    p = ad.clip(ad.sigmoid(bias_logits), _PROB_EPS, 1.0 - _PROB_EPS)
    y = positive.astype(float)
    per_pair = -(ad.log(p) * y + ad.log(ad.sub(1.0, p)) * (1.0 - y))
    return _masked_mean(per_pair, mask)


def clustering_loss(
    feats: Tensor,
    positive: np.ndarray,
    mask: np.ndarray,
    mu: float = 1.0,
    lam: float = 0.5,
    alpha: float = 1.0,
    beta: float = 1.0,
    gamma: float = 1.0,
) -> tuple[Tensor, bool]:
    """Pull positive pair features together, push the two class centers apart.

    With centers v1 (positives) and v0 (negatives):

        L_dist = max(0, mu + cos(v0, v1))^2
        L_var1 = sum_pos max(0, lam - cos(v1, f_i))^2
        L_var0 = sum_neg max(0, 2 lam - cos(v0, f_j))^2
        L = alpha L_dist + beta L_var0 + gamma L_var1

    Returns (loss, False) with a zero loss when either side is empty.
    """
    pos_idx = np.flatnonzero(mask & (positive > 0.5))
    neg_idx = np.flatnonzero(mask & (positive <= 0.5))
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        return Tensor(np.array(0.0)), False
    f_pos = ad.gather(feats, pos_idx)
    f_neg = ad.gather(feats, neg_idx)
    v1 = ad.tmean(f_pos, axis=0)
    v0 = ad.tmean(f_neg, axis=0)

    d = feats.shape[1]
    l_dist = ad.square(ad.relu(ad.cosine_similarity(v0, v1) + mu))
    cos1 = ad.cosine_similarity(ad.reshape(v1, (1, d)), f_pos, axis=-1)
    l_var1 = ad.tsum(ad.square(ad.relu(ad.sub(lam, cos1))))
    cos0 = ad.cosine_similarity(ad.reshape(v0, (1, d)), f_neg, axis=-1)
    l_var0 = ad.tsum(ad.square(ad.relu(ad.sub(2.0 * lam, cos0))))
    total = l_dist * alpha + l_var0 * beta + l_var1 * gamma
    return total, True
