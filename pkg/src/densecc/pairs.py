"""Entity-pair matrix construction.

For a document with entities 0..n-1, every ordered pair (s, o) gets a feature
vector built from the subject and object entity representations, the document
representation, and a localized context vector. The localized context weights
each token by the product of the subject's and object's attention over it:

    c_so = sum_i A_si * A_oi * h_i

which is symmetric in (s, o). Pair features live in a flattened (n*n, d)
layout throughout; `as_grid` restores (n, n, d) for inspection.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Subject and object entity ids for the flattened pair axis (row-major)."""
    s = np.repeat(np.arange(n), n)
    o = np.tile(np.arange(n), n)
    return s, o


def as_grid(flat: Tensor, n: int) -> Tensor:
    return ad.reshape(flat, (n, n) + flat.shape[1:])


def pair_context(entity_attention: Tensor, token_reps: Tensor, normalize: bool = False) -> Tensor:
    """Attention-product context for every ordered pair, flattened to (n*n, d).

    With `normalize`, the token weights are rescaled to sum to one per pair
    (guarded for disjoint attention supports); the default keeps the raw
    product so the context magnitude reflects attention overlap.
    """
    n, T = entity_attention.shape
    a_s = ad.reshape(entity_attention, (n, 1, T))
    a_o = ad.reshape(entity_attention, (1, n, T))
    w = a_s * a_o
    if normalize:
        total = ad.tsum(w, axis=-1, keepdims=True)
        w = w / (total + Tensor(np.array(1e-12)))
    ctx = w @ token_reps
    return ad.reshape(ctx, (n * n, token_reps.shape[1]))


class PairMatrixBuilder:
    """Maps an encoded document to the initial entity-pair feature matrix.

    Subject and object sides get separate tanh projections of
    [entity; document; context], and a two-layer ReLU network fuses them:

        u_s = tanh(W_s [h_es; h_doc; c_so] + b_s)
        u_o = tanh(W_o [h_eo; h_doc; c_so] + b_o)
        M_so = W_2 relu(W_1 [u_s; u_o] + b_1) + b_2
    """

    def __init__(self, dim: int, seed: int = 0, normalize_context: bool = False):
        rng = np.random.default_rng([seed, 0x9A12])
        self.dim = dim
        self.normalize_context = normalize_context

        def w(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def b(size):
            return Tensor(np.zeros(size), requires_grad=True)

        self.ws, self.bs = w((3 * dim, dim)), b(dim)
        self.wo, self.bo = w((3 * dim, dim)), b(dim)
        self.w1, self.b1 = w((2 * dim, 2 * dim)), b(2 * dim)
        self.w2, self.b2 = w((2 * dim, dim)), b(dim)

    def __call__(self, encoded) -> Tensor:
        n = encoded.entity_reps.shape[0]
        s_idx, o_idx = pair_indices(n)
        ctx = pair_context(encoded.entity_attention, encoded.token_reps, self.normalize_context)
        h_s = ad.gather(encoded.entity_reps, s_idx)
        h_o = ad.gather(encoded.entity_reps, o_idx)
        h_doc = ad.gather(ad.reshape(encoded.doc_rep, (1, self.dim)), np.zeros(n * n, dtype=np.int64))

        u_s = ad.tanh(ad.concat([h_s, h_doc, ctx], axis=1) @ self.ws + self.bs)
        u_o = ad.tanh(ad.concat([h_o, h_doc, ctx], axis=1) @ self.wo + self.bo)
        fused = ad.relu(ad.concat([u_s, u_o], axis=1) @ self.w1 + self.b1)
        return fused @ self.w2 + self.b2

    def parameters(self) -> dict[str, Tensor]:
        return {
            "ws": self.ws, "bs": self.bs,
            "wo": self.wo, "bo": self.bo,
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": self.b2,
        }
