"""Criss-cross attention over the entity-pair matrix, densely connected.

Each pair (s, o) attends to a receptive field inside the n x n pair grid:
its own row s and column o (the criss-cross), and in expanded mode also
column s and row o, which pull in the pairs needed for two-hop reasoning
(everything relating to the subject or from the object). Positions are
enumerated in a fixed order (row s left to right, column o top to bottom,
then column s, then row o) with duplicates dropped, giving 2n-1 positions
per pair, or 4n-4 when expanded (2n-1 on the diagonal, where the extra
lines coincide with the original ones).

A stack of such layers is wired densely: layer l consumes a transition of
the concatenation of the original matrix with every earlier layer's output,
and a final transition fuses all of them. The recurrent wiring (each layer
feeding the next, last output taken as-is) is kept as an alternative.

Attention logits carry an additive per-position bias from a small head over
the attended pair's features; the head is trained elsewhere to predict
whether that pair holds a relation, steering attention toward related pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_NEG_INF = -1e30


def cca_positions(n: int, s: int, o: int, expanded: bool = False) -> list[tuple[int, int]]:
    """Ordered receptive field of pair (s, o) in an n x n grid."""
    seen: set[tuple[int, int]] = set()
    out: list[tuple[int, int]] = []

    def extend(points):
        for p in points:
            if p not in seen:
                seen.add(p)
                out.append(p)

    extend((s, j) for j in range(n))
    extend((i, o) for i in range(n))
    if expanded:
        extend((i, s) for i in range(n))
        extend((o, j) for j in range(n))
    return out


_TABLE_CACHE: dict[tuple[int, bool], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def position_tables(n: int, expanded: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded flat-index table (P, K), validity mask (P, K), additive offsets.

    Row p of the table lists pair p's receptive field as flattened indices
    (i * n + j), padded with zeros; the offsets hold -1e30 on padding so a
    shifted softmax zeroes those slots exactly.
    """
    key = (n, expanded)
    if key not in _TABLE_CACHE:
        fields = [cca_positions(n, s, o, expanded) for s in range(n) for o in range(n)]
        K = max(len(f) for f in fields)
        idx = np.zeros((n * n, K), dtype=np.int64)
        valid = np.zeros((n * n, K), dtype=bool)
        for p, field in enumerate(fields):
            for k, (i, j) in enumerate(field):
                idx[p, k] = i * n + j
                valid[p, k] = True
        offsets = np.where(valid, 0.0, _NEG_INF)
        _TABLE_CACHE[key] = (idx, valid, offsets)
    return _TABLE_CACHE[key]


_GRID_CACHE: dict[tuple[int, bool], np.ndarray] = {}


def field_offsets(n: int, expanded: bool) -> np.ndarray:
    """(P, P) additive mask over flattened pairs: 0.0 where the column pair
    lies in the row pair's receptive field, -1e30 elsewhere.

    Lets a layer attend over the whole grid in one matrix product; the
    shifted softmax underflows masked slots to exact zeros, so the result
    matches attending over the enumerated field only.
    """
    key = (n, expanded)
    if key not in _GRID_CACHE:
        s = np.repeat(np.arange(n), n)  # subject index of each flattened pair
        o = np.tile(np.arange(n), n)    # object index of each flattened pair
        infield = (s[None, :] == s[:, None]) | (o[None, :] == o[:, None])
        if expanded:
            infield |= (o[None, :] == s[:, None]) | (s[None, :] == o[:, None])
        _GRID_CACHE[key] = np.where(infield, 0.0, _NEG_INF)
    return _GRID_CACHE[key]


@dataclass
class AttentionTrace:
    """Per-layer attention record for inspection (plain arrays, detached)."""

    n: int
    expanded: bool
    weights: np.ndarray   # (P, K), zero on padding
    bias: np.ndarray      # (P,) bias logits, empty when the bias head is off

    def pair_attention(self, s: int, o: int) -> list[tuple[tuple[int, int], float]]:
        positions = cca_positions(self.n, s, o, self.expanded)
        row = self.weights[s * self.n + o]
        return [(pos, float(row[k])) for k, pos in enumerate(positions)]


class BiasHead:
    """Two-layer scorer mapping a pair feature to a relatedness logit."""

    def __init__(self, dim: int, rng):
        self.w1 = Tensor(rng.normal(0.0, 0.02, size=(dim, dim)), requires_grad=True)
        self.b1 = Tensor(np.zeros(dim), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 0.02, size=(dim, 1)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(x @ self.w1 + self.b1)
        return ad.reshape(h @ self.w2 + self.b2, (x.shape[0],))

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class CCALayer:
    """One criss-cross attention layer over flattened pair features (P, d)."""

    def __init__(self, dim: int, rng, expanded: bool = False, use_bias: bool = True):
        self.dim = dim
        self.expanded = expanded
        self.use_bias = use_bias

        def w():
            return Tensor(rng.normal(0.0, 0.02, size=(dim, dim)), requires_grad=True)

        self.wq, self.wk, self.wv = w(), w(), w()
        self.wres = w()
        self.bres = Tensor(np.zeros(dim), requires_grad=True)
        self.bias_head = BiasHead(dim, rng) if use_bias else None

    def __call__(self, x: Tensor, n: int) -> tuple[Tensor, Tensor | None, AttentionTrace]:
        P = n * n
        if x.shape[0] != P:
            raise ValueError(f"expected {P} pair rows for n={n}, got {x.shape[0]}")

        q = x @ self.wq
        k = x @ self.wk
        v = x @ self.wv
        scores = (q @ ad.transpose(k)) * Tensor(np.array(self.dim**-0.5))
        bias = None
        if self.use_bias:
            bias = self.bias_head(x)
            scores = scores + ad.reshape(bias, (1, P))
        attn = ad.softmax(scores + Tensor(field_offsets(n, self.expanded)), axis=-1)
        out = attn @ v + x @ self.wres + self.bres

        idx, valid, _ = position_tables(n, self.expanded)
        trace = AttentionTrace(
            n=n,
            expanded=self.expanded,
            weights=attn.data[np.arange(P)[:, None], idx] * valid,
            bias=bias.data.copy() if bias is not None else np.empty(0),
        )
        return out, bias, trace

    def parameters(self):
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wres": self.wres, "bres": self.bres}
        if self.bias_head is not None:
            for name, p in self.bias_head.parameters().items():
                out[f"bias_head.{name}"] = p
        return out


class Transition:
    """Affine map between feature widths, with a pointwise activation."""

    def __init__(self, in_dim: int, out_dim: int, rng, activation: str = "tanh"):
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown transition activation {activation!r}")
        self.w = Tensor(rng.normal(0.0, 0.02, size=(in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w + self.b
        return ad.tanh(y) if self.activation == "tanh" else y

    def parameters(self):
        return {"w": self.w, "b": self.b}


class DenseCCNet:
    """Stack of criss-cross layers over the pair matrix.

    `dense=True` gives each layer a transition over [M, out_1, .., out_{l-1}]
    and fuses everything at the end; `dense=False` chains the layers and
    returns the last output. Zero layers leaves the matrix untouched.
    """

    def __init__(self, dim: int, n_layers: int = 3, expanded: bool = True, use_bias: bool = True,
                 dense: bool = True, transition_activation: str = "tanh", seed: int = 0):
        rng = np.random.default_rng([seed, 0xCCA])
        self.dim = dim
        self.n_layers = n_layers
        self.dense = dense
        self.layers = [CCALayer(dim, rng, expanded=expanded, use_bias=use_bias) for _ in range(n_layers)]
        self.transitions: list[Transition] = []
        self.final: Transition | None = None
        if dense and n_layers > 0:
            self.transitions = [
                Transition((l + 1) * dim, dim, rng, transition_activation) for l in range(n_layers)
            ]
            self.final = Transition((n_layers + 1) * dim, dim, rng, transition_activation)

    def __call__(self, m: Tensor, n: int) -> tuple[Tensor, list[Tensor], list[AttentionTrace]]:
        if self.n_layers == 0:
            return m, [], []
        biases: list[Tensor] = []
        traces: list[AttentionTrace] = []
        if self.dense:
            feats = [m]
            for layer, transition in zip(self.layers, self.transitions):
                x = transition(feats[0] if len(feats) == 1 else ad.concat(feats, axis=1))
                out, bias, trace = layer(x, n)
                feats.append(out)
                if bias is not None:
                    biases.append(bias)
                traces.append(trace)
            return self.final(ad.concat(feats, axis=1)), biases, traces
        x = m
        for layer in self.layers:
            x, bias, trace = layer(x, n)
            if bias is not None:
                biases.append(bias)
            traces.append(trace)
        return x, biases, traces

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                out[f"cca{i}.{name}"] = p
        for i, transition in enumerate(self.transitions):
            for name, p in transition.parameters().items():
                out[f"transition{i}.{name}"] = p
        if self.final is not None:
            for name, p in self.final.parameters().items():
                out[f"final.{name}"] = p
        return out
