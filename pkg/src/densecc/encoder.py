"""Token vocabulary, entity boundary markers, and a small transformer encoder.

Every mention is wrapped in per-slot boundary tokens (`<e3> ... </e3>` for
entity slot 3), and a document token is prepended. The opening marker's final
hidden state serves as the mention embedding; an entity pools its mentions
with logsumexp. Entity-level token attention is the mean of the final layer's
head-averaged attention rows at those marker positions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UNK_TOKEN = "<unk>"
DOC_TOKEN = "<doc>"
_MARKER_RE = re.compile(r"^</?e\d+>$")


def start_marker(entity: int) -> str:
    return f"<e{entity}>"


def end_marker(entity: int) -> str:
    return f"</e{entity}>"


class Vocab:
    """Token to id mapping with reserved specials and entity boundary markers.

    Layout: <unk>, <doc>, then start/end marker pairs for each entity slot,
    then corpus tokens ordered by descending count (ties lexicographic).
    """

    def __init__(self, tokens: list[str], max_entities: int):
        self.tokens = list(tokens)
        self.max_entities = max_entities
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for required in (UNK_TOKEN, DOC_TOKEN):
            if required not in self._index:
                raise ValueError(f"vocabulary missing {required}")

    @classmethod
    def build(cls, docs, max_entities: int = 42) -> "Vocab":
        counts: dict[str, int] = {}
        for doc in docs:
            for tok in doc.tokens:
                counts[tok] = counts.get(tok, 0) + 1
        specials = [UNK_TOKEN, DOC_TOKEN]
        for e in range(max_entities):
            specials.append(start_marker(e))
            specials.append(end_marker(e))
        body = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(specials + body, max_entities)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self._index[UNK_TOKEN]

    @property
    def doc_id(self) -> int:
        return self._index[DOC_TOKEN]

    def marker_ids(self, entity: int) -> tuple[int, int]:
        if not (0 <= entity < self.max_entities):
            raise ValueError(f"entity slot {entity} outside marker range 0..{self.max_entities - 1}")
        return self._index[start_marker(entity)], self._index[end_marker(entity)]

    def encode(self, tokens: list[str]) -> np.ndarray:
        unk = self.unk_id
        return np.array([self._index.get(t, unk) for t in tokens], dtype=np.int64)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens))
            fh.write("\n")

    @classmethod
    def load(cls, path, max_entities: int = 42) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = fh.read().splitlines()
        return cls(tokens, max_entities)


def insert_markers(tokens: list[str], entities) -> tuple[list[str], list[list[int]]]:
    """Wrap each mention in its entity's boundary markers.

    Returns the marked token list and, per entity, the positions of its
    opening markers. At a shared boundary, closing markers are emitted before
    opening ones; among openings, longer mentions open first so nesting stays
    well formed.
    """
    opens: dict[int, list[tuple[int, int]]] = {}
    closes: dict[int, list[tuple[int, int]]] = {}
    for e, entity in enumerate(entities):
        for m in entity.mentions:
            opens.setdefault(m.start, []).append((m.end, e))
            closes.setdefault(m.end, []).append((m.start, e))

    marked: list[str] = []
    positions: list[list[int]] = [[] for _ in entities]
    for p in range(len(tokens) + 1):
        for _, e in sorted(closes.get(p, []), key=lambda se: (-se[0], se[1])):
            marked.append(end_marker(e))
        for end, e in sorted(opens.get(p, []), key=lambda ee: (-ee[0], ee[1])):
            positions[e].append(len(marked))
            marked.append(start_marker(e))
        if p < len(tokens):
            marked.append(tokens[p])
    return marked, positions


def strip_markers(marked: list[str]) -> list[str]:
    return [t for t in marked if not _MARKER_RE.match(t)]


# ---------------------------------------------------------------------------
# Transformer encoder
# ---------------------------------------------------------------------------


def _normal(rng, shape, scale=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = ad.tmean(ad.square(centered), axis=-1, keepdims=True)
        return centered / ad.sqrt(var + Tensor(np.array(self.eps))) * self.gain + self.bias

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class SelfAttention:
    """Multi-head scaled dot-product self-attention over one sequence.

    Keeps the head-averaged attention matrix of the most recent call in
    `last_attention` (still part of the graph, so downstream consumers can
    backpropagate into the encoder through it).
    """

    def __init__(self, dim: int, n_heads: int, rng):
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = _normal(rng, (dim, dim))
        self.wk = _normal(rng, (dim, dim))
        self.wv = _normal(rng, (dim, dim))
        self.wo = _normal(rng, (dim, dim))
        self.last_attention: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        T = x.shape[0]
        heads_first = (1, 0, 2)

        def split(mat):
            return ad.transpose(ad.reshape(mat, (T, self.n_heads, self.head_dim)), heads_first)

        q = split(x @ self.wq)
        k = split(x @ self.wk)
        v = split(x @ self.wv)
        scores = q @ ad.transpose(k, (0, 2, 1)) * Tensor(np.array(self.head_dim**-0.5))
        attn = ad.softmax(scores, axis=-1)
        self.last_attention = ad.tmean(attn, axis=0)
        out = ad.transpose(attn @ v, heads_first)
        return ad.reshape(out, (T, self.dim)) @ self.wo

    def parameters(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


class EncoderLayer:
    """Pre-norm transformer block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, dim: int, n_heads: int, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.w1 = _normal(rng, (dim, 2 * dim))
        self.b1 = Tensor(np.zeros(2 * dim), requires_grad=True)
        self.w2 = _normal(rng, (2 * dim, dim))
        self.b2 = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        h = ad.relu(self.ln2(x) @ self.w1 + self.b1)
        return x + h @ self.w2 + self.b2

    def parameters(self):
        out = {}
        for name, sub in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2)):
            for k, v in sub.parameters().items():
                out[f"{name}.{k}"] = v
        out.update({"ffn.w1": self.w1, "ffn.b1": self.b1, "ffn.w2": self.w2, "ffn.b2": self.b2})
        return out


class Encoder:
    def __init__(self, vocab_size: int, dim: int = 64, n_layers: int = 2, n_heads: int = 4,
                 max_len: int = 512, seed: int = 0):
        rng = np.random.default_rng([seed, 0xE0C])
        self.dim = dim
        self.max_len = max_len
        self.tok_emb = _normal(rng, (vocab_size, dim))
        self.pos_emb = _normal(rng, (max_len, dim))
        self.layers = [EncoderLayer(dim, n_heads, rng) for _ in range(n_layers)]
        self.ln_final = LayerNorm(dim)

    def forward(self, ids: np.ndarray) -> tuple[Tensor, Tensor]:
        """Encode one id sequence; returns (token reps (T, dim), attention (T, T))."""
        T = len(ids)
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.max_len}")
        if T == 0:
            raise ValueError("cannot encode an empty sequence")
        x = ad.gather(self.tok_emb, np.asarray(ids)) + ad.gather(self.pos_emb, np.arange(T))
        for layer in self.layers:
            x = layer(x)
        x = self.ln_final(x)
        attention = self.layers[-1].attn.last_attention if self.layers else _uniform_attention(T)
        return x, attention

    def parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"layer{i}.{k}"] = v
        for k, v in self.ln_final.parameters().items():
            out[f"ln_final.{k}"] = v
        return out


def _uniform_attention(T: int) -> Tensor:
    return Tensor(np.full((T, T), 1.0 / T))


# ---------------------------------------------------------------------------
# Document encoding
# ---------------------------------------------------------------------------


@dataclass
class EncodedDocument:
    token_reps: Tensor          # (T, dim)
    doc_rep: Tensor             # (dim,)
    entity_reps: Tensor         # (N_e, dim), logsumexp-pooled mention embeddings
    entity_attention: Tensor    # (N_e, T), rows sum to 1
    marker_positions: list[list[int]]


def encode_document(doc, vocab: Vocab, encoder: Encoder) -> EncodedDocument:
    """Run the encoder on a marked document and pool per-entity quantities."""
    if doc.n_entities > vocab.max_entities:
        raise ValueError(
            f"document {doc.doc_id}: {doc.n_entities} entities exceeds marker range "
            f"{vocab.max_entities}"
        )
    marked, starts = insert_markers(doc.tokens, doc.entities)
    ids = vocab.encode([DOC_TOKEN] + marked)
    reps, attention = encoder.forward(ids)
    positions = [[p + 1 for p in ent] for ent in starts]

    pooled = []
    attn_rows = []
    for ent in positions:
        idx = np.asarray(ent, dtype=np.int64)
        rows = ad.gather(reps, idx)
        pooled.append(ad.logsumexp(rows, axis=0))
        attn_rows.append(ad.tmean(ad.gather(attention, idx), axis=0))
    return EncodedDocument(
        token_reps=reps,
        doc_rep=reps[0],
        entity_reps=ad.stack(pooled, axis=0),
        entity_attention=ad.stack(attn_rows, axis=0),
        marker_positions=positions,
    )
