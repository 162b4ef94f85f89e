"""Document-level relation extraction estimator.

Pipeline per document: encode the marker-augmented token sequence, pool
entity and localized-context representations into an entity-pair matrix,
refine the matrix with densely connected criss-cross attention, then score
every ordered pair against all relation classes plus a learned threshold.

Training optimizes the sum of the adaptive-threshold classification loss,
the attention-bias supervision (averaged over layers), and the clustering
regularizer over refined pair features.
"""

from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor
from .ccnet import DenseCCNet
from .checkpoint import load_params, restore_into, save_params
from .config import RunConfig
from .data import Document, Fact, RelationIndex
from .encoder import Encoder, Vocab, encode_document
from .losses import (
    RelationClassifier,
    atl_loss,
    atl_predict,
    bias_loss,
    clustering_loss,
    pair_labels,
)
from .metrics import overall_f1
from .optim import AdamW
from .pairs import PairMatrixBuilder


class RelationExtractor(BaseEstimator):
    """Relation extraction over documents with labeled entity mentions.

    `fit(docs)` consumes `densecc.data.Document` objects whose `facts` carry
    the supervision, so the usual `y` argument stays unused. `predict(docs)`
    returns one set of `Fact` triples per document.
    """

    def __init__(self, dim: int = 64, enc_layers: int = 2, enc_heads: int = 4,
                 max_len: int = 512, n_layers: int = 3, expanded: bool = True,
                 use_bias: bool = True, use_cluster: bool = True, dense: bool = True,
                 transition_activation: str = "tanh", normalize_context: bool = False,
                 n_groups: int = 1, mu: float = 1.0, lam: float = 0.5, alpha: float = 1.0,
                 beta: float = 1.0, gamma: float = 1.0, batch_size: int = 8,
                 epochs: int = 100, lr_encoder: float = 3e-4, lr_other: float = 1e-3,
                 warmup_frac: float = 0.06, weight_decay: float = 0.0, seed: int = 17,
                 eval_every: int = 5, max_entities: int = 42):
        self.dim = dim
        self.enc_layers = enc_layers
        self.enc_heads = enc_heads
        self.max_len = max_len
        self.n_layers = n_layers
        self.expanded = expanded
        self.use_bias = use_bias
        self.use_cluster = use_cluster
        self.dense = dense
        self.transition_activation = transition_activation
        self.normalize_context = normalize_context
        self.n_groups = n_groups
        self.mu = mu
        self.lam = lam
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_encoder = lr_encoder
        self.lr_other = lr_other
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.seed = seed
        self.eval_every = eval_every
        self.max_entities = max_entities

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "RelationExtractor":
        fields = {k: v for k, v in cfg.to_dict().items()
                  if k not in ("train_data", "dev_data", "out_dir")}
        return cls(**fields)

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def initialize(self, vocab: Vocab, relations: RelationIndex) -> "RelationExtractor":
        """Build all modules for a known vocabulary and relation inventory."""
        if len(relations) < 1:
            raise ValueError("relation inventory is empty")
        self.vocab_ = vocab
        self.relations_ = relations
        self.n_relations_ = len(relations)
        self.encoder_ = Encoder(len(vocab), dim=self.dim, n_layers=self.enc_layers,
                                n_heads=self.enc_heads, max_len=self.max_len, seed=self.seed)
        self.builder_ = PairMatrixBuilder(self.dim, seed=self.seed,
                                          normalize_context=self.normalize_context)
        self.ccnet_ = DenseCCNet(self.dim, n_layers=self.n_layers, expanded=self.expanded,
                                 use_bias=self.use_bias, dense=self.dense,
                                 transition_activation=self.transition_activation,
                                 seed=self.seed)
        self.classifier_ = RelationClassifier(self.dim, self.n_relations_,
                                              n_groups=self.n_groups, seed=self.seed)
        self.history_ = []
        return self

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        groups = (("encoder", self.encoder_), ("pairs", self.builder_),
                  ("ccnet", self.ccnet_), ("classifier", self.classifier_))
        for prefix, module in groups:
            for name, p in module.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def _optimizer(self, total_steps: int) -> AdamW:
        named = self.named_parameters()
        enc = {k: v for k, v in named.items() if k.startswith("encoder.")}
        rest = {k: v for k, v in named.items() if not k.startswith("encoder.")}
        return AdamW([(enc, self.lr_encoder), (rest, self.lr_other)],
                     total_steps=total_steps, warmup_frac=self.warmup_frac,
                     weight_decay=self.weight_decay)

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _forward(self, doc: Document):
        """Loss tensor, logits, traces, and per-term loss values for one document."""
        n = doc.n_entities
        encoded = encode_document(doc, self.vocab_, self.encoder_)
        matrix = self.builder_(encoded)
        refined, layer_biases, traces = self.ccnet_(matrix, n)
        logits = self.classifier_(encoded.entity_reps, refined, n)

        labels, positive, offdiag = pair_labels(doc.facts, n, self.n_relations_)
        parts = {"atl": 0.0, "bias": 0.0, "cluster": 0.0}
        if not offdiag.any():
            # A single-entity document has no candidate pairs: nothing to
            # train on, but the forward pass still yields logits and traces.
            return Tensor(np.zeros(())), logits, traces, parts
        loss = atl_loss(logits, labels, offdiag)
        parts["atl"] = loss.item()
        if layer_biases:
            per_layer = [bias_loss(b, positive, offdiag) for b in layer_biases]
            total_bias = per_layer[0]
            for extra in per_layer[1:]:
                total_bias = total_bias + extra
            mean_bias = total_bias / float(len(per_layer))
            parts["bias"] = mean_bias.item()
            loss = loss + mean_bias
        if self.use_cluster:
            cluster, used = clustering_loss(refined, positive, offdiag, mu=self.mu,
                                            lam=self.lam, alpha=self.alpha,
                                            beta=self.beta, gamma=self.gamma)
            if used:
                parts["cluster"] = cluster.item()
                loss = loss + cluster
        return loss, logits, traces, parts

    # ------------------------------------------------------------------
    # estimator API
    # ------------------------------------------------------------------

    def fit(self, X, y=None, relations=None, dev_docs=None, progress=None) -> "RelationExtractor":
        """Train on a list of documents.

        `relations` is the relation inventory the documents were parsed
        against; without it, placeholder names are synthesized for the ids
        present. `dev_docs` triggers a dev-set F1 evaluation every
        `eval_every` epochs; `progress`, if given, receives one dict per
        epoch.
        """
        docs = self._check_docs(X)
        vocab = Vocab.build(docs, max_entities=self.max_entities)
        if relations is None:
            max_rel = max((f.rel for doc in docs for f in doc.facts), default=-1)
            relations = RelationIndex([f"rel{i}" for i in range(max_rel + 1)])
        self.initialize(vocab, relations)

        batches_per_epoch = (len(docs) + self.batch_size - 1) // self.batch_size
        optimizer = self._optimizer(total_steps=self.epochs * batches_per_epoch)
        order_rng = np.random.default_rng([self.seed, 0xB47C])

        for epoch in range(self.epochs):
            perm = order_rng.permutation(len(docs))
            epoch_loss = 0.0
            epoch_parts = {"atl": 0.0, "bias": 0.0, "cluster": 0.0}
            for start in range(0, len(docs), self.batch_size):
                batch = [docs[i] for i in perm[start:start + self.batch_size]]
                optimizer.zero_grad()
                batch_loss = None
                for doc in batch:
                    try:
                        loss, _, _, parts = self._forward(doc)
                    except FloatingPointError as exc:
                        raise FloatingPointError(
                            f"non-finite value in epoch {epoch}, document {doc.doc_id}: {exc}"
                        ) from exc
                    batch_loss = loss if batch_loss is None else batch_loss + loss
                    for key, value in parts.items():
                        epoch_parts[key] += value
                batch_loss = batch_loss / float(len(batch))
                ad.backward(batch_loss)
                optimizer.step()
                epoch_loss += batch_loss.item() * len(batch)
            record = {"epoch": epoch, "loss": epoch_loss / len(docs)}
            for key, value in epoch_parts.items():
                record[f"loss_{key}"] = value / len(docs)
            if dev_docs is not None and (epoch + 1) % self.eval_every == 0:
                record["dev_f1"] = self.score(dev_docs)
            self.history_.append(record)
            if progress is not None:
                progress(record)
        return self

    def _check_docs(self, X) -> list[Document]:
        docs = list(X)
        if not docs:
            raise ValueError("no documents given")
        for doc in docs:
            if not isinstance(doc, Document):
                raise TypeError(f"expected Document, got {type(doc).__name__}")
            if doc.n_entities > self.max_entities:
                raise ValueError(
                    f"document {doc.doc_id} has {doc.n_entities} entities, cap is {self.max_entities}"
                )
        return docs

    def predict(self, X) -> list[set[Fact]]:
        out = []
        with ad.no_grad():
            for doc in self._check_docs(X):
                _, logits, _, _ = self._forward(doc)
                out.append(self._facts_from_logits(logits.data, doc.n_entities))
        return out

    def _facts_from_logits(self, logits: np.ndarray, n: int) -> set[Fact]:
        hits = atl_predict(logits)
        facts = set()
        for p, r in zip(*np.nonzero(hits)):
            s, o = divmod(int(p), n)
            if s != o:
                facts.add(Fact(s, o, int(r)))
        return facts

    def inspect(self, doc: Document):
        """Forward one document, returning (logits, predicted facts, traces)."""
        with ad.no_grad():
            _, logits, traces, _ = self._forward(doc)
        return logits.data, self._facts_from_logits(logits.data, doc.n_entities), traces

    def score(self, X, y=None) -> float:
        docs = self._check_docs(X)
        return overall_f1(docs, self.predict(docs)).f1

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "config": json.dumps(self.get_params(), sort_keys=True),
            "vocab": "\n".join(self.vocab_.tokens),
            "relations": "\n".join(self.relations_.names),
        }
        save_params(path, self.named_parameters(), meta=meta)

    @classmethod
    def load(cls, path) -> "RelationExtractor":
        arrays, meta = load_params(path)
        est = cls(**json.loads(meta["config"]))
        vocab = Vocab(meta["vocab"].split("\n"), est.max_entities)
        relations = RelationIndex(meta["relations"].split("\n"))
        est.initialize(vocab, relations)
        restore_into(est.named_parameters(), arrays)
        return est
