"""Document model, DocRED-format ingestion, and the synthetic composition corpus.

DocRED files are JSON arrays of records with `title`, `sents` (token lists per
sentence), `vertexSet` (one mention list per entity) and `labels` (h/t/r
triples). Sentences are flattened to a single token sequence; mentions become
flat [start, end) spans. The synthetic generator emits records in the same
schema (with an extra per-label `depth` field) so both corpora share one
parser.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Fact:
    head: int
    tail: int
    rel: int


@dataclass
class Mention:
    start: int
    end: int


@dataclass
class Entity:
    mentions: list[Mention]
    etype: str | None = None
    names: tuple[str, ...] = ()


@dataclass
class Document:
    doc_id: str
    tokens: list[str]
    entities: list[Entity]
    facts: set[Fact] = field(default_factory=set)
    fact_depth: dict[Fact, int] = field(default_factory=dict)
    seen_in_train: set[Fact] = field(default_factory=set)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def depth_of(self, fact: Fact) -> int:
        return self.fact_depth.get(fact, 0)


def validate_document(doc: Document) -> None:
    length = len(doc.tokens)
    for ei, entity in enumerate(doc.entities):
        if not entity.mentions:
            raise ValueError(f"document {doc.doc_id}: entity {ei} has no mentions")
        for m in entity.mentions:
            if not (0 <= m.start < m.end <= length):
                raise ValueError(
                    f"document {doc.doc_id}: mention span [{m.start},{m.end}) outside [0,{length})"
                )
    n = doc.n_entities
    for fact in doc.facts:
        if not (0 <= fact.head < n and 0 <= fact.tail < n) or fact.head == fact.tail:
            raise ValueError(f"document {doc.doc_id}: fact {fact} has invalid entity indices")


# ---------------------------------------------------------------------------
# DocRED parsing
# ---------------------------------------------------------------------------


class RelationIndex:
    """Stable mapping from relation name strings to contiguous ids."""

    def __init__(self, names: list[str] | None = None):
        self.names: list[str] = list(names or [])
        self._index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def add(self, name: str) -> int:
        if name not in self._index:
            self._index[name] = len(self.names)
            self.names.append(name)
        return self._index[name]

    def get(self, name: str) -> int:
        return self._index[name]

    def name(self, rel: int) -> str:
        return self.names[rel]


def parse_docred(
    path,
    relations: RelationIndex | None = None,
    max_entities: int = 42,
) -> tuple[list[Document], RelationIndex]:
    """Load a DocRED-format JSON file into documents.

    New relation names extend `relations` in order of first appearance, so
    parsing train before dev with a shared index keeps ids consistent.
    Documents with more than `max_entities` entities are skipped with a
    warning; mentions with out-of-range positions are dropped (error only if
    an entity loses every mention).
    """
    relations = relations if relations is not None else RelationIndex()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(records, list):
        raise ValueError(f"{path}: expected a JSON array of documents")

    docs: list[Document] = []
    for rec_idx, rec in enumerate(records):
        try:
            doc = _parse_record(rec, relations)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: record {rec_idx}: {exc}") from exc
        if doc.n_entities > max_entities:
            warnings.warn(
                f"{path}: record {rec_idx} ({doc.doc_id}): {doc.n_entities} entities "
                f"exceeds cap {max_entities}, skipping"
            )
            continue
        docs.append(doc)
    return docs, relations


def _parse_record(rec: dict, relations: RelationIndex) -> Document:
    title = str(rec["title"])
    sents = rec["sents"]
    offsets = []
    tokens: list[str] = []
    for sent in sents:
        offsets.append(len(tokens))
        tokens.extend(str(tok) for tok in sent)

    entities: list[Entity] = []
    for ei, mention_list in enumerate(rec["vertexSet"]):
        mentions: list[Mention] = []
        names: list[str] = []
        etype = None
        for m in mention_list:
            sent_id = int(m["sent_id"])
            start, end = int(m["pos"][0]), int(m["pos"][1])
            if not (0 <= sent_id < len(sents)) or not (0 <= start < end <= len(sents[sent_id])):
                warnings.warn(f"{title}: entity {ei}: dropping out-of-range mention {m.get('name')}")
                continue
            mentions.append(Mention(offsets[sent_id] + start, offsets[sent_id] + end))
            if m.get("name") and m["name"] not in names:
                names.append(str(m["name"]))
            etype = etype or m.get("type")
        if not mentions:
            raise ValueError(f"entity {ei} lost all mentions")
        entities.append(Entity(mentions=mentions, etype=etype, names=tuple(names)))

    facts: set[Fact] = set()
    depths: dict[Fact, int] = {}
    for label in rec.get("labels", []):
        rel = relations.add(str(label["r"]))
        fact = Fact(int(label["h"]), int(label["t"]), rel)
        if fact in facts:
            continue
        facts.add(fact)
        depths[fact] = int(label.get("depth", 0))

    doc = Document(doc_id=title, tokens=tokens, entities=entities, facts=facts, fact_depth=depths)
    validate_document(doc)
    return doc


def document_to_record(doc: Document, relations: RelationIndex) -> dict:
    """Inverse of parsing, up to sentence boundaries (emits one big sentence)."""
    vertex_set = []
    for entity in doc.entities:
        vertex_set.append(
            [
                {
                    "name": entity.names[0] if entity.names else " ".join(doc.tokens[m.start : m.end]),
                    "sent_id": 0,
                    "pos": [m.start, m.end],
                    "type": entity.etype or "MISC",
                }
                for m in entity.mentions
            ]
        )
    labels = [
        {"h": f.head, "t": f.tail, "r": relations.name(f.rel), "evidence": [], "depth": doc.depth_of(f)}
        for f in sorted(doc.facts, key=lambda f: (f.head, f.tail, f.rel))
    ]
    return {"title": doc.doc_id, "sents": [list(doc.tokens)], "vertexSet": vertex_set, "labels": labels}


def mark_seen_facts(eval_docs: list[Document], train_docs: list[Document]) -> None:
    """Flag eval facts whose (head name, tail name, relation) also occur in training.

    Used by the ignore-train F1 variant: any combination of mention surface
    names counts as a match.
    """
    seen: set[tuple[str, str, int]] = set()
    for doc in train_docs:
        for fact in doc.facts:
            for hname in doc.entities[fact.head].names:
                for tname in doc.entities[fact.tail].names:
                    seen.add((hname, tname, fact.rel))
    for doc in eval_docs:
        doc.seen_in_train = {
            fact
            for fact in doc.facts
            if any(
                (hname, tname, fact.rel) in seen
                for hname in doc.entities[fact.head].names
                for tname in doc.entities[fact.tail].names
            )
        }


# ---------------------------------------------------------------------------
# Synthetic composition corpus
# ---------------------------------------------------------------------------

# Relation vocabulary for the generated corpus. One rule composes a stated
# child-of edge with a (stated or derived) citizenship edge, so citizenship
# propagates up ancestry chains and the minimum derivation depth grows with
# chain length.
PERSON_RELATION = "childof"
CITIZEN_RELATION = "citizenof"
DEFAULT_RULES = ((PERSON_RELATION, CITIZEN_RELATION, CITIZEN_RELATION),)

TEMPLATES: dict[str, tuple[str, ...]] = {
    PERSON_RELATION: (
        "{a} is the child of {b} .",
        "{a} was raised as the child of {b} .",
    ),
    CITIZEN_RELATION: (
        "{a} is a citizen of {b} .",
        "{a} holds citizenship of {b} .",
    ),
}


@dataclass
class SynthSpec:
    """Recipe for a deterministic multi-hop composition corpus.

    `hop_fraction` is the requested share of derived (depth >= 1) facts among
    all labeled facts, corpus-wide. Ancestry chains of three persons top out
    at 2 derived per 5 total facts, so feasible targets are below 0.4 (below
    1/3 when max_depth is 1, exactly 0 when composition is disabled).
    """

    n_docs: int = 500
    entities_min: int = 6
    entities_max: int = 10
    relations: tuple[str, ...] = (PERSON_RELATION, CITIZEN_RELATION)
    rules: tuple[tuple[str, str, str], ...] = DEFAULT_RULES
    max_depth: int = 2
    hop_fraction: float = 0.35
    seed: int = 17

    def __post_init__(self):
        if self.entities_min < 3 or self.entities_max < self.entities_min:
            raise ValueError("entity range must allow at least one chain (min >= 3)")
        if self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        for ra, rb, rc in self.rules:
            for r in (ra, rb, rc):
                if r not in self.relations:
                    raise ValueError(f"rule relation {r!r} not in relation inventory")
        bound = 0.4 if self.max_depth >= 2 else (1.0 / 3.0 if self.max_depth == 1 else 0.0)
        if not (0.0 <= self.hop_fraction <= bound):
            raise ValueError(
                f"hop_fraction {self.hop_fraction} infeasible for max_depth {self.max_depth} "
                f"(must lie in [0, {bound:.3f}])"
            )
        if self.hop_fraction == bound and bound > 0.0:
            raise ValueError("hop_fraction must be strictly below the structural maximum")


def _name_pool(prefix: str, count: int, seed: int) -> list[str]:
    """Pronounceable single-token names; pool is fixed given (prefix, count, seed)."""
    rng = np.random.default_rng(seed)
    consonants = list("bdfgklmnprstvz")
    vowels = list("aeiou")
    names: list[str] = []
    used = set()
    while len(names) < count:
        syllables = rng.integers(2, 4)
        word = prefix + "".join(
            consonants[rng.integers(len(consonants))] + vowels[rng.integers(len(vowels))]
            for _ in range(syllables)
        )
        if word not in used:
            used.add(word)
            names.append(word)
    return names


PERSON_NAMES = _name_pool("", 400, seed=20240201)
COUNTRY_NAMES = _name_pool("x", 60, seed=20240202)


def derive_closure(
    stated: set[tuple[int, str, int]],
    rules: tuple[tuple[str, str, str], ...],
    max_depth: int | None = None,
) -> dict[tuple[int, str, int], int]:
    """Fixpoint of the composition rules with minimum derivation depth per fact.

    Depth 0 marks stated facts; composing facts at depths p and q costs
    p + q + 1 steps.
    """
    depth: dict[tuple[int, str, int], int] = {f: 0 for f in stated}
    changed = True
    while changed:
        changed = False
        items = list(depth.items())
        by_head: dict[tuple[int, str], list[tuple[int, int]]] = {}
        for (h, r, t), d in items:
            by_head.setdefault((h, r), []).append((t, d))
        for (h, ra_name, t), d1 in items:
            for ra, rb, rc in rules:
                if ra_name != ra:
                    continue
                for t2, d2 in by_head.get((t, rb), []):
                    new_depth = d1 + d2 + 1
                    if max_depth is not None and new_depth > max_depth:
                        continue
                    key = (h, rc, t2)
                    if key not in depth or depth[key] > new_depth:
                        depth[key] = new_depth
                        changed = True
    return depth


# Structure inventory. Each entry: (persons consumed, derived facts, total
# facts in the closure). chain3 yields depth-1 and depth-2 citizenships,
# chain2 a single depth-1, broken states ancestry but withholds the parent's
# citizenship (hard negative), single is a lone stated citizenship.
_STRUCTURES = {
    "chain3": (3, 2, 5),
    "chain2": (2, 1, 3),
    "broken": (2, 0, 1),
    "single": (1, 0, 1),
}


def synth_generate(spec: SynthSpec) -> list[dict]:
    """Generate DocRED-schema records for the composition benchmark.

    Each sentence states exactly one base fact. Composed facts appear only in
    the labels, tagged with their derivation depth. Broken chains (a child
    edge whose parent has no citizenship) supply hard negatives that defeat
    co-occurrence shortcuts.

    Structure selection is deficit-steered: a running corpus-level balance
    `derived - hop_fraction * total` is tracked, and each structure is drawn
    uniformly from the choices keeping that balance near zero. The realized
    derived-fact share therefore converges to `hop_fraction` at rate O(1/n)
    while the per-document mix stays randomized.
    """
    rng = np.random.default_rng(spec.seed)
    state = {"balance": 0.0}
    records = []
    for doc_i in range(spec.n_docs):
        records.append(_generate_record(spec, rng, doc_i, state))
    return records


def _pick_structure(spec, rng, state, n_free: int) -> str:
    allowed_depth = {"chain3": 2, "chain2": 1, "broken": 0, "single": 0}
    feasible = sorted(
        name
        for name, (need, d, _) in _STRUCTURES.items()
        if need <= n_free
        and allowed_depth[name] <= spec.max_depth
        and (spec.hop_fraction > 0.0 or d == 0)
    )
    if abs(state["balance"]) <= 0.5:
        candidates = feasible
    else:
        devs = {}
        for name in feasible:
            _, d, t = _STRUCTURES[name]
            devs[name] = abs(state["balance"] + d - spec.hop_fraction * t)
        best = min(devs.values())
        candidates = [name for name in feasible if devs[name] <= best + 1e-9]
    choice = candidates[int(rng.integers(len(candidates)))]
    _, d, t = _STRUCTURES[choice]
    state["balance"] += d - spec.hop_fraction * t
    return choice


def _generate_record(spec: SynthSpec, rng: np.random.Generator, doc_i: int, state: dict) -> dict:
    n_target = int(rng.integers(spec.entities_min, spec.entities_max + 1))
    # Two countries whenever the budget allows: citizenships then split
    # across them, so "person + country co-occur" does not predict the
    # relation and every chain's country must actually be derived.
    n_countries = 2 if n_target >= 6 else 1
    n_persons = n_target - n_countries

    person_names = list(rng.choice(PERSON_NAMES, size=n_persons, replace=False))
    country_names = list(rng.choice(COUNTRY_NAMES, size=n_countries, replace=False))

    # Local ids: persons first, then countries; shuffled into entity slots below.
    persons = list(range(n_persons))
    countries = [n_persons + i for i in range(n_countries)]

    stated: list[tuple[int, str, int]] = []
    free = list(persons)

    def pop_persons(k):
        picked = free[:k]
        del free[:k]
        return picked

    # Per structure: member persons, the member whose citizenship is stated
    # in a sentence with its country (None, None for broken chains), and the
    # broken chain's parent. Citing structures cycle through the countries,
    # so with two countries the citizenships split between them.
    structures: list[tuple[list[int], int | None, int | None, int | None]] = []
    n_citing = 0
    while free:
        structure = _pick_structure(spec, rng, state, len(free))
        country = countries[n_citing % len(countries)]
        if structure in ("chain3", "chain2"):
            chain = pop_persons(3 if structure == "chain3" else 2)
            for a, b in zip(chain, chain[1:]):
                stated.append((a, PERSON_RELATION, b))
            stated.append((chain[-1], CITIZEN_RELATION, country))
            structures.append((chain, chain[-1], country, None))
            n_citing += 1
        elif structure == "broken":
            a, b = pop_persons(2)
            stated.append((a, PERSON_RELATION, b))
            structures.append(([a, b], None, None, b))
        else:
            (a,) = pop_persons(1)
            stated.append((a, CITIZEN_RELATION, country))
            structures.append(([a], a, country, None))
            n_citing += 1

    # Name ambiguity, the core difficulty of the corpus. Two tricks make
    # surface-name matching useless while leaving the entity graph (given as
    # mention clusters) unambiguous:
    #   1. The citizenship-stating persons of two structures citing
    #      *different* countries share one name. Reading by name cannot tell
    #      which country a chain leads to; following the chain through the
    #      clusters can.
    #   2. Each broken chain's parent borrows the name of a
    #      citizenship-stating person, implying a citizenship for its child
    #      that the labels do not contain.
    # Aliased entities always belong to disjoint structures and never share
    # a sentence, keeping token positions well-defined.
    citing = [(c, country) for _, c, country, _ in structures if c is not None]
    cross = [
        (i, j)
        for i in range(len(citing))
        for j in range(len(citing))
        if i != j and citing[i][1] != citing[j][1]
    ]
    if cross:
        i, j = cross[int(rng.integers(len(cross)))]
        person_names[citing[i][0]] = person_names[citing[j][0]]
    for members, _, _, parent in structures:
        if parent is None:
            continue
        donors = [c for m, c, _, _ in structures if c is not None and parent not in m]
        if donors:
            person_names[parent] = person_names[int(rng.choice(donors))]

    closure = derive_closure(set(stated), spec.rules, max_depth=spec.max_depth)

    # Countries are emitted only when cited; an all-broken document keeps
    # every citizenship implicit and needs no country entity at all.
    cited = {t for _, r, t in stated if r == CITIZEN_RELATION}
    locals_used = persons + [c for c in countries if c in cited]
    n_entities = len(locals_used)

    # Shuffle the entity slot order so slot index carries no role signal.
    perm = rng.permutation(n_entities)
    slot_of = {locals_used[int(old)]: int(slot) for slot, old in enumerate(perm)}
    names = [""] * n_entities
    types = [""] * n_entities
    for p in persons:
        names[slot_of[p]] = str(person_names[p])
        types[slot_of[p]] = "PER"
    for ci, c in enumerate(countries):
        if c in cited:
            names[slot_of[c]] = str(country_names[ci])
            types[slot_of[c]] = "LOC"

    # One sentence per stated fact, in shuffled order.
    order = list(rng.permutation(len(stated)))
    sents: list[list[str]] = []
    stated_sentence: dict[tuple[int, str, int], int] = {}
    mention_positions: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n_entities)}
    for sent_id, k in enumerate(order):
        h, r, t = stated[k]
        template = TEMPLATES[r][int(rng.integers(len(TEMPLATES[r])))]
        tokens = template.format(a=names[slot_of[h]], b=names[slot_of[t]]).split()
        a_pos = tokens.index(names[slot_of[h]])
        b_pos = tokens.index(names[slot_of[t]])
        mention_positions[slot_of[h]].append((sent_id, a_pos))
        mention_positions[slot_of[t]].append((sent_id, b_pos))
        stated_sentence[(h, r, t)] = sent_id
        sents.append(tokens)

    vertex_set = []
    for slot in range(n_entities):
        vertex_set.append(
            [
                {"name": names[slot], "sent_id": sid, "pos": [pos, pos + 1], "type": types[slot]}
                for sid, pos in sorted(mention_positions[slot])
            ]
        )

    labels = []
    for (h, r, t), depth in sorted(closure.items(), key=lambda kv: (slot_of[kv[0][0]], slot_of[kv[0][2]], kv[0][1])):
        evidence = [stated_sentence[(h, r, t)]] if depth == 0 else []
        labels.append(
            {"h": slot_of[h], "t": slot_of[t], "r": r, "evidence": evidence, "depth": depth}
        )

    return {"title": f"synth-{doc_i:05d}", "sents": sents, "vertexSet": vertex_set, "labels": labels}


def write_dataset(records: list[dict], path) -> None:
    """Serialize records byte-deterministically."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, sort_keys=True, separators=(",", ":"))


def synth_documents(spec: SynthSpec, relations: RelationIndex | None = None) -> tuple[list[Document], RelationIndex]:
    """Generate and parse in-memory, sharing the file-based parser's code path."""
    relations = relations if relations is not None else RelationIndex(list(spec.relations))
    docs = []
    for rec in synth_generate(spec):
        docs.append(_parse_record(rec, relations))
    return docs, relations


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


class EpochBatcher:
    """Seeded per-epoch shuffling into fixed-size document batches."""

    def __init__(self, docs: list[Document], batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.docs = list(docs)
        self.batch_size = batch_size
        self.seed = seed

    def epoch(self, index: int) -> list[list[Document]]:
        rng = np.random.default_rng([self.seed, index])
        order = rng.permutation(len(self.docs))
        shuffled = [self.docs[i] for i in order]
        return [shuffled[i : i + self.batch_size] for i in range(0, len(shuffled), self.batch_size)]
