"""Corpus ingestion and synthetic-generator tests.

The composition corpus is checked against an independent oracle that
re-derives every label from the emitted sentences alone (template inverse
parsing plus ancestry walking), so generator and checker share no code.
"""

import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densecc.data import (
    CITIZEN_RELATION,
    Document,
    Entity,
    EpochBatcher,
    Fact,
    Mention,
    PERSON_RELATION,
    RelationIndex,
    SynthSpec,
    derive_closure,
    document_to_record,
    mark_seen_facts,
    parse_docred,
    synth_documents,
    synth_generate,
    validate_document,
    write_dataset,
)

FIXTURE = "tests/data/docred_sample.json"


class TestDocredParsing:
    def parse_fixture(self):
        with pytest.warns(UserWarning, match="dropping out-of-range mention"):
            return parse_docred(FIXTURE)

    def test_golden_structure(self):
        docs, rel = self.parse_fixture()
        assert [d.doc_id for d in docs] == ["Skai TV", "Niels Bohr"]
        assert rel.names == ["P159", "P127", "P17", "P19", "P27"]

        d0 = docs[0]
        assert len(d0.tokens) == 34
        assert d0.tokens[:2] == ["Skai", "TV"]
        # sentence 1 starts at offset 16
        assert d0.tokens[21:23] == ["Skai", "Group"]
        assert [(m.start, m.end) for m in d0.entities[0].mentions] == [(0, 2), (16, 17)]
        assert d0.entities[0].etype == "ORG"
        assert d0.entities[0].names == ("Skai TV", "It")

    def test_golden_facts_deduped(self):
        docs, rel = self.parse_fixture()
        d0 = docs[0]
        # the duplicated P127 label collapses to one fact
        assert d0.facts == {
            Fact(0, 2, rel.get("P159")),
            Fact(0, 3, rel.get("P127")),
            Fact(2, 1, rel.get("P17")),
        }
        assert all(d0.depth_of(f) == 0 for f in d0.facts)

    def test_golden_bad_mention_dropped_and_depth(self):
        docs, rel = self.parse_fixture()
        d1 = docs[1]
        # the sent_id=5 mention is invalid; the two good ones survive
        assert [(m.start, m.end) for m in d1.entities[0].mentions] == [(0, 2), (7, 8)]
        composed = Fact(0, 2, rel.get("P27"))
        assert d1.depth_of(composed) == 1
        assert d1.depth_of(Fact(0, 1, rel.get("P19"))) == 0

    def test_shared_relation_index_is_stable(self):
        _, rel = self.parse_fixture()
        before = list(rel.names)
        with pytest.warns(UserWarning):
            parse_docred(FIXTURE, relations=rel)
        assert rel.names == before

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ValueError, match="malformed JSON"):
            parse_docred(p)

    def test_non_array(self, tmp_path):
        p = tmp_path / "obj.json"
        p.write_text('{"title": "x"}')
        with pytest.raises(ValueError, match="expected a JSON array"):
            parse_docred(p)

    def test_entity_losing_all_mentions_is_an_error(self, tmp_path):
        rec = {
            "title": "t",
            "sents": [["a", "b"]],
            "vertexSet": [[{"name": "a", "sent_id": 9, "pos": [0, 1], "type": "PER"}]],
            "labels": [],
        }
        p = tmp_path / "x.json"
        p.write_text(json.dumps([rec]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(ValueError, match="lost all mentions"):
                parse_docred(p)

    def test_entity_cap_skips_with_warning(self, tmp_path):
        tokens = [f"tok{i}" for i in range(50)]
        rec = {
            "title": "big",
            "sents": [tokens],
            "vertexSet": [
                [{"name": tokens[i], "sent_id": 0, "pos": [i, i + 1], "type": "PER"}]
                for i in range(43)
            ],
            "labels": [],
        }
        p = tmp_path / "big.json"
        p.write_text(json.dumps([rec]))
        with pytest.warns(UserWarning, match="exceeds cap"):
            docs, _ = parse_docred(p)
        assert docs == []

    def test_validate_rejects_bad_facts(self):
        ent = Entity(mentions=[Mention(0, 1)])
        doc = Document("d", ["x", "y"], [ent, Entity(mentions=[Mention(1, 2)])])
        doc.facts = {Fact(0, 0, 0)}
        with pytest.raises(ValueError, match="invalid entity indices"):
            validate_document(doc)
        doc.facts = {Fact(0, 5, 0)}
        with pytest.raises(ValueError, match="invalid entity indices"):
            validate_document(doc)


class TestMarkSeen:
    def build(self, names_pairs, rel=0):
        ents = []
        for names in names_pairs:
            ents.append(Entity(mentions=[Mention(0, 1)], names=tuple(names)))
        doc = Document("d", ["x"], ents)
        doc.facts = {Fact(0, 1, rel)}
        return doc

    def test_alias_match(self):
        train = self.build([("Alice",), ("Utopia",)])
        eval_hit = self.build([("Alicia", "Alice"), ("Utopia",)])
        eval_miss = self.build([("Bob",), ("Utopia",)])
        eval_wrong_rel = self.build([("Alice",), ("Utopia",)], rel=1)
        mark_seen_facts([eval_hit, eval_miss, eval_wrong_rel], [train])
        assert eval_hit.seen_in_train == {Fact(0, 1, 0)}
        assert eval_miss.seen_in_train == set()
        assert eval_wrong_rel.seen_in_train == set()


class TestDeriveClosure:
    def test_two_hop_chain(self):
        stated = {(0, "childof", 1), (1, "childof", 2), (2, "citizenof", 3)}
        depth = derive_closure(stated, ((("childof"), ("citizenof"), ("citizenof")),))
        assert depth[(1, "citizenof", 3)] == 1
        assert depth[(0, "citizenof", 3)] == 2
        assert depth[(0, "childof", 1)] == 0
        assert len(depth) == 5

    def test_depth_cap(self):
        stated = {(0, "childof", 1), (1, "childof", 2), (2, "citizenof", 3)}
        depth = derive_closure(stated, (("childof", "citizenof", "citizenof"),), max_depth=1)
        assert (1, "citizenof", 3) in depth
        assert (0, "citizenof", 3) not in depth

    def test_minimum_depth_wins(self):
        # the composed fact is also stated directly: stated depth 0 wins
        stated = {(0, "childof", 1), (1, "citizenof", 2), (0, "citizenof", 2)}
        depth = derive_closure(stated, (("childof", "citizenof", "citizenof"),))
        assert depth[(0, "citizenof", 2)] == 0


def oracle_label_depths(rec):
    """Re-derive every label for a generated record from its sentences.

    Entities are resolved through mention positions (the clusters the task
    provides as input), not surface names: distinct entities may share a name.
    """
    position_to_slot = {}
    for slot, mentions in enumerate(rec["vertexSet"]):
        for m in mentions:
            position_to_slot[(m["sent_id"], m["pos"][0])] = slot
    parent = {}
    stated_citizen = {}
    expect = {}
    for sent_id, toks in enumerate(rec["sents"]):
        a = position_to_slot[(sent_id, 0)]
        b = position_to_slot[(sent_id, len(toks) - 2)]
        if "child" in toks:
            expect[(a, PERSON_RELATION, b)] = 0
            parent[a] = b
        else:
            assert "citizen" in toks or "citizenship" in toks
            expect[(a, CITIZEN_RELATION, b)] = 0
            stated_citizen[a] = b
    for start in list(parent):
        cur, hops = start, 0
        while cur in parent:
            cur = parent[cur]
            hops += 1
            if cur in stated_citizen:
                key = (start, CITIZEN_RELATION, stated_citizen[cur])
                if key not in expect or expect[key] > hops:
                    expect[key] = hops
    return expect


class TestSynthetic:
    def test_deterministic_and_seed_sensitive(self):
        a = synth_generate(SynthSpec(n_docs=40, seed=17))
        b = synth_generate(SynthSpec(n_docs=40, seed=17))
        c = synth_generate(SynthSpec(n_docs=40, seed=18))
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert json.dumps(a, sort_keys=True) != json.dumps(c, sort_keys=True)

    def test_write_is_byte_deterministic(self, tmp_path):
        spec = SynthSpec(n_docs=15, seed=4)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        write_dataset(synth_generate(spec), p1)
        write_dataset(synth_generate(spec), p2)
        assert p1.read_bytes() == p2.read_bytes()

    @pytest.mark.parametrize("target", [0.35, 0.2])
    def test_hop_fraction_within_two_points(self, target):
        recs = synth_generate(SynthSpec(n_docs=500, hop_fraction=target, seed=17))
        total = sum(len(r["labels"]) for r in recs)
        derived = sum(1 for r in recs for lab in r["labels"] if lab["depth"] >= 1)
        assert abs(derived / total - target) <= 0.02

    def test_zero_hop_fraction_means_no_derived_facts(self):
        recs = synth_generate(SynthSpec(n_docs=60, hop_fraction=0.0, seed=2))
        assert all(lab["depth"] == 0 for r in recs for lab in r["labels"])

    def test_labels_match_sentence_oracle(self):
        recs = synth_generate(SynthSpec(n_docs=60, seed=9))
        for rec in recs:
            got = {(lab["h"], lab["r"], lab["t"]): lab["depth"] for lab in rec["labels"]}
            assert got == oracle_label_depths(rec), rec["title"]

    def test_name_decoys_are_common_and_unsupported(self):
        """Shared names set traps that only the entity clusters resolve.

        Two entities sharing a surface name are either (a) citizens of
        different countries — so a name match cannot reveal which country a
        chain leads to — or (b) include a parent with no citizenship at all,
        so reading by name suggests a citizenship for that parent's child
        that the labels must not contain. Aliased mentions never share a
        sentence, and both trap kinds must be frequent.
        """
        recs = synth_generate(SynthSpec(n_docs=200, seed=3))
        cross_country_docs = broken_decoy_docs = 0
        for rec in recs:
            slots_by_name = {}
            for slot, mentions in enumerate(rec["vertexSet"]):
                slots_by_name.setdefault(mentions[0]["name"], []).append(slot)
            aliased = {n: s for n, s in slots_by_name.items() if len(s) > 1}
            labeled = {(lab["h"], lab["r"], lab["t"]) for lab in rec["labels"]}

            def countries_of(slot):
                return {t for h, r, t in labeled if r == CITIZEN_RELATION and h == slot}

            for name, slots in aliased.items():
                sent_sets = [
                    {m["sent_id"] for m in rec["vertexSet"][slot]} for slot in slots
                ]
                for i in range(len(slots)):
                    for j in range(i + 1, len(slots)):
                        assert not (sent_sets[i] & sent_sets[j]), rec["title"]
                cited = [s for s in slots if countries_of(s)]
                uncited = [s for s in slots if s not in cited]
                if len(cited) > 1:
                    # distinct-country sharers: no country repeats
                    seen = set()
                    for s in cited:
                        cs = countries_of(s)
                        assert not (cs & seen), rec["title"]
                        seen |= cs
                    cross_country_docs += 1
                if uncited:
                    broken_decoy_docs += 1
                    for parent in uncited:
                        children = [
                            h for h, r, t in labeled
                            if r == PERSON_RELATION and t == parent
                        ]
                        for child in children:
                            assert not countries_of(child), rec["title"]
        assert cross_country_docs >= 150, cross_country_docs
        assert broken_decoy_docs >= 35, broken_decoy_docs

    def test_depth_zero_labels_cite_their_sentence(self):
        recs = synth_generate(SynthSpec(n_docs=30, seed=11))
        for rec in recs:
            names = [rec["vertexSet"][i][0]["name"] for i in range(len(rec["vertexSet"]))]
            for lab in rec["labels"]:
                if lab["depth"] == 0:
                    (sid,) = lab["evidence"]
                    sent = rec["sents"][sid]
                    assert names[lab["h"]] in sent and names[lab["t"]] in sent
                else:
                    assert lab["evidence"] == []

    def test_broken_chains_are_common(self):
        recs = synth_generate(SynthSpec(n_docs=200, seed=17))
        broken = 0
        for r in recs:
            parents = {lab["t"] for lab in r["labels"] if lab["r"] == PERSON_RELATION}
            holders = {lab["h"] for lab in r["labels"] if lab["r"] == CITIZEN_RELATION}
            if parents - holders:
                broken += 1
        assert broken >= 40

    def test_documents_validate_and_respect_entity_cap(self):
        spec = SynthSpec(n_docs=40, seed=3)
        docs, rel = synth_documents(spec)
        assert rel.names[:2] == [PERSON_RELATION, CITIZEN_RELATION]
        for doc in docs:
            validate_document(doc)
            assert doc.n_entities <= spec.entities_max
            assert doc.n_entities >= 3

    def test_infeasible_targets_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            SynthSpec(hop_fraction=0.45)
        with pytest.raises(ValueError, match="infeasible"):
            SynthSpec(hop_fraction=0.35, max_depth=1)
        with pytest.raises(ValueError, match="strictly below"):
            SynthSpec(hop_fraction=0.4, max_depth=2)
        with pytest.raises(ValueError, match="infeasible"):
            SynthSpec(hop_fraction=0.1, max_depth=0)


class TestRecordRoundTrip:
    def test_parse_of_emitted_record_preserves_documents(self, tmp_path):
        docs, rel = synth_documents(SynthSpec(n_docs=12, seed=21))
        path = tmp_path / "round.json"
        write_dataset([document_to_record(d, rel) for d in docs], path)
        docs2, rel2 = parse_docred(path, relations=RelationIndex(list(rel.names)))
        assert rel2.names == rel.names
        for a, b in zip(docs, docs2):
            assert a.tokens == b.tokens
            assert a.facts == b.facts
            assert a.fact_depth == b.fact_depth
            assert [
                [(m.start, m.end) for m in e.mentions] for e in a.entities
            ] == [[(m.start, m.end) for m in e.mentions] for e in b.entities]


def _dummy_docs(n):
    return [
        Document(f"d{i}", ["x"], [Entity(mentions=[Mention(0, 1)])]) for i in range(n)
    ]


class TestEpochBatcher:
    def test_partition(self):
        docs = _dummy_docs(10)
        batches = EpochBatcher(docs, batch_size=4, seed=0).epoch(0)
        assert [len(b) for b in batches] == [4, 4, 2]
        assert {d.doc_id for b in batches for d in b} == {d.doc_id for d in docs}

    def test_deterministic_per_epoch_but_varies_across(self):
        docs = _dummy_docs(12)
        b = EpochBatcher(docs, batch_size=5, seed=7)
        order0 = [d.doc_id for batch in b.epoch(0) for d in batch]
        assert order0 == [d.doc_id for batch in b.epoch(0) for d in batch]
        order1 = [d.doc_id for batch in b.epoch(1) for d in batch]
        assert order0 != order1

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            EpochBatcher([], batch_size=0)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(0, 23), bs=st.integers(1, 9), seed=st.integers(0, 50), epoch=st.integers(0, 5))
    def test_partition_property(self, n, bs, seed, epoch):
        docs = _dummy_docs(n)
        batches = EpochBatcher(docs, batch_size=bs, seed=seed).epoch(epoch)
        flat = [d.doc_id for b in batches for d in b]
        assert sorted(flat) == sorted(d.doc_id for d in docs)
        assert all(len(b) <= bs for b in batches)
        assert all(len(b) == bs for b in batches[:-1])
