"""Micro-averaged precision/recall/F1 over extracted facts.

All variants share one routine: facts listed in a per-document exclude set
are removed from both the predictions and the gold before counting. That
covers the ignore-train score (exclude facts whose surface triple occurs in
training) and depth-stratified scores (exclude gold facts at other depths;
predictions matching nothing stay false positives in every slice).
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    n_pred: int = 0
    n_gold: int = 0
    n_correct: int = 0


def micro_prf(pred_sets, gold_sets, exclude_sets=None) -> PRF:
    if len(pred_sets) != len(gold_sets):
        raise ValueError("prediction and gold lists differ in length")
    if exclude_sets is None:
        exclude_sets = [set()] * len(pred_sets)
    n_pred = n_gold = n_correct = 0
    for pred, gold, excl in zip(pred_sets, gold_sets, exclude_sets):
        kept_pred = set(pred) - set(excl)
        kept_gold = set(gold) - set(excl)
        n_pred += len(kept_pred)
        n_gold += len(kept_gold)
        n_correct += len(kept_pred & kept_gold)
    precision = n_correct / n_pred if n_pred else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF(precision, recall, f1, n_pred, n_gold, n_correct)


def overall_f1(docs, pred_sets) -> PRF:
    return micro_prf(pred_sets, [d.facts for d in docs])


def ignore_train_f1(docs, pred_sets) -> PRF:
    """Score with train-seen gold facts removed from both sides.

    Callers must have run `mark_seen_facts` over the documents first.
    """
    return micro_prf(pred_sets, [d.facts for d in docs], [d.seen_in_train for d in docs])


def depth_f1(docs, pred_sets, keep) -> PRF:
    """Score restricted to gold facts whose depth satisfies `keep`."""
    exclude = [{f for f in d.facts if not keep(d.depth_of(f))} for d in docs]
    return micro_prf(pred_sets, [d.facts for d in docs], exclude)
