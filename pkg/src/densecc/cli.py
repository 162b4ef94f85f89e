"""Command-line harness: train, eval, ablate, gradcheck, synth-gen, inspect.

The thread cap below must run before numpy is imported anywhere in the
process, which is why this module (and the package root) import lazily.
"""

from __future__ import annotations

import os as _os

_threads = _os.environ.get("DENSECC_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ[_var] = _threads

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, load_config, save_config
from .data import RelationIndex, SynthSpec, mark_seen_facts, parse_docred, synth_documents, synth_generate, write_dataset
from .encoder import Vocab
from .metrics import depth_f1, ignore_train_f1, overall_f1
from .model import RelationExtractor

_CSV_COLUMNS = [
    "epoch", "loss", "loss_atl", "loss_bias", "loss_cluster",
    "dev_f1", "dev_ign_f1", "dev_f1_depth0", "dev_f1_depth1plus", "dev_f1_depth2",
]

GRADCHECK_THRESHOLD = 1e-4


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------

def _has_depth(docs) -> bool:
    return any(doc.depth_of(f) > 0 for doc in docs for f in doc.facts)


def _dev_metrics(est: RelationExtractor, dev_docs, with_depth: bool) -> dict:
    preds = est.predict(dev_docs)
    out = {
        "dev_f1": overall_f1(dev_docs, preds).f1,
        "dev_ign_f1": ignore_train_f1(dev_docs, preds).f1,
    }
    if with_depth:
        out["dev_f1_depth0"] = depth_f1(dev_docs, preds, lambda d: d == 0).f1
        out["dev_f1_depth1plus"] = depth_f1(dev_docs, preds, lambda d: d >= 1).f1
        out["dev_f1_depth2"] = depth_f1(dev_docs, preds, lambda d: d == 2).f1
    return out


def cmd_train(cfg: RunConfig, quiet: bool = False) -> dict:
    """Train one model; write metrics.jsonl, summary.csv, and checkpoints.

    The on-disk metrics are fully determined by config + seed; wall-clock
    timings go to stdout only so identical runs produce identical files.
    """
    if not cfg.train_data:
        raise ValueError("config must set train_data")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.txt")

    relations = RelationIndex()
    train_docs, _ = parse_docred(cfg.train_data, relations, cfg.max_entities)
    dev_docs = None
    with_depth = False
    if cfg.dev_data:
        dev_docs, _ = parse_docred(cfg.dev_data, relations, cfg.max_entities)
        mark_seen_facts(dev_docs, train_docs)
        with_depth = _has_depth(dev_docs) or _has_depth(train_docs)

    est = RelationExtractor.from_config(cfg)
    metrics_path = out_dir / "metrics.jsonl"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"

    state = {"best_f1": -1.0, "best_epoch": None, "best_record": None, "t_epoch": time.time()}
    records: list[dict] = []
    metrics_fh = open(metrics_path, "w", encoding="utf-8")

    def progress(record: dict) -> None:
        rec = dict(record)
        epoch = rec["epoch"]
        if dev_docs is not None and (epoch + 1) % cfg.eval_every == 0:
            rec.update(_dev_metrics(est, dev_docs, with_depth))
            if rec["dev_f1"] > state["best_f1"]:
                state["best_f1"] = rec["dev_f1"]
                state["best_epoch"] = epoch
                state["best_record"] = rec
                est.save(best_path)
        records.append(rec)
        metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        metrics_fh.flush()
        est.save(last_path)
        if not quiet:
            now = time.time()
            line = f"epoch {epoch:3d}  loss {rec['loss']:.4f}"
            if "dev_f1" in rec:
                line += f"  dev_f1 {rec['dev_f1']:.4f}"
            print(f"{line}  ({now - state['t_epoch']:.1f}s)")
            state["t_epoch"] = now

    t0 = time.time()
    try:
        est.fit(train_docs, relations=relations, progress=progress)
    except FloatingPointError as exc:
        metrics_fh.close()
        (out_dir / "diagnostic.txt").write_text(
            f"training aborted on non-finite loss\n{exc}\n"
            f"last-good checkpoint: {last_path if last_path.exists() else 'none (first epoch)'}\n",
            encoding="utf-8",
        )
        print(f"error: {exc}", file=sys.stderr)
        raise
    metrics_fh.close()

    if dev_docs is None or state["best_epoch"] is None:
        est.save(best_path)
    with open(out_dir / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for rec in records:
            writer.writerow([rec.get(col, "") for col in _CSV_COLUMNS])

    wall = time.time() - t0
    final_record = records[-1] if records else None
    if not quiet:
        if state["best_epoch"] is not None:
            print(f"best dev_f1 {state['best_f1']:.4f} at epoch {state['best_epoch']}")
        print(f"done in {wall:.1f}s; artifacts in {out_dir}")
    return {
        "out_dir": str(out_dir),
        "best_epoch": state["best_epoch"],
        "best_f1": state["best_f1"],
        "best_record": state["best_record"],
        "final_record": final_record,
        "wall_time": wall,
    }


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------

def cmd_eval(checkpoint: str, data: str, train_data: str | None = None,
             quiet: bool = False) -> dict:
    """Score a checkpoint on a dataset: F1, IgnF1 (with train data), depth slices."""
    est = RelationExtractor.load(checkpoint)
    docs, _ = parse_docred(data, est.relations_, est.max_entities)
    preds = est.predict(docs)

    overall = overall_f1(docs, preds)
    result = {
        "docs": len(docs),
        "gold_facts": sum(len(d.facts) for d in docs),
        "predicted_facts": sum(len(p) for p in preds),
        "precision": overall.precision,
        "recall": overall.recall,
        "f1": overall.f1,
    }
    if train_data:
        train_docs, _ = parse_docred(train_data, est.relations_, est.max_entities)
        mark_seen_facts(docs, train_docs)
        result["ign_f1"] = ignore_train_f1(docs, preds).f1
    if _has_depth(docs):
        result["f1_depth0"] = depth_f1(docs, preds, lambda d: d == 0).f1
        result["f1_depth1plus"] = depth_f1(docs, preds, lambda d: d >= 1).f1
        result["f1_depth2"] = depth_f1(docs, preds, lambda d: d == 2).f1

    if not quiet:
        width = max(len(k) for k in result)
        for key, value in result.items():
            shown = f"{value:.4f}" if isinstance(value, float) else str(value)
            print(f"{key:<{width}}  {shown}")
    return result


# ----------------------------------------------------------------------
# ablate
# ----------------------------------------------------------------------

_FLAG_AXES = {
    "dense": "dense",
    "expand": "expanded",
    "cluster": "use_cluster",
    "bias": "use_bias",
}
_LAYER_CHOICES = (0, 2, 3, 4)


def _axis_variants(axis: str) -> list[tuple[str, dict]]:
    if axis in _FLAG_AXES:
        return [("full", {}), (f"no_{axis}", {_FLAG_AXES[axis]: False})]
    if axis == "layers" or axis.startswith("layers:"):
        if axis == "layers":
            values = list(_LAYER_CHOICES)
        else:
            try:
                values = [int(v) for v in axis.split(":", 1)[1].split(",")]
            except ValueError:
                raise ValueError(f"bad layer list in axis {axis!r}")
            if not values or any(v < 0 for v in values):
                raise ValueError(f"bad layer list in axis {axis!r}")
        return [(f"layers{v}", {"n_layers": v}) for v in values]
    valid = ", ".join([*_FLAG_AXES, "layers[:v1,v2,...]"])
    raise ValueError(f"unknown ablation axis {axis!r}; valid axes: {valid}")


def cmd_ablate(cfg: RunConfig, axis: str, quiet: bool = False) -> list[dict]:
    """Train one variant per axis value and tabulate their best dev metrics."""
    if not cfg.dev_data:
        raise ValueError("ablate needs dev_data in the config to compare variants")
    variants = _axis_variants(axis)
    base_out = Path(cfg.out_dir)

    rows = []
    for name, changes in variants:
        vcfg = dataclasses.replace(cfg, out_dir=str(base_out / name), **changes)
        if not quiet:
            print(f"[{name}] training ...")
        summary = cmd_train(vcfg, quiet=True)
        record = summary["best_record"] or {}
        row = {"variant": name, "best_epoch": summary["best_epoch"]}
        for key in ("dev_f1", "dev_ign_f1", "dev_f1_depth0", "dev_f1_depth1plus", "dev_f1_depth2"):
            if key in record:
                row[key] = record[key]
        rows.append(row)

    if not quiet:
        columns = sorted({k for row in rows for k in row} - {"variant"})
        header = ["variant", *columns]
        table = [[str(row["variant"])] + [
            f"{row[c]:.4f}" if isinstance(row.get(c), float) else str(row.get(c, "-"))
            for c in columns
        ] for row in rows]
        widths = [max(len(h), *(len(r[i]) for r in table)) for i, h in enumerate(header)]
        print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
        for r in table:
            print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
    return rows


# ----------------------------------------------------------------------
# gradcheck
# ----------------------------------------------------------------------

def _gradcheck_model(seed: int) -> tuple[RelationExtractor, object]:
    """A tiny full model and a random 3-entity document to probe it with."""
    spec = SynthSpec(n_docs=8, entities_min=3, entities_max=3, max_depth=1,
                     hop_fraction=0.3, seed=seed)
    docs, relations = synth_documents(spec)
    doc = next(d for d in docs if d.n_entities == 3)
    est = RelationExtractor(dim=16, enc_heads=2, enc_layers=1, n_layers=2,
                            n_groups=2, max_len=64, seed=seed)
    est.initialize(Vocab.build([doc], max_entities=est.max_entities), relations)
    # Move off the tiny default init: widened weights and non-zero biases put
    # gradients well above the finite-difference noise floor and spread ReLU
    # pre-activations away from their kinks.
    rng = np.random.default_rng([seed, 0x6C])
    for t in est.named_parameters().values():
        if t.data.ndim >= 2:
            t.data *= 10.0
        else:
            t.data += rng.normal(0.0, 0.05, size=t.data.shape)
    return est, doc


def cmd_gradcheck(corrupt: bool = False, quiet: bool = False) -> tuple[list[dict], float]:
    """Compare analytic gradients with central differences on a tiny model.

    Every parameter of every component is probed at its largest-gradient
    coordinates on a random 3-entity document, for three seeds. `corrupt`
    deliberately mis-scales one activation's backward rule as a negative
    control; the check must then fail.
    """
    restore = None
    if corrupt:
        real_tanh = ad.tanh

        def bad_tanh(a):
            out = real_tanh(a)
            if out._vjp is not None:
                inner = out._vjp
                out._vjp = lambda g: tuple(None if p is None else p * 1.05 for p in inner(g))
            return out

        ad.tanh = bad_tanh
        restore = real_tanh

    rows: list[dict] = []
    worst = 0.0
    try:
        for seed in (0, 1, 2):
            est, doc = _gradcheck_model(seed)
            params = est.named_parameters()
            errors = ad.grad_check_params(lambda: est._forward(doc)[0], params,
                                          h=1e-5, sample=6, select="top")
            by_component: dict[str, float] = {}
            for name, err in errors.items():
                component = name.split(".", 1)[0]
                by_component[component] = max(by_component.get(component, 0.0), err)
            for component in sorted(by_component):
                err = by_component[component]
                rows.append({"seed": seed, "component": component, "max_rel_err": err})
                worst = max(worst, err)
    finally:
        if restore is not None:
            ad.tanh = restore

    if not quiet:
        print(f"{'seed':<6}{'component':<12}{'max_rel_err':>12}")
        for row in rows:
            print(f"{row['seed']:<6}{row['component']:<12}{row['max_rel_err']:>12.2e}")
        verdict = "PASS" if worst < GRADCHECK_THRESHOLD else "FAIL"
        print(f"worst {worst:.2e} vs threshold {GRADCHECK_THRESHOLD:.0e}: {verdict}")
    return rows, worst


# ----------------------------------------------------------------------
# synth-gen
# ----------------------------------------------------------------------

_SPEC_FIELDS = {f.name: f.type for f in dataclasses.fields(SynthSpec)
                if f.name in ("n_docs", "entities_min", "entities_max",
                              "max_depth", "hop_fraction", "seed")}


def _load_synth_spec(path) -> SynthSpec:
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{line_no}: expected key = value, got {line.rstrip()!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in _SPEC_FIELDS:
                raise ValueError(
                    f"{path}:{line_no}: unknown key {key!r}; supported: {', '.join(sorted(_SPEC_FIELDS))}"
                )
            kind = _SPEC_FIELDS[key]
            values[key] = float(raw) if kind in ("float", float) else int(raw)
    return SynthSpec(**values)


def cmd_synth_gen(spec_path: str, out_path: str, quiet: bool = False) -> dict:
    """Generate a synthetic multi-hop corpus from a key = value spec file."""
    spec = _load_synth_spec(spec_path)
    records = synth_generate(spec)
    write_dataset(records, out_path)

    total = 0
    by_depth: dict[int, int] = {}
    entities = 0
    for record in records:
        entities += len(record["vertexSet"])
        for label in record["labels"]:
            depth = int(label.get("depth", 0))
            by_depth[depth] = by_depth.get(depth, 0) + 1
            total += 1
    stats = {
        "docs": len(records),
        "entities_per_doc": entities / len(records) if records else 0.0,
        "facts": total,
        "facts_by_depth": {str(k): by_depth[k] for k in sorted(by_depth)},
        "hop_fraction": (sum(v for k, v in by_depth.items() if k >= 1) / total) if total else 0.0,
        "out": str(out_path),
    }
    if not quiet:
        for key, value in stats.items():
            shown = f"{value:.4f}" if isinstance(value, float) else value
            print(f"{key}: {shown}")
    return stats


# ----------------------------------------------------------------------
# inspect
# ----------------------------------------------------------------------

def _parse_doc_ref(doc_ref: str) -> tuple[str, int]:
    if ":" in doc_ref:
        head, _, tail = doc_ref.rpartition(":")
        if tail.isdigit() and Path(head).exists():
            return head, int(tail)
    return doc_ref, 0


def _parse_pair(pair: str) -> tuple[int, int]:
    parts = pair.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected --pair s,o with two integers, got {pair!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ValueError(f"expected --pair s,o with two integers, got {pair!r}")


def cmd_inspect(checkpoint: str, doc_ref: str, pair: str, out: str | None = None,
                quiet: bool = False) -> list[dict]:
    """Dump per-layer attention of one pair as JSONL plus a text table.

    `doc_ref` is a dataset path, optionally with `:index` selecting a
    document (default: the first).
    """
    s, o = _parse_pair(pair)
    path, index = _parse_doc_ref(doc_ref)
    est = RelationExtractor.load(checkpoint)
    docs, _ = parse_docred(path, est.relations_, est.max_entities)
    if not (0 <= index < len(docs)):
        raise ValueError(f"document index {index} out of range for {len(docs)} documents")
    doc = docs[index]
    n = doc.n_entities
    if not (0 <= s < n and 0 <= o < n):
        raise ValueError(f"pair ({s},{o}) out of range for {n} entities")

    logits, facts, traces = est.inspect(doc)

    def ename(e: int) -> str:
        return doc.entities[e].names[0] if doc.entities[e].names else f"e{e}"

    records = []
    for layer, trace in enumerate(traces):
        weighted = trace.pair_attention(s, o)
        record = {
            "layer": layer,
            "s": s,
            "o": o,
            "positions": [[i, j] for (i, j), _ in weighted],
            "weights": [w for _, w in weighted],
        }
        if trace.bias.size:
            record["bias"] = float(trace.bias[s * n + o])
        records.append(record)

    lines = [json.dumps(record, sort_keys=True) for record in records]
    if out is not None:
        Path(out).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    if not quiet:
        if out is None:
            for line in lines:
                print(line)
        predicted = sorted((f.rel for f in facts if f.head == s and f.tail == o))
        shown = ", ".join(est.relations_.name(r) for r in predicted) or "(none)"
        print(f"\npair ({s},{o}) = ({ename(s)} -> {ename(o)}); predicted: {shown}")
        if not traces:
            print("model has no refinement layers; nothing to trace")
        for record in records:
            pairs = sorted(zip(record["positions"], record["weights"]),
                           key=lambda pw: -pw[1])
            print(f"layer {record['layer']} (weights sum {sum(record['weights']):.6f}):")
            for (i, j), w in pairs:
                print(f"  ({i},{j}) {ename(i)} -> {ename(j)}  {w:.4f}")
    return records


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densecc",
        description="Document-level relation extraction over an entity-pair matrix",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config value (repeatable)")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", help="training set for the ignore-train F1 variant")

    p = sub.add_parser("ablate", help="train and compare variants along one axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True,
                   help="dense | expand | cluster | bias | layers[:v1,v2,...]")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the config output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config value (repeatable)")

    p = sub.add_parser("gradcheck", help="finite-difference check of all components")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("synth-gen", help="generate a synthetic multi-hop corpus")
    p.add_argument("--spec", required=True, help="flat key = value generator spec")
    p.add_argument("--out", required=True, help="output JSON dataset path")

    p = sub.add_parser("inspect", help="dump one pair's per-layer attention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--doc", required=True, help="dataset path, optionally path:index")
    p.add_argument("--pair", required=True, help="subject,object entity indices, e.g. 0,2")
    p.add_argument("--out", help="write the JSONL dump here instead of stdout")
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config, overrides=args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg.validate()


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(_config_from_args(args))
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.data, args.train_data)
        elif args.command == "ablate":
            cmd_ablate(_config_from_args(args), args.axis)
        elif args.command == "gradcheck":
            _, worst = cmd_gradcheck(corrupt=args.corrupt)
            return 0 if worst < GRADCHECK_THRESHOLD else 1
        elif args.command == "synth-gen":
            cmd_synth_gen(args.spec, args.out)
        elif args.command == "inspect":
            cmd_inspect(args.checkpoint, args.doc, args.pair, out=args.out)
    except FloatingPointError:
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
