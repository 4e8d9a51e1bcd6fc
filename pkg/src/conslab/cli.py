"""Command-line front end: validate, probe, train, compare, analyze, synth.

Exit codes: 0 success, 1 internal/metric failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

from . import analysis, probing, report, trainer
from .bridge_client import BridgeScorer
from .errors import ConslabError, InputError
from .metrics import aggregate
from .resource import (
    FilterResult,
    KBTuple,
    Relation,
    build_candidates,
    compute_stats,
    generate_synth_kb,
    load_resource,
    load_tuples,
    read_vocabulary,
    single_token_filter,
    split_relations,
    write_resource,
    write_tuples,
    write_vocabulary,
)
from .scorer import (
    Scorer,
    ToyMLM,
    ToyScorer,
    build_vocabulary,
    load_checkpoint,
    majority_scorer,
    save_checkpoint,
    tokenize_check,
)

BRIDGE_ENV_VAR = "CONSLAB_BRIDGE"


def _make_scorer(
    spec: str, relations: Sequence[Relation], tuples: Sequence[KBTuple]
) -> Scorer:
    if spec == "majority":
        return majority_scorer(relations, tuples)
    if spec.startswith("toy:"):
        return ToyScorer(load_checkpoint(spec[len("toy:"):]))
    if spec.startswith("bridge:"):
        endpoint = os.environ.get(BRIDGE_ENV_VAR) or spec[len("bridge:"):]
        if not endpoint:
            raise InputError(
                f"no bridge endpoint given (use bridge:<endpoint> or ${BRIDGE_ENV_VAR})"
            )
        return BridgeScorer(endpoint)
    raise InputError(
        f"unknown scorer spec {spec!r}; expected majority, toy:<ckpt>, or bridge:<endpoint>"
    )


def _load_and_filter(
    resource_dir: str, tuples_path: str, scorer: Scorer
) -> tuple[list[Relation], dict[str, list[KBTuple]], FilterResult]:
    """Load the resource, filter tuples to single-token objects, build candidates."""
    relations = load_resource(resource_dir)
    loaded = load_tuples(tuples_path, relations)
    objects = sorted({t.object for t in loaded.tuples})
    verdicts = dict(zip(objects, tokenize_check(scorer, objects)))
    filtered = single_token_filter(loaded.tuples, [verdicts])
    by_relation = {}
    for t in filtered.kept:
        by_relation.setdefault(t.relation_id, []).append(t)
    usable = []
    for r in relations:
        rel_tuples = by_relation.get(r.relation_id)
        if rel_tuples:
            usable.append(build_candidates(r, rel_tuples))
    if not usable:
        raise InputError(
            "no relation has tuples left after single-token filtering; "
            "the scorer vocabulary does not cover this resource"
        )
    return usable, by_relation, filtered


def _echo(line: str) -> None:
    print(line)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    relations = load_resource(args.resource)
    stats = compute_stats(relations)
    _echo(f"relations:        {stats.n_relations}")
    _echo(f"patterns:         {stats.n_patterns}")
    _echo(f"min patterns/rel: {stats.min_patterns}")
    _echo(f"max patterns/rel: {stats.max_patterns}")
    _echo(f"avg patterns/rel: {stats.avg_patterns:.2f}")
    _echo(f"avg syn groups:   {stats.avg_syn_groups:.2f}")
    _echo(f"avg lex groups:   {stats.avg_lex_groups:.2f}")
    if args.out:
        payload = {
            "command": "validate",
            "config": {"resource": str(args.resource)},
            "resource_fingerprint": report.fingerprint_resource(relations),
            "statistics": stats.as_dict(),
            report.TIMESTAMP_FIELD: report.timestamp(),
        }
        report.write_json(payload, args.out)
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    bootstrap_relations = load_resource(args.resource)
    bootstrap_tuples = load_tuples(args.tuples, bootstrap_relations).tuples
    scorer = _make_scorer(args.scorer, bootstrap_relations, bootstrap_tuples)
    try:
        relations, by_relation, filtered = _load_and_filter(
            args.resource, args.tuples, scorer
        )
        if args.scorer == "majority":
            # Rebuild on the filtered tuples so modal objects match candidates.
            kept = [t for ts in by_relation.values() for t in ts]
            scorer = majority_scorer(relations, kept)
        if args.dry_run:
            count = probing.query_count(relations, by_relation)
            _echo(f"queries: {count}")
            _echo(f"tuples kept: {filtered.retained} removed: {filtered.removed}")
            return 0
        result = probing.probe_suite(scorer, relations, by_relation)
        aggregates = aggregate(result.reports, mode="both")
        config = {
            "resource": str(args.resource),
            "tuples": str(args.tuples),
            "scorer": args.scorer,
            "aggregate": args.aggregate,
            "single_token_removed": filtered.removed,
        }
        payload = report.make_report(
            command="probe",
            config=config,
            model_id=scorer.model_id,
            seed=args.seed,
            resource_fingerprint=report.fingerprint_resource(
                relations, [t for ts in by_relation.values() for t in ts]
            ),
            relation_reports=result.reports,
            aggregates=aggregates,
        )
        if args.out:
            report.write_json(payload, args.out)
        if args.predictions_out:
            report.write_json(
                report.predictions_dump(scorer.model_id, result.tables),
                args.predictions_out,
            )
        _print_aggregates(aggregates, args.aggregate)
        return 0
    finally:
        if hasattr(scorer, "close"):
            scorer.close()


def _print_aggregates(aggregates: Mapping, mode: str) -> None:
    blocks = ("macro", "micro") if mode == "both" else (mode,)
    for block in blocks:
        stats = aggregates[block]
        for metric in sorted(stats):
            value = stats[metric]
            if value is None:
                continue
            if isinstance(value, dict):
                _echo(
                    f"{block} {metric}: {100 * value['mean']:.1f} "
                    f"+- {100 * value['std']:.1f} (n={value['n']})"
                )
            else:
                _echo(f"{block} {metric}: {100 * value:.1f}")


def _parse_id_list(raw: str | None) -> list[str]:
    if not raw:
        return []
    return [part.strip() for part in raw.split(",") if part.strip()]


def cmd_train(args: argparse.Namespace) -> int:
    relations = load_resource(args.resource)
    loaded = load_tuples(args.tuples, relations)
    if args.vocab:
        vocab = read_vocabulary(args.vocab)
    else:
        vocab = build_vocabulary(relations, loaded.tuples)
    model = ToyMLM.init(
        vocab, dim=args.dim, hidden_dim=args.hidden_dim, max_len=args.max_len,
        seed=args.seed,
    )
    scorer = ToyScorer(model)
    relations, by_relation, _ = _load_and_filter(args.resource, args.tuples, scorer)
    tuples = [t for ts in by_relation.values() for t in ts]
    split = split_relations(
        relations, _parse_id_list(args.train_relations), _parse_id_list(args.val_relations)
    )
    if not split.train:
        raise InputError("--train-relations selected no relations")

    grid = [float(x) for x in _parse_id_list(args.lambda_grid)]
    if not grid:
        raise InputError("--lambda-grid is empty")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def make_config(lam: float) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            lam=lam,
            epochs=args.epochs,
            tuples_per_batch=args.batch_tuples,
            learning_rate=args.learning_rate,
            seed=args.seed,
            restrict_to_candidates=not args.no_typed,
            use_consistency_loss=not args.no_consistency_loss,
            use_mlm_loss=not args.no_mlm,
        )

    results: dict[float, trainer.TrainResult] = {}
    best_val: dict[float, float] = {}
    for lam in grid:
        result = trainer.train(model, split.train, split.val, tuples, make_config(lam))
        results[lam] = result
        val_scores = [
            rec.val_consistent_acc for rec in result.log if rec.val_consistent_acc is not None
        ]
        best_val[lam] = max(val_scores) if val_scores else 0.0
        log_path = out_dir / f"train_log_lambda{lam}.jsonl"
        with log_path.open("w", encoding="utf-8") as fh:
            for rec in result.log:
                fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
        _echo(f"lambda={lam}: best val consistent_acc {best_val[lam]:.4f}")

    chosen = trainer.select_lambda(grid, best_val)
    trained = results[chosen]
    save_checkpoint(trained.model, out_dir / "checkpoint.toymlm")

    # Before/after comparison on the held-out test relations.
    eval_relations = list(split.test) if split.test else list(relations)
    before = probing.probe_suite(ToyScorer(model), eval_relations, by_relation)
    after = probing.probe_suite(ToyScorer(trained.model), eval_relations, by_relation)
    comparison = {
        "command": "train",
        "config": {
            "resource": str(args.resource),
            "tuples": str(args.tuples),
            "train_relations": sorted(r.relation_id for r in split.train),
            "val_relations": sorted(r.relation_id for r in split.val),
            "test_relations": sorted(r.relation_id for r in split.test),
            "lambda_grid": grid,
            "selected_lambda": chosen,
            "epochs": args.epochs,
            "batch_tuples": args.batch_tuples,
            "learning_rate": args.learning_rate,
            "ablations": {
                "use_consistency_loss": not args.no_consistency_loss,
                "restrict_to_candidates": not args.no_typed,
                "use_mlm_loss": not args.no_mlm,
            },
        },
        "model_id": "toy-mlm",
        "seed": args.seed,
        "resource_fingerprint": report.fingerprint_resource(relations, tuples),
        report.TIMESTAMP_FIELD: report.timestamp(),
        "best_epoch": trained.best_epoch,
        "validation": {str(lam): best_val[lam] for lam in grid},
        "before": aggregate(before.reports, mode="both"),
        "after": aggregate(after.reports, mode="both"),
    }
    report.write_json(comparison, out_dir / "comparison.json")
    _echo(f"selected lambda: {chosen} (best epoch {trained.best_epoch})")
    for phase, probe_result in (("before", before), ("after", after)):
        macro = aggregate(probe_result.reports, mode="macro")["macro"]
        cons = macro["consistency"]
        acc = macro["accuracy"]
        _echo(
            f"{phase}: consistency {100 * cons['mean']:.1f} "
            f"accuracy {100 * acc['mean']:.1f}"
            if cons and acc
            else f"{phase}: consistency family undefined"
        )
    return 0


def _correctness_by_key(dump: Mapping) -> dict[tuple[str, str, str], bool]:
    out: dict[tuple[str, str, str], bool] = {}
    for rid, rows in dump["relations"].items():
        for row in rows:
            key = (rid, row["subject"], row["gold"])
            if key in out:
                raise InputError(f"duplicate tuple key in predictions: {key}")
            out[key] = all(p == row["gold"] for p in row["predictions"])
    return out


def cmd_compare(args: argparse.Namespace) -> int:
    report_a = report.read_json(args.report_a)
    report_b = report.read_json(args.report_b)
    preds_a = report.read_json(args.predictions_a)
    preds_b = report.read_json(args.predictions_b)
    correct_a = _correctness_by_key(preds_a)
    correct_b = _correctness_by_key(preds_b)
    if set(correct_a) != set(correct_b):
        only_a = len(set(correct_a) - set(correct_b))
        only_b = len(set(correct_b) - set(correct_a))
        raise InputError(
            f"prediction dumps cover different tuples "
            f"({only_a} only in A, {only_b} only in B)"
        )
    b = sum(1 for key in correct_a if correct_a[key] and not correct_b[key])
    c = sum(1 for key in correct_a if not correct_a[key] and correct_b[key])
    result = analysis.mcnemar(b, c)
    payload = {
        "command": "compare",
        "model_a": report_a.get("model_id"),
        "model_b": report_b.get("model_id"),
        "paired_tuples": len(correct_a),
        "b": b,
        "c": c,
        "statistic": result.statistic,
        "p_value": result.p_value,
        "method": result.method.value,
        report.TIMESTAMP_FIELD: report.timestamp(),
    }
    _echo(f"b={b} c={c} statistic={result.statistic:.4f} p={result.p_value:.6g} "
          f"({result.method.value})")
    if args.out:
        report.write_json(payload, args.out)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    bootstrap_relations = load_resource(args.resource)
    bootstrap_tuples = load_tuples(args.tuples, bootstrap_relations).tuples
    scorer = _make_scorer(args.scorer, bootstrap_relations, bootstrap_tuples)
    try:
        relations, by_relation, _ = _load_and_filter(args.resource, args.tuples, scorer)
        match = [r for r in relations if r.relation_id == args.relation]
        if not match:
            raise InputError(f"relation {args.relation!r} not found or has no tuples")
        relation = match[0]
        study = analysis.representation_study(
            scorer, relation, by_relation[relation.relation_id], seed=args.seed
        )
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        analysis.write_embeddings_tsv(study.embeddings, out_dir / "embeddings.tsv")
        payload = {
            "command": "analyze",
            "config": {
                "resource": str(args.resource),
                "tuples": str(args.tuples),
                "scorer": args.scorer,
                "relation": args.relation,
            },
            "model_id": scorer.model_id,
            "seed": args.seed,
            "resource_fingerprint": report.fingerprint_resource(
                relations, [t for ts in by_relation.values() for t in ts]
            ),
            report.TIMESTAMP_FIELD: report.timestamp(),
            "pattern_vmeasure": study.pattern_vmeasure,
            "subject_vmeasure": study.subject_vmeasure,
            "cross_vmeasures": study.cross_vmeasures,
            "n_embeddings": int(study.embeddings.vectors.shape[0]),
        }
        report.write_json(payload, out_dir / "vmeasure.json")
        _echo(f"pattern V-measure: {study.pattern_vmeasure:.4f}")
        _echo(f"subject V-measure: {study.subject_vmeasure:.4f}")
        return 0
    finally:
        if hasattr(scorer, "close"):
            scorer.close()


def cmd_synth(args: argparse.Namespace) -> int:
    kb = generate_synth_kb(
        seed=args.seed,
        n_relations=args.relations,
        n_entities=args.entities,
        n_patterns_per_relation=args.patterns,
    )
    out_dir = Path(args.out)
    write_resource(kb.relations, out_dir / "relations")
    write_tuples(kb.tuples, out_dir / "tuples.jsonl")
    write_vocabulary(kb.vocabulary, out_dir / "vocab.txt")
    _echo(
        f"wrote {len(kb.relations)} relations, {len(kb.tuples)} tuples, "
        f"{len(kb.vocabulary)} vocabulary tokens to {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conslab",
        description="Paraphrase-consistency probing and training harness for masked LMs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a resource and print its statistics")
    p.add_argument("--resource", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("probe", help="score a resource and compute the metric suite")
    p.add_argument("--resource", required=True)
    p.add_argument("--tuples", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregate", choices=("macro", "micro", "both"), default="both")
    p.add_argument("--out")
    p.add_argument("--predictions-out")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("train", help="consistency-regularized training of the toy MLM")
    p.add_argument("--resource", required=True)
    p.add_argument("--tuples", required=True)
    p.add_argument("--vocab")
    p.add_argument("--train-relations", required=True)
    p.add_argument("--val-relations", default="")
    p.add_argument("--lambda-grid", default="0.1,0.5,1")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-tuples", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--no-consistency-loss", action="store_true")
    p.add_argument("--no-typed", action="store_true")
    p.add_argument("--no-mlm", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="McNemar significance test between two probe runs")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--predictions-a", required=True)
    p.add_argument("--predictions-b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", help="cluster mask-position representations for one relation")
    p.add_argument("--resource", required=True)
    p.add_argument("--tuples", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="generate the synthetic desk-scale KB")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--relations", type=int, default=5)
    p.add_argument("--entities", type=int, default=50)
    p.add_argument("--patterns", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConslabError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
