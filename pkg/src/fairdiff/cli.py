"""Command line entry points: prepare, sweep, evaluate, report, radar."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import dataset as ds
from . import harness


def _cmd_prepare(args):
    if args.dataset == "ml1m":
        src = Path(args.input)
        data = ds.ingest_ml1m(src / "ratings.dat", src / "users.dat")
        data = ds.filter_min_interactions(data, args.min_interactions)
    elif args.dataset == "canonical":
        src = Path(args.input)
        data = ds.ingest_canonical(src / "interactions.tsv", src / "users.tsv")
        data = ds.filter_min_interactions(data, args.min_interactions)
    elif args.dataset == "synthetic":
        spec = json.loads(Path(args.input).read_text(encoding="utf-8"))
        cfg = ds.SyntheticConfig(
            n_users=spec["n_users"],
            n_items=spec["n_items"],
            density=spec["density"],
            popularity_exponent=spec.get("popularity_exponent", 1.0),
            group_bias=spec.get("group_bias", 0.0),
            female_fraction=spec.get("female_fraction", 0.3),
            seed=spec.get("seed", harness.default_seed()),
        )
        data = ds.generate_synthetic(cfg)
    else:
        raise SystemExit(f"unknown dataset kind {args.dataset}")
    split = ds.temporal_split(data)
    harness.save_split(split, args.out)
    print(
        f"prepared {args.dataset}: {split.n_users} users, {split.n_items} items, "
        f"{len(split.train)}/{len(split.validation)}/{len(split.test)} "
        f"train/validation/test rows -> {args.out}"
    )


def _cmd_sweep(args):
    spec = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = harness.ExperimentConfig(
        dataset=spec["dataset"],
        model=spec["model"],
        grid=spec.get("grid"),
        k=spec.get("k", 20),
        seed=spec.get("seed"),
        out_dir=spec.get("out_dir"),
        extra=spec.get("extra", {}),
    )
    record = harness.grid_search(cfg)
    print(
        f"{record.model} on {record.dataset}: chose {record.chosen} "
        f"(validation Recall@{record.k} {record.validation_recall:.2f}) "
        f"in {record.seconds:.1f}s"
    )
    if record.report is not None:
        vals = ", ".join(
            f"{name}={harness._fmt2(v)}"
            for name, v in zip(harness.TABLE_COLUMNS, record.report.values())
        )
        print(f"test: {vals}")


def _cmd_evaluate(args):
    model = harness.load_checkpoint(args.checkpoint)
    split = harness.load_split(args.split)
    lists = harness.recommend_topk(model, split, args.phase, args.k)
    harness.verify_masking(lists, split, args.phase)
    report = harness.evaluate_run_for(lists, split, args.k, args.phase)
    out = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(out + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(out)


def _cmd_report(args):
    records = harness.load_records(args.records)
    if args.format == "csv":
        text = harness.emit_table(records)
    else:
        text = harness.emit_markdown_table(records)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)


def _cmd_radar(args):
    records = harness.load_records(args.records)
    datasets = sorted({r.dataset for r in records})
    if args.dataset:
        records = [r for r in records if r.dataset == args.dataset]
    elif len(datasets) > 1:
        raise SystemExit(
            f"records span datasets {datasets}; pick one with --dataset"
        )
    triples = harness.radar_triples(records)
    svg = harness.emit_radar_svg(harness.normalize_for_radar(triples))
    Path(args.out).write_text(svg, encoding="utf-8")
    print(f"wrote {args.out} ({len(triples)} models)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdiff")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest a dataset and write a split directory")
    p.add_argument("--dataset", choices=("ml1m", "canonical", "synthetic"), required=True)
    p.add_argument("--in", dest="input", required=True, help="input directory or synthetic config JSON")
    p.add_argument("--out", required=True, help="output split directory")
    p.add_argument("--min-interactions", type=int, default=20)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("sweep", help="grid search one model on one dataset")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a stored split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="split directory from prepare")
    p.add_argument("--phase", choices=("validation", "test"), default="test")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="emit the metric table from run records")
    p.add_argument("--records", required=True, help="runs.jsonl path")
    p.add_argument("--format", choices=("csv", "md"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("radar", help="emit the trade-off radar SVG from run records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="dataset label when records span several")
    p.set_defaults(func=_cmd_radar)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
