"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 backend exhaustion.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .corpus import (
    atomic_write_bytes,
    load_cf_dataset,
    load_manifest,
    load_predictions,
    load_source_dataset,
)
from .errors import CfqaError, ConfigError, DataError
from .metrics import DatasetScore, MetricReport, score_predictions
from .pipeline import DATASET, MANIFEST, POST_ATTRIBUTION, Pipeline
from .quality import make_scorer, score_dataset

log = logging.getLogger("cfqa")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, ensure_ascii=False) + "\n").encode("utf-8"))


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config).with_overrides(
        seed=args.seed, mode=args.mode, cache_dir=args.cache_dir, max_inflight=args.max_inflight)
    cfg.validate()
    return Pipeline(cfg)


def _print_counts(manifest) -> None:
    for stage, n in manifest.to_json()["stage_counts"].items():
        print(f"{stage:>18}  {n}")


def cmd_generate(args) -> int:
    p = _pipeline(args)
    _print_counts(p.generate())
    return 0


def cmd_filter(args) -> int:
    p = _pipeline(args)
    _print_counts(p.filter(args.candidates))
    return 0


def cmd_select(args) -> int:
    p = _pipeline(args)
    m = p.select(args.post_attribution)
    _print_counts(m)
    print(f"dataset: {p.path(DATASET)}")
    return 0


def cmd_pipeline(args) -> int:
    p = _pipeline(args)
    m = p.run()
    _print_counts(m)
    print(f"dataset: {p.path(DATASET)}")
    return 0


def cmd_stats(args) -> int:
    if args.manifest:
        path = Path(args.manifest)
    elif args.config:
        path = Path(load_config(args.config).output_dir) / MANIFEST
    else:
        raise ConfigError("stats needs --manifest or --config")
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    m = load_manifest(path)
    doc = m.to_json()
    if args.json:
        print(json.dumps(doc, indent=2, ensure_ascii=False))
        return 0
    rates = doc["retention_rates"]
    for stage, n in doc["stage_counts"].items():
        rate = f"  ({rates[stage]:.1%} kept)" if stage in rates else ""
        print(f"{stage:>18}  {n}{rate}")
    for key, value in doc["stats"].items():
        print(f"{key}: {json.dumps(value, ensure_ascii=False)}")
    return 0


def cmd_quality(args) -> int:
    if args.scorer:
        spec = json.loads(args.scorer) if args.scorer.lstrip().startswith("{") else {"type": args.scorer}
        base = Path.cwd()
    elif args.config:
        cfg = load_config(args.config)
        spec, base = cfg.scorer, cfg.base_dir
    else:
        raise ConfigError("quality needs --scorer or a --config with a 'scorer' block")
    scorer = make_scorer(spec, base)
    records = load_cf_dataset(args.dataset)
    report = score_dataset(records, scorer, aggregate=args.aggregate, threshold=args.threshold,
                           max_workers=args.max_inflight or 1)
    out = Path(args.output) if args.output else Path(args.dataset).with_suffix(".quality.json")
    _write_json(out, report.to_json())
    print(f"attribution       {report.attribution_mean:.4f}")
    print(f"counterfactuality {report.counterfactuality_mean:.4f}")
    print(f"n={report.n} skipped={report.skipped}  -> {out}")
    return 0


def _named(value: str) -> tuple[str | None, str]:
    if "=" in value:
        name, path = value.split("=", 1)
        return name, path
    return None, value


def cmd_score(args) -> int:
    ood = [s for s in (args.ood or "").split(",") if s]
    if args.results:
        obj = json.loads(Path(args.results).read_text(encoding="utf-8"))
        cells = obj.get("per_dataset", obj)
        per_dataset = {k: DatasetScore(float(v["f1"]), float(v.get("em", 0.0)), int(v.get("n", 0)))
                       for k, v in cells.items()}
    else:
        if not args.dataset or not args.predictions:
            raise ConfigError("score needs --dataset and --predictions (or --results)")
        datasets = {}
        for spec in args.dataset:
            name, path = _named(spec)
            name = name or Path(path).name.split(".")[0]
            if name in datasets:
                raise ConfigError(f"dataset name given twice: {name}")
            datasets[name] = load_source_dataset(path, "triviaqa-mrqa")
        named_preds, shared = {}, []
        for spec in args.predictions:
            name, path = _named(spec)
            if name is None:
                shared.extend(load_predictions(path))
            elif name not in datasets:
                raise ConfigError(f"predictions given for unknown dataset {name!r}")
            else:
                named_preds.setdefault(name, []).extend(load_predictions(path))
        owner = {}
        for name, qs in datasets.items():
            for q in qs:
                owner.setdefault(q.question_id, name)
        for p in shared:
            if p.question_id not in owner:
                raise DataError(f"prediction for unknown question_id {p.question_id!r}")
        per_dataset = {}
        for name, qs in datasets.items():
            ids = {q.question_id for q in qs}
            preds = named_preds.get(name, []) + [p for p in shared if p.question_id in ids]
            per_dataset[name] = score_predictions(qs, preds)
    unknown = [n for n in ood if n not in per_dataset]
    if unknown:
        raise DataError(f"unknown dataset(s) in OOD set: {unknown}")
    report = MetricReport(per_dataset, ood)
    table = report.render_table()
    if args.output:
        _write_json(Path(args.output), report.to_json())
    if args.table:
        atomic_write_bytes(Path(args.table), table.encode("utf-8"))
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfqa", description="Counterfactual open-book QA dataset pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run_opts = _Parser(add_help=False)
    run_opts.add_argument("--config", required=True, help="pipeline config (JSON)")
    run_opts.add_argument("--seed", type=int)
    run_opts.add_argument("--mode", choices=("counterfactual", "factual"))
    run_opts.add_argument("--cache-dir")
    run_opts.add_argument("--max-inflight", type=int)

    p = sub.add_parser("generate", parents=[run_opts], help="sample k recitations per question")
    p.set_defaults(func=cmd_generate)
    p = sub.add_parser("filter", parents=[run_opts], help="surface, factuality and attribution filters")
    p.add_argument("--candidates", help="candidates file (default: <output_dir>/candidates.jsonl)")
    p.set_defaults(func=cmd_filter)
    p = sub.add_parser("select", parents=[run_opts], help="pick one pair per question, write the dataset")
    p.add_argument("--post-attribution", help=f"scored candidates (default: <output_dir>/{POST_ATTRIBUTION})")
    p.set_defaults(func=cmd_select)
    p = sub.add_parser("pipeline", parents=[run_opts], help="generate, filter and select")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("stats", help="print a manifest")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("quality", help="NLI attribution/counterfactuality of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="take the scorer from this pipeline config")
    p.add_argument("--scorer", help="scorer type (lexical) or a JSON scorer block")
    p.add_argument("--aggregate", choices=("mean", "fraction_above"), default="mean")
    p.add_argument("--threshold", type=float, default=0.5, help="cut-off for fraction_above")
    p.add_argument("--max-inflight", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("score", help="token F1 / exact match of prediction files")
    p.add_argument("--dataset", action="append", help="NAME=PATH of an MRQA-format file (repeatable)")
    p.add_argument("--predictions", action="append", help="[NAME=]PATH of a predictions JSONL (repeatable)")
    p.add_argument("--results", help="JSON of precomputed per-dataset {f1, em} cells to aggregate")
    p.add_argument("--ood", help="comma-separated out-of-domain dataset names")
    p.add_argument("--output", help="write the report JSON here")
    p.add_argument("--table", help="write the text table here")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CfqaError as e:
        print(f"cfqa: error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        print(f"cfqa: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
