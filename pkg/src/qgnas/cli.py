"""Command-line interface for searches, baselines, sweeps, and reports."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .estimators import BASELINES
from .graphdata import convert_citation_raw
from .nas import SearchConfig
from .supernet import save_checkpoint

SEARCH_FIELDS = tuple(f.name for f in dataclasses.fields(SearchConfig))


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_search_options(p: argparse.ArgumentParser) -> None:
    """Search settings; unset flags fall back to the config file, then to
    the defaults."""
    p.add_argument("--config", help="JSON file with search setting overrides")
    p.add_argument("--epochs", type=int, help="search epochs")
    p.add_argument("--arch-start", type=int, dest="arch_start",
                   help="first epoch that updates the architecture controller")
    p.add_argument("--quant-start", type=int, dest="quant_start",
                   help="first epoch that updates the quantisation controller")
    p.add_argument("--inner-steps", type=int, dest="inner_steps",
                   help="network training steps per search epoch")
    p.add_argument("--noise-scale", type=float, dest="noise_scale",
                   help="initial exploration noise temperature")
    p.add_argument("--size-weight", type=float, dest="size_weight",
                   help="weight of the model-size penalty")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--sample-nodes", type=int, dest="sample_nodes",
                   help="nodes per sampled training subgraph")
    p.add_argument("--size-to-arch", action=argparse.BooleanOptionalAction,
                   dest="size_to_arch", default=None,
                   help="let the size penalty also steer architecture choices")


def _search_config(args) -> SearchConfig:
    fields = dataclasses.asdict(SearchConfig())
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        unknown = set(overrides) - set(fields)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        fields.update(overrides)
    for key in SEARCH_FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            fields[key] = value
    cfg = SearchConfig(**fields)
    cfg.validate()
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path("runs") / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=1))


def cmd_search(args) -> int:
    g = harness.load_graph(args.dataset, args.data_root)
    cfg = _search_config(args)
    record, clf, searcher = harness.run_search(
        g, args.dataset, layers=args.layers, channels=args.channels, cfg=cfg,
        final_epochs=args.final_epochs, final_patience=args.final_patience,
        dropout=args.dropout)
    out = _out_dir(args, f"search-{args.dataset}-s{cfg.seed}")
    record.save(out / "record.json")
    save_checkpoint(out / "checkpoint.npz", clf.net_, clf.choices_)
    harness.write_jsonl(out / "search.jsonl", harness.search_log_with_names(
        searcher.search_log_, searcher.supernet_))
    _emit({**record.to_json(), "out_dir": str(out)})
    return 0


def cmd_baseline(args) -> int:
    g = harness.load_graph(args.dataset, args.data_root)
    record, clf = harness.run_baseline(
        g, args.dataset, args.model, quant=args.quant, lr=args.lr,
        epochs=args.epochs, patience=args.patience, seed=args.seed,
        dropout=args.dropout)
    out = _out_dir(args, f"baseline-{args.model}-{args.dataset}-s{args.seed}")
    record.save(out / "record.json")
    save_checkpoint(out / "checkpoint.npz", clf.net_, clf.choices_)
    _emit({**record.to_json(), "out_dir": str(out)})
    return 0


def cmd_gridsearch(args) -> int:
    g = harness.load_graph(args.dataset, args.data_root)
    report = harness.run_gridsearch(
        g, args.dataset, model=args.model, lr=args.lr, epochs=args.epochs,
        patience=args.patience, seed=args.seed, dropout=args.dropout)
    out = _out_dir(args, f"gridsearch-{args.model}-{args.dataset}-s{args.seed}")
    (out / "gridsearch.json").write_text(json.dumps(report, indent=1))
    _emit({**report, "out_dir": str(out)})
    return 0


def cmd_sweep(args) -> int:
    cfg = _search_config(args)
    grid = harness.sweep_grid(args.layers, args.channels, args.betas,
                              seed=cfg.seed)
    out = _out_dir(args, f"sweep-{args.dataset}-s{cfg.seed}")
    summary = harness.run_sweep(
        args.dataset, grid, out, config=dataclasses.asdict(cfg),
        workers=args.workers, data_root=args.data_root,
        final_epochs=args.final_epochs, final_patience=args.final_patience)
    _emit(summary)
    return 1 if not summary["rows"] else 0


def cmd_stats(args) -> int:
    records = harness.load_records(args.records)
    stats = harness.quantisation_statistics(records)
    if args.out:
        Path(args.out).write_text(json.dumps(stats, indent=1))
    if args.csv:
        harness.write_stats_csv(args.csv, stats)
    print(harness.modal_summary(stats), file=sys.stderr)
    _emit(stats)
    return 0


def cmd_convert_dataset(args) -> int:
    path = convert_citation_raw(args.content, args.cites, args.out_root,
                                args.name)
    _emit({"written": str(path)})
    return 0


def cmd_eval(args) -> int:
    g = harness.load_graph(args.dataset, args.data_root)
    _emit(harness.evaluate_checkpoint(args.checkpoint, g))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qgnas",
        description="Joint architecture and precision search for graph "
                    "networks, plus training, sweeps, and reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True):
        p.add_argument("--dataset", default="synthetic-small",
                       help="dataset name, directory, or synthetic graph")
        p.add_argument("--data-root", dest="data_root",
                       help=f"dataset directory root "
                            f"(default ${harness.DATA_ROOT_ENV})")
        if out:
            p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    def train_options(p):
        p.add_argument("--lr", type=float, default=0.005)
        p.add_argument("--epochs", type=int, default=200)
        p.add_argument("--patience", type=int, default=20)
        p.add_argument("--dropout", type=float, default=0.0)

    def final_train_options(p):
        p.add_argument("--final-epochs", type=int, default=200,
                       dest="final_epochs")
        p.add_argument("--final-patience", type=int, default=20,
                       dest="final_patience")
        p.add_argument("--dropout", type=float, default=0.0)

    p = sub.add_parser("search", help="joint search, then train the result")
    common(p, seed=False)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--seed", type=int, dest="seed")
    _add_search_options(p)
    final_train_options(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("baseline", help="train a fixed named architecture")
    common(p)
    p.add_argument("--model", required=True, choices=sorted(BASELINES))
    p.add_argument("--quant", default="float",
                   help="float, a pair like fix2.2/fix4.4, w4a8, or a row index")
    train_options(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gridsearch",
                       help="walk uniform quantisation from precise to coarse")
    common(p)
    p.add_argument("--model", default="graphsage", choices=sorted(BASELINES))
    train_options(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("sweep", help="searches over a configuration grid")
    common(p, seed=False)
    p.add_argument("--layers", type=_int_list, default=[2],
                   help="comma-separated layer counts")
    p.add_argument("--channels", type=_int_list, default=[32],
                   help="comma-separated channel widths")
    p.add_argument("--betas", type=_float_list, default=[0.1],
                   help="comma-separated size penalty weights")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (0 runs in-process)")
    _add_search_options(p)
    final_train_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="bitwidth histograms over run records")
    p.add_argument("records", nargs="+", help="record JSON files")
    p.add_argument("--out", help="stats JSON output path")
    p.add_argument("--csv", help="plot-ready CSV output path")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("convert-dataset",
                       help="convert raw citation files to the dataset format")
    p.add_argument("--content", required=True,
                   help="node table: id, word columns, class label")
    p.add_argument("--cites", required=True, help="edge list: cited citing")
    p.add_argument("--out-root", required=True, dest="out_root")
    p.add_argument("--name", required=True)
    p.set_defaults(func=cmd_convert_dataset)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(p, seed=False, out=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # uniform nonzero exit with a one-line reason
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
