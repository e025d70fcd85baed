"""Experiment orchestration: run records, sweeps, quantisation grid search,
bitwidth statistics, and dataset resolution shared by the CLI commands."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .estimators import ArchitectureSearch, GraphNetClassifier
from .graphdata import DatasetError, Graph, load_dataset, make_citation_graph
from .nas import SearchConfig
from .quant import QUANT_PAIRS, QuantPair
from .supernet import (Choices, choices_from_json, choices_to_json,
                       load_checkpoint)

DATA_ROOT_ENV = "QGNAS_DATA"
RECORD_VERSION = 1

# Accuracy may drop at most half a percentage point below the float reference
# before a grid-search step is rejected.
ACCURACY_DROP_LIMIT = 0.005

# Named synthetic stand-ins, available without any dataset directory. The
# default mirrors the shape of the classic citation benchmark; "small" keeps
# smoke tests and demos fast.
SYNTHETIC_GRAPHS = {
    "synthetic": {},
    "synthetic-small": {"n": 400, "f": 128, "c": 7, "words_per_node": 8,
                        "avg_degree": 5.0},
}


def data_root(override=None) -> Path | None:
    if override is not None:
        return Path(override)
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else None


def load_graph(name: str, root=None) -> Graph:
    """Resolve a dataset by name: a named synthetic graph, a path to a
    converted dataset directory, or a directory under the data root."""
    if name in SYNTHETIC_GRAPHS:
        return make_citation_graph(**SYNTHETIC_GRAPHS[name])
    p = Path(name)
    if p.is_dir() and (p / "meta.json").exists():
        return load_dataset(p.parent, p.name)
    r = data_root(root)
    if r is None:
        known = ", ".join(sorted(SYNTHETIC_GRAPHS))
        raise DatasetError(
            f"dataset {name!r} is not a directory or a synthetic graph "
            f"({known}) and no data root is set (--data-root or "
            f"${DATA_ROOT_ENV})")
    return load_dataset(r, name)


# ---------------------------------------------------------------------------
# experiment records
# ---------------------------------------------------------------------------


@dataclass
class ExperimentRecord:
    """One finished run: what was trained, on what, and what it measured."""

    dataset: str
    config: dict
    choices: Choices
    accuracy: float
    model_bytes: int
    buffer_bytes: int
    seconds: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.model_bytes <= 0 or self.buffer_bytes <= 0:
            raise ValueError("model and buffer sizes must be positive")

    def to_json(self) -> dict:
        return {
            "version": RECORD_VERSION,
            "dataset": self.dataset,
            "config": self.config,
            "choices": choices_to_json(self.choices),
            "accuracy": self.accuracy,
            "model_bytes": self.model_bytes,
            "buffer_bytes": self.buffer_bytes,
            "seconds": self.seconds,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentRecord":
        if data.get("version") != RECORD_VERSION:
            raise ValueError(f"unsupported record version: {data.get('version')}")
        return cls(
            dataset=data["dataset"],
            config=data["config"],
            choices=choices_from_json(data["choices"]),
            accuracy=data["accuracy"],
            model_bytes=data["model_bytes"],
            buffer_bytes=data["buffer_bytes"],
            seconds=data["seconds"],
            seed=data["seed"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "ExperimentRecord":
        return cls.from_json(json.loads(Path(path).read_text()))


def load_records(paths) -> list[ExperimentRecord]:
    return [ExperimentRecord.load(p) for p in paths]


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


# ---------------------------------------------------------------------------
# search and baseline runs
# ---------------------------------------------------------------------------


def _decode_option(net, site: str, index: int) -> str:
    """Readable option name for a logged (site, index) decision."""
    if "/quant/" in site:
        return QUANT_PAIRS[index].name
    leaf = site.rsplit("/", 1)[-1]
    if leaf == "attention":
        return net.attention_options[index]
    if leaf == "activation":
        return net.activation_options[index]
    if leaf == "aggregation":
        return net.aggregation_options[index]
    if leaf == "expansion":
        return str(net.expansion_options[index])
    if leaf.startswith("route"):
        return ("off", "on")[index]
    raise ValueError(f"unknown decision site {site!r}")


def search_log_with_names(log, net) -> list[dict]:
    """Search log rows with option names resolved next to the raw indices."""
    rows = []
    for row in log:
        row = dict(row)
        for key, out in (("arch_indices", "arch_names"),
                         ("quant_indices", "quant_names")):
            picks = row.get(key)
            if isinstance(picks, dict):
                row[out] = {s: _decode_option(net, s, i) for s, i in picks.items()}
        rows.append(row)
    return rows


def run_search(g: Graph, dataset: str, layers: int = 2, channels: int = 32,
               cfg: SearchConfig | None = None, final_epochs: int = 200,
               final_patience: int = 20, dropout: float = 0.0,
               input_scale="auto"):
    """Joint search, then train the found network from a fresh initialisation
    and measure it on the test split."""
    cfg = cfg or SearchConfig()
    cfg.validate()
    start = time.perf_counter()
    searcher = ArchitectureSearch(
        layers=layers, channels=channels, epochs=cfg.epochs,
        arch_start=cfg.arch_start, quant_start=cfg.quant_start,
        inner_steps=cfg.inner_steps, noise_scale=cfg.noise_scale,
        size_weight=cfg.size_weight, lr=cfg.lr, seed=cfg.seed,
        sample_nodes=cfg.sample_nodes, size_to_arch=cfg.size_to_arch,
        dropout=dropout, input_scale=input_scale,
        final_epochs=final_epochs, final_patience=final_patience,
    ).fit(g)
    clf = searcher.best_estimator().fit(g)
    accuracy = clf.score(g)
    config = {"mode": "search", "layers": layers, "channels": channels,
              **dataclasses.asdict(cfg),
              "final_epochs": final_epochs, "final_patience": final_patience}
    record = ExperimentRecord(
        dataset=dataset, config=config, choices=clf.choices_,
        accuracy=accuracy, model_bytes=clf.model_bytes_,
        buffer_bytes=clf.buffer_bytes_,
        seconds=time.perf_counter() - start, seed=cfg.seed)
    return record, clf, searcher


def run_baseline(g: Graph, dataset: str, model: str, quant=None,
                 lr: float = 0.005, epochs: int = 200, patience: int = 20,
                 seed: int = 0, dropout: float = 0.0, input_scale="auto"):
    """Train a fixed named architecture, optionally uniformly quantised."""
    start = time.perf_counter()
    clf = GraphNetClassifier(
        architecture=model, quantisation=quant, lr=lr, epochs=epochs,
        patience=patience, seed=seed, dropout=dropout,
        input_scale=input_scale).fit(g)
    accuracy = clf.score(g)
    quant_name = "float" if clf.choices_.quant is None else (
        quant if isinstance(quant, str)
        else {s: p.name for s, p in clf.choices_.quant.items()})
    config = {"mode": "baseline", "model": model, "quantisation": quant_name,
              "layers": clf.net_.n_layers, "channels": clf.net_.hidden,
              "lr": lr, "epochs": epochs, "patience": patience}
    record = ExperimentRecord(
        dataset=dataset, config=config, choices=clf.choices_,
        accuracy=accuracy, model_bytes=clf.model_bytes_,
        buffer_bytes=clf.buffer_bytes_,
        seconds=time.perf_counter() - start, seed=seed)
    return record, clf


# ---------------------------------------------------------------------------
# manual quantisation grid search
# ---------------------------------------------------------------------------


@dataclass
class GridSearchOutcome:
    pair: QuantPair | None  # None means only float passed
    no_quantisation_passed: bool
    float_accuracy: float
    trace: list  # (pair name, accuracy), most precise row first

    def to_json(self) -> dict:
        return {
            "chosen": "float" if self.pair is None else self.pair.name,
            "no_quantisation_passed": self.no_quantisation_passed,
            "float_accuracy": self.float_accuracy,
            "trace": [[name, acc] for name, acc in self.trace],
        }


def grid_search_quantisation(evaluate) -> GridSearchOutcome:
    """Walk the quantisation table from its most precise row down to the most
    aggressive, keeping each row whose accuracy stays within half a percentage
    point of the float reference.

    ``evaluate(pair_or_None) -> accuracy`` is called once for float and once
    per visited row. Returns the last row before the first failure, the final
    row when every row passes, and the float fallback (flagged) when even the
    most precise row fails.
    """
    float_accuracy = float(evaluate(None))
    trace = []
    previous = None
    for index in range(len(QUANT_PAIRS) - 1, -1, -1):
        pair = QUANT_PAIRS[index]
        accuracy = float(evaluate(pair))
        trace.append((pair.name, accuracy))
        if float_accuracy - accuracy > ACCURACY_DROP_LIMIT:
            if previous is None:
                return GridSearchOutcome(None, True, float_accuracy, trace)
            return GridSearchOutcome(previous, False, float_accuracy, trace)
        previous = pair
    return GridSearchOutcome(QUANT_PAIRS[0], False, float_accuracy, trace)


def run_gridsearch(g: Graph, dataset: str, model: str = "graphsage",
                   lr: float = 0.005, epochs: int = 200, patience: int = 20,
                   seed: int = 0, dropout: float = 0.0) -> dict:
    """Grid search over uniform quantisation of a named architecture.

    The pass/fail rule uses validation accuracy; the chosen configuration is
    then reported with its test accuracy.
    """
    fitted = {}

    def evaluate(pair):
        clf = GraphNetClassifier(
            architecture=model, quantisation="float" if pair is None else pair,
            lr=lr, epochs=epochs, patience=patience, seed=seed,
            dropout=dropout).fit(g)
        fitted["float" if pair is None else pair.name] = clf
        return clf.best_val_accuracy_

    outcome = grid_search_quantisation(evaluate)
    chosen = fitted["float" if outcome.pair is None else outcome.pair.name]
    return {
        "dataset": dataset,
        "model": model,
        "seed": seed,
        **outcome.to_json(),
        "test_accuracy": chosen.score(g),
        "model_bytes": chosen.model_bytes_,
        "buffer_bytes": chosen.buffer_bytes_,
    }


# ---------------------------------------------------------------------------
# sweeps and the Pareto frontier
# ---------------------------------------------------------------------------


def pareto_frontier(points, accuracy=None, size=None) -> list:
    """Non-dominated subset under (higher accuracy, smaller size), in size
    order. Exact duplicates are kept; a point equal on one axis and worse on
    the other is dominated."""
    acc = accuracy or (lambda p: p["accuracy"])
    size_of = size or (lambda p: p["model_bytes"])
    frontier = []
    best_acc = best_size = None
    for p in sorted(points, key=lambda p: (size_of(p), -acc(p))):
        a, s = acc(p), size_of(p)
        if best_acc is None or a > best_acc or (a == best_acc and s == best_size):
            frontier.append(p)
            best_acc, best_size = a, s
    return frontier


def sweep_grid(layers_list, channels_list, betas, seed: int = 0) -> list[dict]:
    return [
        {"layers": int(l), "channels": int(c), "size_weight": float(b),
         "seed": int(seed)}
        for l, c, b in itertools.product(layers_list, channels_list, betas)
    ]


def _point_filename(point: dict) -> str:
    return ("point-L{layers}-C{channels}-B{size_weight}-S{seed}.json"
            .format(**point))


def _sweep_point(job: dict) -> dict:
    """One grid point, run in its own worker process. Writes a single
    per-point record file; never touches shared state."""
    point = job["point"]
    try:
        g = load_graph(job["dataset"], job.get("data_root"))
        cfg = SearchConfig(**{**job["config"], "size_weight": point["size_weight"],
                              "seed": point["seed"]})
        record, _, _ = run_search(
            g, job["dataset"], layers=point["layers"],
            channels=point["channels"], cfg=cfg,
            final_epochs=job["final_epochs"],
            final_patience=job["final_patience"])
        path = Path(job["out_dir"]) / _point_filename(point)
        record.save(path)
        return {"ok": True, "point": point, "path": str(path)}
    except Exception as e:  # a failed point must not sink the sweep
        return {"ok": False, "point": point, "error": f"{type(e).__name__}: {e}"}


RESULT_COLUMNS = ("layers", "channels", "size_weight", "seed",
                  "accuracy", "model_bytes", "buffer_bytes")


def _write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def run_sweep(dataset: str, grid: list[dict], out_dir, config: dict | None = None,
              workers: int | None = None, data_root=None,
              final_epochs: int = 200, final_patience: int = 20) -> dict:
    """Run one search per grid point in parallel worker processes, then merge
    the per-point record files into a results CSV and its Pareto frontier."""
    if not grid:
        raise ValueError("sweep grid is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = dict(config or {})
    base.pop("size_weight", None)
    base.pop("seed", None)
    jobs = [{"dataset": dataset, "data_root": None if data_root is None else str(data_root),
             "config": base, "point": p, "out_dir": str(out),
             "final_epochs": final_epochs, "final_patience": final_patience}
            for p in grid]

    if workers == 0:  # in-process escape hatch for debugging
        results = [_sweep_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, jobs))

    rows, failures = [], []
    for res in results:
        if not res["ok"]:
            failures.append(res)
            continue
        record = ExperimentRecord.load(res["path"])
        rows.append({
            "layers": record.config["layers"],
            "channels": record.config["channels"],
            "size_weight": record.config["size_weight"],
            "seed": record.seed,
            "accuracy": record.accuracy,
            "model_bytes": record.model_bytes,
            "buffer_bytes": record.buffer_bytes,
        })
    rows.sort(key=lambda r: (r["model_bytes"], -r["accuracy"]))
    frontier = pareto_frontier(rows)
    _write_csv(out / "results.csv", rows)
    _write_csv(out / "frontier.csv", frontier)
    if failures:
        write_jsonl(out / "failures.jsonl", failures)
    return {"rows": rows, "frontier": frontier, "failures": failures,
            "results_csv": str(out / "results.csv"),
            "frontier_csv": str(out / "frontier.csv")}


# ---------------------------------------------------------------------------
# bitwidth statistics
# ---------------------------------------------------------------------------

WEIGHT_BIT_BINS = (1, 2, 4, 6, 8, 12, 16)
ACTIVATION_BIT_BINS = (4, 8, 12, 16)

# Report categories by what the site feeds: the hidden linear path, the
# attention path, and shortcut routing. Aggregation sites carry no weight
# tensor and are left out of the report.
SITE_CATEGORIES = {"linear": "hidden", "attention": "attention",
                   "router": "shortcut"}


def quantisation_statistics(records: list[ExperimentRecord]) -> dict:
    """Histogram of chosen bitwidths per site category, weights and
    activations separately. Counts conserve: each histogram sums to the
    number of quantised sites tallied for its category."""
    if not records:
        raise ValueError("at least one experiment record is required")
    categories = {
        cat: {"weights": {str(b): 0 for b in WEIGHT_BIT_BINS},
              "activations": {str(b): 0 for b in ACTIVATION_BIT_BINS},
              "sites": 0}
        for cat in ("hidden", "attention", "shortcut")
    }
    for record in records:
        for site, pair in (record.choices.quant or {}).items():
            leaf = site.rsplit("/", 1)[-1]
            cat = SITE_CATEGORIES.get(leaf)
            if cat is None:
                continue
            categories[cat]["weights"][str(pair.weight.total_bits)] += 1
            categories[cat]["activations"][str(pair.activation.total_bits)] += 1
            categories[cat]["sites"] += 1

    def modal(kind, bins):
        totals = {b: sum(c[kind][str(b)] for c in categories.values())
                  for b in bins}
        return min((b for b in bins if totals[b] == max(totals.values())),
                   default=None) if any(totals.values()) else None

    return {
        "records": len(records),
        "categories": categories,
        "modal": {"weight_bits": modal("weights", WEIGHT_BIT_BINS),
                  "activation_bits": modal("activations", ACTIVATION_BIT_BINS)},
    }


def write_stats_csv(path, stats: dict) -> None:
    """Plot-ready long form: one row per (category, kind, bits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("category", "kind", "bits", "count"))
        for cat, data in stats["categories"].items():
            for kind in ("weights", "activations"):
                for bits, count in data[kind].items():
                    w.writerow((cat, kind, bits, count))


def modal_summary(stats: dict) -> str:
    """Observational line comparing the modal choice against the expectation
    of at most 4-bit weights with 8-bit activations."""
    w = stats["modal"]["weight_bits"]
    a = stats["modal"]["activation_bits"]
    verdict_w = "within" if (w is not None and w <= 4) else "outside"
    verdict_a = "matches" if a == 8 else "differs from"
    return (f"modal weight bits = {w} ({verdict_w} the expected <= 4); "
            f"modal activation bits = {a} ({verdict_a} the expected 8)")


# ---------------------------------------------------------------------------
# checkpoint evaluation
# ---------------------------------------------------------------------------


def evaluate_checkpoint(path, g: Graph) -> dict:
    """Load a trained checkpoint and measure it on the graph's test split."""
    net, choices = load_checkpoint(path)
    if g.num_features != net.in_dim or g.n_classes != net.n_classes:
        raise ValueError(
            f"checkpoint expects {net.in_dim} features / {net.n_classes} "
            f"classes, dataset has {g.num_features} / {g.n_classes}")
    return {
        "accuracy": net.evaluate(g, choices, g.test_mask),
        "model_bytes": net.model_size_bytes(choices),
        "buffer_bytes": net.buffer_size_bytes(choices, g),
        "quantisation": "float" if choices.quant is None
        else {site: pair.name for site, pair in choices.quant.items()},
    }
