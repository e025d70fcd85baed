"""Estimator-style front end: fit/predict objects over graphs.

Two estimators cover the two workflows. ``GraphNetClassifier`` trains one
concrete (architecture, quantisation) pair — either a named baseline or the
result of a search — with early stopping on validation accuracy.
``ArchitectureSearch`` runs the joint search and exposes the discovered
configuration, ready to hand to a fresh classifier for final training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import Tape
from .graphdata import Graph
from .nas import Adam, SearchConfig, search
from .quant import QuantPair, parse_pair
from .supernet import (
    ACTIVATION_TYPES,
    AGGREGATION_TYPES,
    ATTENTION_TYPES,
    EXPANSION_FACTORS,
    ArchChoice,
    Choices,
    SuperNet,
    quant_site_names,
    sequential_route,
    uniform_quant,
)

INPUT_SCALE_CEILING = 2.5
INPUT_SCALE_TARGET = 0.7


def check_graph(g) -> Graph:
    """Validate a dataset object before training on it."""
    if not isinstance(g, Graph):
        raise TypeError(f"expected a Graph, got {type(g).__name__}")
    if not g.train_mask.any():
        raise ValueError("graph has no training nodes")
    if not g.val_mask.any():
        raise ValueError("graph has no validation nodes")
    if not np.all(np.isfinite(g.features)):
        raise ValueError("graph features contain non-finite values")
    return g


def calibrated_input_scale(features: np.ndarray) -> float | None:
    """Initial scale for the input projection, sized so first-layer outputs
    land at a healthy magnitude even for very sparse row-normalised
    features (whose entries would otherwise vanish under coarse fixed-point
    activation grids). Deterministic, computed once at init time."""
    norms = np.linalg.norm(features, axis=1)
    rms = float(np.sqrt(np.mean(norms * norms)))
    if rms == 0.0:
        return None
    return min(INPUT_SCALE_TARGET / rms, INPUT_SCALE_CEILING)


def _resolve_input_scale(setting, features):
    if setting == "auto":
        return calibrated_input_scale(features)
    if setting is None or isinstance(setting, (int, float)):
        return None if setting is None else float(setting)
    raise ValueError(f"input_scale must be 'auto', None, or a number, got {setting!r}")


# ---------------------------------------------------------------------------
# named baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineSpec:
    """A fixed reference architecture expressible in the searchable space."""

    attention: str
    activation: str
    aggregation: str
    expansion: int
    layers: int
    channels: int
    jumping: bool  # densely route all earlier outputs into the last block

    def blocks(self, layers: int) -> tuple[ArchChoice, ...]:
        return tuple(ArchChoice(self.attention, self.activation,
                                self.aggregation, self.expansion)
                     for _ in range(layers))

    def routes(self, layers: int) -> tuple[tuple[int, ...], ...]:
        routes = list(sequential_route(layers))
        if self.jumping and layers > 1:
            routes[-1] = tuple(range(layers))
        return tuple(routes)


BASELINES: dict[str, BaselineSpec] = {
    "graphsage": BaselineSpec("const", "relu", "add", 1, 2, 16, False),
    "graphsage-v2": BaselineSpec("const", "relu", "add", 1, 2, 512, False),
    "gat": BaselineSpec("gat", "elu", "add", 1, 2, 32, False),
    "gat-v2": BaselineSpec("gat", "elu", "add", 1, 2, 64, False),
    "jknet": BaselineSpec("const", "relu", "add", 1, 2, 32, True),
    "jknet-v2": BaselineSpec("const", "relu", "add", 1, 2, 512, True),
}


def resolve_quantisation(spec, n_layers: int) -> dict[str, QuantPair] | None:
    """Accept a single pair (uniform across sites) or a per-site mapping."""
    if spec is None or (isinstance(spec, str) and spec.strip().lower() == "float"):
        return None
    if isinstance(spec, dict):
        valid = set(quant_site_names(n_layers))
        out = {}
        for site, value in spec.items():
            if site not in valid:
                raise ValueError(f"unknown quantisation site {site!r}")
            pair = parse_pair(value)
            if pair is None:
                raise ValueError(f"site {site!r} cannot be float in a site map")
            out[site] = pair
        if set(out) != valid:
            raise ValueError("site map must cover every quantisation site")
        return out
    return uniform_quant(n_layers, spec)


def _restrict(universe, used):
    return tuple(x for x in universe if x in set(used))


# ---------------------------------------------------------------------------
# training loop shared by classifier fit and the search harness
# ---------------------------------------------------------------------------


def train_sampled(net: SuperNet, g: Graph, choices: Choices, lr: float,
                  epochs: int, patience: int, seed: int) -> dict:
    """Full-batch training of one sampled path with early stopping on
    validation accuracy; the best-scoring weights are restored at the end."""
    opt = Adam(net.sampled_parameters(choices), lr)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    names = net.sampled_param_names(choices)
    best = {n: net.params[n].data.copy() for n in names}
    best_acc, best_epoch, stale = -1.0, -1, 0
    history = []
    for epoch in range(epochs):
        with Tape() as tape:
            loss, _ = net.loss(g, choices, g.train_mask, train=True, rng=rng)
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
        val_acc = net.evaluate(g, choices, g.val_mask)
        history.append({"epoch": epoch, "train_loss": float(loss.item()),
                        "val_accuracy": float(val_acc)})
        if val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            for n in names:
                best[n][...] = net.params[n].data
        else:
            stale += 1
            if stale >= patience:
                break
    for n in names:
        net.params[n].data[...] = best[n]
    return {"history": history, "best_epoch": best_epoch,
            "best_val_accuracy": best_acc}


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


class GraphNetClassifier(BaseEstimator):
    """Node classifier with a fixed architecture and quantisation.

    ``architecture`` is a baseline name from ``BASELINES`` or a ``Choices``
    object (typically from ``ArchitectureSearch``). ``quantisation`` is a
    scheme pair applied at every site ("w4a8", a table row index, a
    "weight/activation" name), a per-site mapping, "float"/None to keep the
    architecture's own setting (baselines default to float).
    ``layers``/``channels`` default to the baseline's published shape.
    """

    def __init__(self, architecture="graphsage", quantisation=None,
                 layers=None, channels=None, lr=0.005, epochs=200,
                 patience=20, dropout=0.0, seed=0, input_scale="auto"):
        self.architecture = architecture
        self.quantisation = quantisation
        self.layers = layers
        self.channels = channels
        self.lr = lr
        self.epochs = epochs
        self.patience = patience
        self.dropout = dropout
        self.seed = seed
        self.input_scale = input_scale

    def _resolve(self) -> tuple[tuple[ArchChoice, ...], tuple, object, int, int]:
        arch = self.architecture
        if isinstance(arch, Choices):
            layers = len(arch.blocks)
            if self.layers is not None and self.layers != layers:
                raise ValueError("layers conflicts with the supplied choices")
            return arch.blocks, arch.routes, arch.quant, layers, self.channels or 32
        if isinstance(arch, str) and arch in BASELINES:
            spec = BASELINES[arch]
            layers = self.layers or spec.layers
            channels = self.channels or spec.channels
            return spec.blocks(layers), spec.routes(layers), None, layers, channels
        raise ValueError(
            f"unknown architecture {arch!r}; expected one of {sorted(BASELINES)} "
            "or a Choices object")

    def fit(self, g: Graph):
        check_graph(g)
        blocks, routes, own_quant, layers, channels = self._resolve()
        quant = own_quant if self.quantisation is None \
            else resolve_quantisation(self.quantisation, layers)
        choices = Choices(blocks, routes, quant)
        net = SuperNet(
            in_dim=g.num_features, hidden=channels, n_classes=g.n_classes,
            n_layers=layers, multihot=g.multihot, seed=self.seed,
            dropout=self.dropout,
            attention_options=_restrict(ATTENTION_TYPES, [b.attention for b in blocks]),
            activation_options=_restrict(ACTIVATION_TYPES, [b.activation for b in blocks]),
            aggregation_options=_restrict(AGGREGATION_TYPES, [b.aggregation for b in blocks]),
            expansion_options=_restrict(EXPANSION_FACTORS, [b.expansion for b in blocks]),
            input_scale=_resolve_input_scale(self.input_scale, g.features),
        )
        summary = train_sampled(net, g, choices, self.lr, self.epochs,
                                self.patience, self.seed)
        self.net_ = net
        self.choices_ = choices
        self.history_ = summary["history"]
        self.best_epoch_ = summary["best_epoch"]
        self.best_val_accuracy_ = summary["best_val_accuracy"]
        self.n_features_in_ = g.num_features
        self.classes_ = np.arange(g.n_classes)
        self.model_bytes_ = net.model_size_bytes(choices)
        self.buffer_bytes_ = net.buffer_size_bytes(choices, g)
        return self

    def _logits(self, g: Graph) -> np.ndarray:
        if not hasattr(self, "net_"):
            raise RuntimeError("classifier is not fitted yet")
        return self.net_.forward(g, self.choices_).data

    def predict_proba(self, g: Graph) -> np.ndarray:
        z = self._logits(g)
        if self.net_.multihot:
            return 1.0 / (1.0 + np.exp(-z))
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, g: Graph) -> np.ndarray:
        z = self._logits(g)
        if self.net_.multihot:
            return (z > 0).astype(np.int64)
        return z.argmax(axis=1)

    def score(self, g: Graph, mask: np.ndarray | None = None) -> float:
        from .graphdata import metrics
        mask = g.test_mask if mask is None else np.asarray(mask, dtype=bool)
        return metrics(self._logits(g), g.labels, mask)


class ArchitectureSearch(BaseEstimator):
    """Joint search over architectures and per-site quantisation.

    ``fit`` trains a supernet under the annealed-noise controller loop and
    stores the discovered configuration. Pass the result to a fresh
    ``GraphNetClassifier`` (via ``best_estimator``) for final training —
    search-time weights are deliberately discarded.
    """

    def __init__(self, layers=2, channels=32, epochs=60, arch_start=50,
                 quant_start=20, inner_steps=2, noise_scale=1.0,
                 size_weight=0.1, lr=0.005, seed=0, sample_nodes=None,
                 size_to_arch=False, dropout=0.0, input_scale="auto",
                 final_epochs=200, final_patience=20):
        self.layers = layers
        self.channels = channels
        self.epochs = epochs
        self.arch_start = arch_start
        self.quant_start = quant_start
        self.inner_steps = inner_steps
        self.noise_scale = noise_scale
        self.size_weight = size_weight
        self.lr = lr
        self.seed = seed
        self.sample_nodes = sample_nodes
        self.size_to_arch = size_to_arch
        self.dropout = dropout
        self.input_scale = input_scale
        self.final_epochs = final_epochs
        self.final_patience = final_patience

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            epochs=self.epochs, arch_start=self.arch_start,
            quant_start=self.quant_start, inner_steps=self.inner_steps,
            noise_scale=self.noise_scale, size_weight=self.size_weight,
            lr=self.lr, seed=self.seed, sample_nodes=self.sample_nodes,
            size_to_arch=self.size_to_arch)

    def fit(self, g: Graph, probe=None):
        check_graph(g)
        net = SuperNet(
            in_dim=g.num_features, hidden=self.channels, n_classes=g.n_classes,
            n_layers=self.layers, multihot=g.multihot, seed=self.seed,
            dropout=self.dropout,
            input_scale=_resolve_input_scale(self.input_scale, g.features))
        choices, log = search(net, g, self.search_config(), probe=probe)
        self.supernet_ = net
        self.choices_ = choices
        self.search_log_ = log
        self.architecture_ = [
            {"attention": b.attention, "activation": b.activation,
             "aggregation": b.aggregation, "expansion": b.expansion}
            for b in choices.blocks]
        self.routes_ = [list(r) for r in choices.routes]
        self.quantisation_ = {site: pair.name
                              for site, pair in (choices.quant or {}).items()}
        self.model_bytes_ = net.model_size_bytes(choices)
        self.buffer_bytes_ = net.buffer_size_bytes(choices, g)
        return self

    def best_estimator(self) -> GraphNetClassifier:
        if not hasattr(self, "choices_"):
            raise RuntimeError("search is not fitted yet")
        return GraphNetClassifier(
            architecture=self.choices_, channels=self.channels, lr=self.lr,
            epochs=self.final_epochs, patience=self.final_patience,
            dropout=self.dropout, seed=self.seed, input_scale=self.input_scale)
