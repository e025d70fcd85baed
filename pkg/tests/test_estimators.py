"""Estimator front end: validation helpers, baselines, fit/predict/score."""

import numpy as np
import pytest
from sklearn.base import clone

from qgnas.estimators import (
    BASELINES,
    ArchitectureSearch,
    GraphNetClassifier,
    calibrated_input_scale,
    check_graph,
    resolve_quantisation,
    train_sampled,
)
from qgnas.graphdata import build_graph, make_citation_graph
from qgnas.quant import QUANT_PAIRS, parse_pair
from qgnas.supernet import ArchChoice, Choices, SuperNet, quant_site_names


@pytest.fixture(scope="module")
def graph():
    return make_citation_graph(n=80, f=32, c=4, seed=3, words_per_node=4,
                               avg_degree=5.0)


def multihot_graph(n=40, f=12, c=3, seed=0):
    rng = np.random.default_rng(seed)
    edges = np.stack([rng.integers(0, n, 60), rng.integers(0, n, 60)], axis=1)
    feats = rng.random((n, f))
    labels = (rng.random((n, c)) < 0.4).astype(float)
    return build_graph(n, edges, feats, labels, c, multihot=True,
                       feature_norm="none")


class TestValidation:
    def test_check_graph_rejects_non_graphs(self):
        with pytest.raises(TypeError, match="Graph"):
            check_graph(np.zeros((3, 3)))

    def test_check_graph_rejects_empty_masks(self, graph):
        import copy

        g = copy.copy(graph)
        g.train_mask = np.zeros(g.n, dtype=bool)
        with pytest.raises(ValueError, match="training"):
            check_graph(g)

    def test_check_graph_rejects_non_finite_features(self, graph):
        import copy

        g = copy.copy(graph)
        g.features = g.features.copy()
        g.features[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            check_graph(g)

    def test_check_graph_passes_through(self, graph):
        assert check_graph(graph) is graph

    def test_input_scale_targets_unit_first_layer_outputs(self):
        assert calibrated_input_scale(np.array([[3.0, 4.0]])) == pytest.approx(0.14)

    def test_input_scale_is_capped_for_tiny_features(self):
        assert calibrated_input_scale(np.array([[1e-4, 0.0]])) == 2.5

    def test_input_scale_of_zero_features_is_none(self):
        assert calibrated_input_scale(np.zeros((4, 3))) is None


class TestBaselines:
    def test_catalogue_names(self):
        assert set(BASELINES) == {"graphsage", "graphsage-v2", "gat", "gat-v2",
                                  "jknet", "jknet-v2"}

    def test_published_shapes(self):
        assert BASELINES["graphsage"].channels == 16
        assert BASELINES["graphsage-v2"].channels == 512
        assert BASELINES["gat"].channels == 32
        assert BASELINES["gat-v2"].channels == 64
        assert BASELINES["jknet-v2"].channels == 512
        assert all(spec.layers == 2 for spec in BASELINES.values())

    def test_gat_baseline_uses_attention(self):
        spec = BASELINES["gat"]
        assert spec.attention == "gat" and spec.activation == "elu"

    def test_jumping_network_routes_all_outputs_into_last_block(self):
        assert BASELINES["jknet"].routes(2) == ((0,), (0, 1))
        assert BASELINES["jknet"].routes(3) == ((0,), (1,), (0, 1, 2))
        assert BASELINES["graphsage"].routes(3) == ((0,), (1,), (2,))


class TestQuantResolution:
    def test_none_and_float_mean_unquantised(self):
        assert resolve_quantisation(None, 2) is None
        assert resolve_quantisation("float", 2) is None

    def test_uniform_pair_covers_every_site(self):
        q = resolve_quantisation("w4a8", 2)
        assert set(q) == set(quant_site_names(2))
        assert all(pair == parse_pair("w4a8") for pair in q.values())

    def test_full_site_map_passes(self):
        sites = quant_site_names(1)
        q = resolve_quantisation({s: 10 for s in sites}, 1)
        assert all(q[s] == QUANT_PAIRS[10] for s in sites)

    def test_partial_or_misnamed_maps_fail(self):
        sites = quant_site_names(2)
        with pytest.raises(ValueError, match="cover"):
            resolve_quantisation({sites[0]: 3}, 2)
        with pytest.raises(ValueError, match="unknown"):
            resolve_quantisation({"block9/quant/linear": 3}, 2)
        with pytest.raises(ValueError, match="float"):
            resolve_quantisation({s: "float" for s in sites}, 2)


class TestGraphNetClassifier:
    def fitted(self, graph, **kw):
        params = dict(architecture="graphsage", channels=8, epochs=60,
                      patience=15, seed=0)
        params.update(kw)
        return GraphNetClassifier(**params).fit(graph)

    def test_fit_learns_above_chance(self, graph):
        clf = self.fitted(graph, lr=0.02, epochs=150, patience=30)
        assert clf.score(graph) > 0.5  # 4 classes, chance = 0.25

    def test_best_weights_are_restored(self, graph):
        clf = self.fitted(graph)
        assert clf.score(graph, graph.val_mask) == pytest.approx(
            clf.best_val_accuracy_)

    def test_fit_is_deterministic(self, graph):
        a = self.fitted(graph)
        b = self.fitted(graph)
        assert np.array_equal(a.predict_proba(graph), b.predict_proba(graph))
        assert a.history_ == b.history_

    def test_predictions_have_classifier_shapes(self, graph):
        clf = self.fitted(graph)
        proba = clf.predict_proba(graph)
        assert proba.shape == (graph.n, 4)
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-9)
        pred = clf.predict(graph)
        assert pred.shape == (graph.n,)
        assert set(pred) <= set(range(4))
        assert np.array_equal(pred, proba.argmax(axis=1))

    def test_quantised_variant_shrinks_the_model(self, graph):
        fl = self.fitted(graph, epochs=5)
        q = self.fitted(graph, epochs=5, quantisation="w4a8")
        assert q.model_bytes_ * 8 == fl.model_bytes_
        assert q.buffer_bytes_ < fl.buffer_bytes_

    def test_early_stopping_cuts_training_short(self, graph):
        clf = self.fitted(graph, epochs=500, patience=2)
        assert len(clf.history_) < 500
        assert clf.best_epoch_ <= len(clf.history_) - 1

    def test_searched_choices_can_be_fitted_directly(self, graph):
        blocks = (ArchChoice("cos", "tanh", "mean", 2), ArchChoice())
        choices = Choices(blocks, ((0,), (0, 1)),
                          {s: QUANT_PAIRS[12] for s in quant_site_names(2)})
        clf = GraphNetClassifier(architecture=choices, channels=8, epochs=10,
                                 seed=1).fit(graph)
        assert clf.choices_ == choices
        assert clf.net_.n_layers == 2

    def test_layers_conflicting_with_choices_raise(self, graph):
        choices = Choices((ArchChoice(),), ((0,),), None)
        with pytest.raises(ValueError, match="layers"):
            GraphNetClassifier(architecture=choices, layers=3).fit(graph)

    def test_unknown_architecture_raises(self, graph):
        with pytest.raises(ValueError, match="unknown architecture"):
            GraphNetClassifier(architecture="resnet").fit(graph)

    def test_unfitted_predict_raises(self, graph):
        with pytest.raises(RuntimeError, match="not fitted"):
            GraphNetClassifier().predict(graph)

    def test_multihot_targets_use_micro_f1(self):
        g = multihot_graph()
        clf = GraphNetClassifier(architecture="graphsage", channels=8,
                                 epochs=30, seed=0).fit(g)
        pred = clf.predict(g)
        assert pred.shape == (g.n, 3)
        assert set(np.unique(pred)) <= {0, 1}
        assert 0.0 <= clf.score(g) <= 1.0
        proba = clf.predict_proba(g)
        assert np.all((proba >= 0) & (proba <= 1))

    def test_sklearn_protocol_round_trip(self, graph):
        clf = GraphNetClassifier(architecture="gat", channels=8, epochs=3)
        cloned = clone(clf)
        assert cloned.get_params() == clf.get_params()
        cloned.set_params(epochs=5)
        assert cloned.epochs == 5 and clf.epochs == 3


class TestArchitectureSearch:
    def searcher(self, **kw):
        params = dict(layers=1, channels=4, epochs=4, arch_start=2,
                      quant_start=1, inner_steps=1, seed=0)
        params.update(kw)
        return ArchitectureSearch(**params)

    def test_fit_exposes_the_discovered_configuration(self, graph):
        s = self.searcher().fit(graph)
        assert len(s.search_log_) == 5
        assert len(s.architecture_) == 1
        block = s.architecture_[0]
        assert set(block) == {"attention", "activation", "aggregation", "expansion"}
        assert ArchChoice(**block) == s.choices_.blocks[0]
        assert set(s.quantisation_) == set(quant_site_names(1))
        for name in s.quantisation_.values():
            assert parse_pair(name) is not None
        assert s.model_bytes_ > 0 and s.buffer_bytes_ > 0
        assert s.routes_ == [list(r) for r in s.choices_.routes]

    def test_search_is_deterministic(self, graph):
        a = self.searcher().fit(graph)
        b = self.searcher().fit(graph)
        assert a.choices_ == b.choices_

    def test_best_estimator_trains_the_found_network(self, graph):
        s = self.searcher(final_epochs=8).fit(graph)
        clf = s.best_estimator()
        assert clf.architecture == s.choices_
        clf.fit(graph)
        assert clf.predict(graph).shape == (graph.n,)
        assert clf.model_bytes_ == s.model_bytes_  # same choices, same bytes

    def test_unfitted_best_estimator_raises(self):
        with pytest.raises(RuntimeError, match="not fitted"):
            self.searcher().best_estimator()

    def test_sklearn_protocol(self):
        s = self.searcher()
        assert clone(s).get_params() == s.get_params()


class TestTrainSampled:
    def test_restores_best_and_reports_history(self, graph):
        net = SuperNet(graph.num_features, 8, graph.n_classes, 1, seed=0)
        ch = Choices((ArchChoice(),), ((0,),), None)
        out = train_sampled(net, graph, ch, lr=0.01, epochs=25, patience=50, seed=0)
        assert len(out["history"]) == 25
        assert out["best_val_accuracy"] == pytest.approx(
            net.evaluate(graph, ch, graph.val_mask))
        assert out["history"][out["best_epoch"]]["val_accuracy"] == pytest.approx(
            out["best_val_accuracy"])
