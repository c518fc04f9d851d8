import numpy as np
import pytest
from helpers import er_graph, two_cluster_split, two_cluster_toy

from hmsf import models
from hmsf import tensorcore as tc
from hmsf.graphdata import Graph, Split, build_neighborhoods


def fixed_graph(seed=0, n=6, feature_dim=4, num_classes=3, p=0.5):
    return er_graph(n, p, seed, num_classes=num_classes, feature_dim=feature_dim)


def dense_softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestGcnForward:
    def test_matches_dense_evaluation(self):
        # independent oracle: numpy dense pipeline with no tape machinery
        g = fixed_graph(seed=3, n=5)
        rng = np.random.default_rng(0)
        params = models.init_gcn(rng, g.num_features, 4, g.num_classes)
        op = tc.gcn_normalize(g)
        probs, _ = models.gcn_forward(params, op, g.features)
        a = op.todense()
        h1 = np.maximum(a @ g.features @ params.weights[0].value, 0.0)
        logits = a @ h1 @ params.weights[1].value
        assert np.allclose(probs, dense_softmax(logits), atol=1e-12)

    def test_single_isolated_node_identity_weights(self):
        x = np.array([[0.3, 1.2]])
        g = Graph.build(1, [], x, labels=[0], num_classes=2)
        params = models.GcnParams(weights=[tc.parameter(np.eye(2)), tc.parameter(np.eye(2))])
        probs, _ = models.gcn_forward(params, tc.gcn_normalize(g), g.features)
        assert np.allclose(probs, dense_softmax(x))

    def test_zero_features_give_uniform_rows(self):
        g = Graph.build(4, [(0, 1), (2, 3)], np.zeros((4, 3)), labels=[0, 1, 0, 1], num_classes=2)
        params = models.init_gcn(np.random.default_rng(1), 3, 4, 2)
        probs, _ = models.gcn_forward(params, tc.gcn_normalize(g), g.features)
        assert np.allclose(probs, 0.5)

    def test_permutation_equivariance(self):
        g = fixed_graph(seed=5, n=7)
        rng = np.random.default_rng(2)
        params = models.init_gcn(rng, g.num_features, 4, g.num_classes)
        perm = np.random.default_rng(3).permutation(g.num_nodes)
        inv = np.argsort(perm)
        remapped = [(int(inv[u]), int(inv[v])) for u, v in g.edges]
        g2 = Graph.build(
            g.num_nodes, remapped, g.features[perm], labels=g.labels[perm], num_classes=g.num_classes
        )
        p1, _ = models.gcn_forward(params, tc.gcn_normalize(g), g.features)
        p2, _ = models.gcn_forward(params, tc.gcn_normalize(g2), g2.features)
        assert np.allclose(p2, p1[perm], atol=1e-12)


class TestH2gcnForward:
    def test_classifier_width(self):
        p1 = models.init_h2gcn(np.random.default_rng(0), 5, 4, 3, rounds=1)
        p2 = models.init_h2gcn(np.random.default_rng(0), 5, 4, 3, rounds=2)
        assert p1.w_class.value.shape[0] == 3 * 4
        assert p2.w_class.value.shape[0] == 7 * 4

    def test_matches_dense_evaluation(self):
        g = fixed_graph(seed=7, n=6)
        params = models.init_h2gcn(np.random.default_rng(4), g.num_features, 3, g.num_classes, 1)
        hoods = build_neighborhoods(g)
        s1, s2 = tc.h2gcn_normalize(hoods, 1), tc.h2gcn_normalize(hoods, 2)
        probs, _ = models.h2gcn_forward(params, s1, s2, g.features, activation="relu")
        r0 = np.maximum(g.features @ params.w_embed.value, 0.0)
        r1 = np.concatenate([s1.todense() @ r0, s2.todense() @ r0], axis=1)
        final = np.concatenate([r0, r1], axis=1)
        assert np.allclose(probs, dense_softmax(final @ params.w_class.value), atol=1e-12)

    def test_triangle_without_two_hop_neighbors(self):
        g = Graph.build(3, [(0, 1), (1, 2), (0, 2)], np.eye(3), labels=[0, 1, 0], num_classes=2)
        hoods = build_neighborhoods(g)
        s1, s2 = tc.h2gcn_normalize(hoods, 1), tc.h2gcn_normalize(hoods, 2)
        params = models.init_h2gcn(np.random.default_rng(5), 3, 2, 2, 1)
        probs, _ = models.h2gcn_forward(params, s1, s2, g.features)
        assert np.allclose(probs.sum(axis=1), 1.0)
        # zeroing the S2 block of the classifier changes nothing: those
        # columns of the final representation are identically zero
        clone = models.H2gcnParams(
            w_embed=tc.parameter(params.w_embed.value.copy()),
            w_class=tc.parameter(params.w_class.value.copy()),
            rounds=1,
        )
        clone.w_class.value[4:6, :] = 0.0
        probs2, _ = models.h2gcn_forward(clone, s1, s2, g.features)
        assert np.allclose(probs, probs2, atol=1e-15)

    def test_permutation_equivariance(self):
        g = fixed_graph(seed=8, n=7)
        params = models.init_h2gcn(np.random.default_rng(6), g.num_features, 3, g.num_classes, 2)
        perm = np.random.default_rng(9).permutation(g.num_nodes)
        inv = np.argsort(perm)
        g2 = Graph.build(
            g.num_nodes,
            [(int(inv[u]), int(inv[v])) for u, v in g.edges],
            g.features[perm],
            labels=g.labels[perm],
            num_classes=g.num_classes,
        )
        h1, h2 = build_neighborhoods(g), build_neighborhoods(g2)
        p1, _ = models.h2gcn_forward(
            params, tc.h2gcn_normalize(h1, 1), tc.h2gcn_normalize(h1, 2), g.features
        )
        p2, _ = models.h2gcn_forward(
            params, tc.h2gcn_normalize(h2, 1), tc.h2gcn_normalize(h2, 2), g2.features
        )
        assert np.allclose(p2, p1[perm], atol=1e-12)


class TestMlpForward:
    def test_zero_weights_uniform(self):
        params = models.MlpParams(
            w1=tc.parameter(np.zeros((3, 4))),
            b1=tc.parameter(np.zeros(4)),
            w2=tc.parameter(np.zeros((4, 2))),
            b2=tc.parameter(np.zeros(2)),
        )
        probs, _ = models.mlp_forward(params, np.random.default_rng(0).standard_normal((5, 3)))
        assert np.allclose(probs, 0.5)

    def test_hand_evaluated_2x3x2(self):
        w1 = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, -0.5]])
        b1 = np.array([0.1, -0.2, 0.0])
        w2 = np.array([[1.0, 0.0], [-1.0, 1.0], [0.5, 0.5]])
        b2 = np.array([0.0, 0.3])
        params = models.MlpParams(
            w1=tc.parameter(w1), b1=tc.parameter(b1), w2=tc.parameter(w2), b2=tc.parameter(b2)
        )
        x = np.array([[1.0, 2.0], [-1.0, 0.5]])
        probs, _ = models.mlp_forward(params, x)
        hidden = np.maximum(x @ w1 + b1, 0.0)
        assert np.allclose(probs, dense_softmax(hidden @ w2 + b2), atol=1e-14)

    def test_row_permutation_only_permutes_rows(self):
        params = models.init_mlp(np.random.default_rng(1), 4, 5, 3)
        x = np.random.default_rng(2).standard_normal((6, 4))
        perm = np.array([3, 1, 5, 0, 2, 4])
        p1, _ = models.mlp_forward(params, x)
        p2, _ = models.mlp_forward(params, x[perm])
        assert np.allclose(p2, p1[perm])


class TestRowStochastic:
    @pytest.mark.parametrize("kind", ["gcn", "h2gcn", "mlp"])
    def test_outputs_are_row_stochastic(self, kind):
        g = fixed_graph(seed=10, n=9)
        cfg = models.TrainConfig(model_kind=kind, hidden_dim=4, layers=2 if kind != "h2gcn" else 1)
        params, forward = models.build_model(g, cfg, np.random.default_rng(0))
        probs, _ = forward(None, None, False)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9
        assert np.all(probs >= 0)


class TestTraining:
    def test_two_cluster_toy_reaches_high_accuracy(self):
        g = two_cluster_toy()
        split = two_cluster_split()
        for kind in ("gcn", "h2gcn"):
            cfg = models.TrainConfig(
                model_kind=kind, hidden_dim=8, max_epochs=200, patience=200, seed=1, layers=1
            )
            params, report = models.train_supervised(g, split, cfg)
            assert report.test_accuracy >= 0.95
            # mean CE below ln(2)/|train| forces every train node correct
            # in a 2-class problem, so train accuracy hit 1.0 at some epoch
            assert min(report.train_loss) < np.log(2) / len(split.train)

    def test_patience_zero_stops_after_first_non_improving_epoch(self):
        g = two_cluster_toy()
        cfg = models.TrainConfig(
            model_kind="gcn", hidden_dim=4, lr=0.0, max_epochs=50, patience=0, seed=0
        )
        _, report = models.train_supervised(g, two_cluster_split(), cfg)
        # lr=0 freezes the network, so epoch 2 cannot improve on epoch 1
        assert report.final_epoch == 2
        assert report.best_val_loss_epoch == 1

    def test_early_stop_within_patience(self):
        g = two_cluster_toy()
        cfg = models.TrainConfig(
            model_kind="gcn", hidden_dim=8, max_epochs=400, patience=10, seed=3
        )
        _, report = models.train_supervised(g, two_cluster_split(), cfg)
        assert report.final_epoch - report.best_val_loss_epoch <= 10
        assert report.best_val_epoch <= report.final_epoch

    def test_deterministic_given_seed(self):
        g = two_cluster_toy()
        cfg = models.TrainConfig(
            model_kind="h2gcn", hidden_dim=6, max_epochs=60, patience=60, seed=5, dropout=0.5, layers=1
        )
        p1, r1 = models.train_supervised(g, two_cluster_split(), cfg)
        p2, r2 = models.train_supervised(g, two_cluster_split(), cfg)
        assert r1.train_loss == r2.train_loss
        assert r1.val_accuracy == r2.val_accuracy
        assert r1.test_accuracy == r2.test_accuracy
        assert np.array_equal(p1.w_embed.value, p2.w_embed.value)

    def test_empty_train_set_rejected(self):
        g = two_cluster_toy()
        split = Split(
            train=np.array([], dtype=int),
            val=np.array([1, 11]),
            test=np.array([2, 12]),
            seed=0,
            scheme="h2gcn_48_20_32",
        )
        with pytest.raises(ValueError):
            models.train_supervised(g, split, models.TrainConfig(model_kind="gcn"))


class TestEvaluate:
    def test_one_hot_is_perfect(self):
        labels = np.array([0, 2, 1])
        assert models.evaluate(tc.one_hot(labels, 3), labels, np.arange(3)) == 1.0

    def test_uniform_ties_break_to_class_zero(self):
        labels = np.array([0, 1, 0, 1])
        pred = np.full((4, 2), 0.5)
        assert models.evaluate(pred, labels, np.arange(4)) == 0.5

    def test_hand_counted_case(self):
        pred = np.array(
            [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7], [0.5, 0.5]]
        )
        labels = np.array([0, 0, 1, 1, 0])
        # argmax: 0 1 0 1 0 -> correct on nodes 0, 3, 4
        assert models.evaluate(pred, labels, np.arange(5)) == pytest.approx(3 / 5)

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            models.evaluate(np.ones((2, 2)), np.zeros(2, dtype=int), np.array([], dtype=int))


class TestGridSearch:
    BASE = {"hidden_dim": 6, "max_epochs": 40, "patience": 40, "seed": 0}

    def test_singleton_grid_returns_that_config(self):
        g = two_cluster_toy()
        cfg = models.grid_search(
            g,
            two_cluster_split(),
            "gcn",
            {"dropout": (0.25,), "weight_decay": (0.001,)},
            base=self.BASE,
        )
        assert cfg.dropout == 0.25 and cfg.weight_decay == 0.001

    def test_picks_validation_argmax_with_first_tie(self):
        g = two_cluster_toy()
        split = two_cluster_split()
        grids = {"dropout": (0.0, 0.9), "weight_decay": (0.0005,)}
        log = []
        chosen = models.grid_search(g, split, "gcn", grids, base=self.BASE, log=log)
        scores = [rec["val_accuracy"] for rec in log]
        best = max(scores)
        first_best = scores.index(best)
        assert log[first_best]["config"]["dropout"] == chosen.dropout
        assert len(log) == 2

    def test_deterministic(self):
        g = two_cluster_toy()
        grids = {"dropout": (0.0, 0.5), "weight_decay": (0.0005, 0.00001)}
        a = models.grid_search(g, two_cluster_split(), "gcn", grids, base=self.BASE)
        b = models.grid_search(g, two_cluster_split(), "gcn", grids, base=self.BASE)
        assert a == b

    def test_h2gcn_grid_enumerates_activation_and_depth(self):
        cands = models.grid_candidates("h2gcn", None, {"seed": 1})
        assert len(cands) == 2 * 2 * 2 * 2
        assert {c.activation for c in cands} == {"relu", "none"}
        assert {c.layers for c in cands} == {1, 2}

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            models.grid_search(
                two_cluster_toy(), two_cluster_split(), "gcn", {"dropout": ()}, base=self.BASE
            )


class TestCheckpoints:
    @pytest.mark.parametrize("kind,layers", [("gcn", 2), ("h2gcn", 1), ("mlp", 2)])
    def test_roundtrip(self, tmp_path, kind, layers):
        g = two_cluster_toy()
        cfg = models.TrainConfig(
            model_kind=kind, hidden_dim=4, max_epochs=10, patience=10, seed=2, layers=layers
        )
        params, _ = models.train_supervised(g, two_cluster_split(), cfg)
        path = tmp_path / "ckpt.json"
        models.save_checkpoint(path, kind, params, cfg)
        payload = models.load_checkpoint(path)
        loaded, loaded_cfg = models.params_from_checkpoint(payload)
        assert loaded_cfg == cfg
        before = models.predict(g, kind, params, cfg)
        after = models.predict(g, kind, loaded, loaded_cfg)
        assert np.allclose(before, after, atol=1e-15)

    def test_version_gate(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format_version": 999}')
        with pytest.raises(ValueError):
            models.load_checkpoint(path)
