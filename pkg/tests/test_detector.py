import numpy as np
import pytest

from graphshield import behavior, detector, graphdata
from graphshield.behavior import AttributeParams
from graphshield.errors import ConfigError, ShapeError


def toy_sample(seed=0, label=1):
    """A 6-node sample (layers 3-2-1, width 5) for cheap gradient checks."""
    rng = np.random.default_rng(seed)
    graph = behavior.BehaviorGraph(
        [3, 2, 1], [rng.uniform(0.1, 1.0, 3), rng.uniform(0.1, 1.0, 2), rng.uniform(0.1, 1.0, 1)]
    )
    return graphdata.GraphSample(
        attributes=rng.uniform(-1.0, 1.0, (6, 5)),
        adjacency=behavior.adjacency(graph),
        label=label,
        provenance="toy",
    )


@pytest.fixture(scope="module")
def mini_sets(graph_dataset):
    train, test = graphdata.split(graph_dataset, 0.8, seed=3)
    small = lambda ds, n: graphdata.GraphDataset(
        ds.samples[:n], ds.params, list(ds.layer_sizes)
    )
    return small(train, 16), small(test, 8)


class TestNormalizeAdjacency:
    def test_single_self_loop(self):
        a_hat = detector.normalize_adjacency(np.array([[1]], dtype=np.uint8))
        assert np.allclose(a_hat, [[1.0]])

    def test_two_node_edge(self):
        a_hat = detector.normalize_adjacency(np.array([[0, 1], [0, 0]], dtype=np.uint8))
        # symmetrize + self-loops gives degree 2 everywhere
        assert np.allclose(a_hat, 0.5)

    def test_symmetric_output(self):
        rng = np.random.default_rng(0)
        ad = (rng.random((7, 7)) < 0.3).astype(np.uint8)
        a_hat = detector.normalize_adjacency(ad)
        assert np.allclose(a_hat, a_hat.T)

    def test_rows_of_isolated_node(self):
        ad = np.zeros((3, 3), dtype=np.uint8)
        a_hat = detector.normalize_adjacency(ad)
        assert np.allclose(a_hat, np.eye(3))

    def test_cache_returns_identical_array(self):
        ad = (np.random.default_rng(5).random((4, 4)) < 0.5).astype(np.uint8)
        assert detector.normalize_adjacency(ad) is detector.normalize_adjacency(ad.copy())

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError):
            detector.normalize_adjacency(np.zeros((2, 3), dtype=np.uint8))


class TestForward:
    def test_gcn_layer_closed_form(self):
        w = np.array([[0.5]])
        h = np.array([[0.8]])
        a_hat = np.array([[1.0]])
        out = detector.gcn_forward(w, np.array([0.1]), a_hat, h)
        assert np.allclose(out, np.tanh(0.8 * 0.5 + 0.1))

    def test_gcn_shape_mismatch(self):
        with pytest.raises(ShapeError):
            detector.gcn_forward(np.zeros((3, 2)), np.zeros(2), np.eye(4), np.zeros((4, 4)))

    def test_output_shape_and_range(self, graph_dataset):
        model = detector.init_detector(98, 5, seed=0)
        out = detector.detector_forward(model, graph_dataset.samples[0])
        assert out.shape == (2,)
        assert np.all((out > 0.0) & (out < 1.0))

    def test_internal_shapes(self, graph_dataset):
        model = detector.init_detector(98, 5, seed=0)
        _, cache = detector._forward(model, graph_dataset.samples[0], with_cache=True)
        assert cache["hcat"].shape == (98, 97)
        assert cache["c1"].shape == (98, 16)
        assert cache["c2"].shape == (94, 32)
        assert cache["flat"].shape == (94 * 32,)

    def test_pointwise_conv_locality(self):
        # stride == kernel: perturbing one node's features only moves that
        # node's row of the first conv output
        model = detector.init_detector(6, 5, seed=2)
        base = toy_sample(seed=3)
        _, cache_a = detector._forward(model, base, with_cache=True)
        bumped = graphdata.GraphSample(
            base.attributes.copy(), base.adjacency, base.label, base.provenance
        )
        # gcn layers mix rows, so compare conv1 applied to the same hcat rows
        hcat = cache_a["hcat"].copy()
        hcat[2] += 1.0
        z1 = hcat @ model.params["conv1_w"] + model.params["conv1_b"]
        changed = np.any(z1 != cache_a["z1"], axis=1)
        assert changed[2] and not np.any(np.delete(changed, 2))

    def test_wrong_sample_shape_rejected(self):
        model = detector.init_detector(6, 5, seed=0)
        base = toy_sample()
        narrow = graphdata.GraphSample(
            base.attributes[:, :4], base.adjacency, base.label, base.provenance
        )
        with pytest.raises(ShapeError):
            detector.detector_forward(model, narrow)


class TestLossAndGradients:
    def test_loss_of_perfect_prediction_small(self):
        assert detector.sample_loss(np.array([0.999999, 1e-6]), 0) < 1e-5
        assert detector.sample_loss(np.array([1e-6, 0.999999]), 1) < 1e-5

    def test_loss_symmetric_in_label(self):
        out = np.array([0.3, 0.7])
        assert detector.sample_loss(out, 1) == detector.sample_loss(out[::-1], 0)

    def test_gradients_match_finite_differences(self):
        model = detector.init_detector(6, 5, seed=11)
        sample = toy_sample(seed=7, label=1)
        loss, grads = detector.loss_and_grads(model, sample)
        assert np.isfinite(loss)
        rng = np.random.default_rng(13)
        h = 1e-6
        for name, g in grads.items():
            flat_g = g.ravel()
            param = model.params[name].ravel()
            picks = rng.choice(len(flat_g), size=min(5, len(flat_g)), replace=False)
            for idx in picks:
                orig = param[idx]
                param[idx] = orig + h
                up, _ = detector._forward(model, sample, with_cache=True)
                lo_plus = detector.sample_loss(up, sample.label)
                param[idx] = orig - h
                down, _ = detector._forward(model, sample, with_cache=True)
                lo_minus = detector.sample_loss(down, sample.label)
                param[idx] = orig
                fd = (lo_plus - lo_minus) / (2 * h)
                # absolute floor absorbs FD noise on near-zero gradients
                tol = 1e-8 + 1e-4 * max(abs(fd), abs(flat_g[idx]))
                assert abs(fd - flat_g[idx]) <= tol, (name, idx, fd, flat_g[idx])


class TestTraining:
    def test_zero_epochs_keeps_initial_params(self, mini_sets):
        train, test = mini_sets
        model = detector.init_detector(98, 5, seed=1)
        trained, history = detector.train_detector(
            model, train, test, detector.DetectorTrainConfig(epochs=0)
        )
        assert history == []
        for k in model.params:
            assert np.array_equal(trained.params[k], model.params[k])

    def test_same_seed_identical_history(self, mini_sets):
        train, test = mini_sets
        cfg = detector.DetectorTrainConfig(epochs=3, seed=4)
        runs = []
        for _ in range(2):
            model = detector.init_detector(98, 5, seed=1)
            _, history = detector.train_detector(model, train, test, cfg)
            runs.append(history)
        assert runs[0] == runs[1]

    def test_overfits_small_set(self, mini_sets):
        train, test = mini_sets
        model = detector.init_detector(98, 5, seed=1)
        trained, history = detector.train_detector(
            model, train, test, detector.DetectorTrainConfig(epochs=30, seed=2)
        )
        _, train_acc = detector.dataset_metrics(trained, train)
        assert train_acc >= 0.9
        assert history[-1]["train_loss"] < history[0]["train_loss"]

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigError):
            detector.DetectorTrainConfig(learning_rate=0.0).validate()


class TestEvaluate:
    def test_confusion_matches_recount(self, mini_sets):
        train, test = mini_sets
        model = detector.init_detector(98, 5, seed=1)
        trained, _ = detector.train_detector(
            model, train, test, detector.DetectorTrainConfig(epochs=3, seed=0)
        )
        report = detector.evaluate(trained, test)
        confusion = {"tn": 0, "fp": 0, "fn": 0, "tp": 0}
        for sample in test.samples:
            pred = int(np.argmax(detector.detector_forward(trained, sample)))
            key = [["tn", "fp"], ["fn", "tp"]][sample.label][pred]
            confusion[key] += 1
        assert report.confusion == confusion
        assert sum(confusion.values()) == report.count == len(test)
        assert report.accuracy == (confusion["tp"] + confusion["tn"]) / len(test)

    def test_per_provenance_covers_all_kinds(self, mini_sets):
        _, test = mini_sets
        model = detector.init_detector(98, 5, seed=1)
        report = detector.evaluate(model, test)
        kinds = {s.provenance.split(":")[0] for s in test.samples}
        assert set(report.per_provenance) == kinds

    def test_empty_dataset_rejected(self, graph_dataset):
        empty = graphdata.GraphDataset([], graph_dataset.params, list(graph_dataset.layer_sizes))
        with pytest.raises(ConfigError):
            detector.evaluate(detector.init_detector(98, 5, seed=0), empty)

    def test_argmax_tie_prefers_clean(self):
        assert int(np.argmax(np.array([0.5, 0.5]))) == 0


class TestAblation:
    def test_mask_zeroes_excluded_columns(self, graph_dataset):
        masked = detector.mask_dataset(graph_dataset, [0])
        for s in masked.samples[:3]:
            assert np.all(s.attributes[:, 1:] == 0.0)
        orig = graph_dataset.samples[0].attributes[:, 0]
        assert np.array_equal(masked.samples[0].attributes[:, 0], orig)

    def test_mask_unknown_column_rejected(self, graph_dataset):
        with pytest.raises(ConfigError):
            detector.mask_dataset(graph_dataset, [99])

    def test_full_subset_reproduces_baseline(self, mini_sets):
        train, test = mini_sets
        cfg = detector.DetectorTrainConfig(epochs=2, seed=6)
        reports = detector.ablate(train, test, cfg, seed=1, subsets=["all"])
        model = detector.init_detector(98, 5, seed=1, fingerprint=train.fingerprint)
        baseline, _ = detector.train_detector(model, train, test, cfg)
        expected = detector.evaluate(baseline, test)
        assert reports["all"].loss == expected.loss
        assert reports["all"].confusion == expected.confusion

    def test_none_subset_runs(self, mini_sets):
        train, test = mini_sets
        cfg = detector.DetectorTrainConfig(epochs=1, seed=6)
        reports = detector.ablate(train, test, cfg, seed=1, subsets=["none"])
        assert 0.0 <= reports["none"].accuracy <= 1.0

    def test_unknown_subset_rejected(self, mini_sets):
        train, test = mini_sets
        with pytest.raises(ConfigError):
            detector.ablate(
                train, test, detector.DetectorTrainConfig(epochs=1), 1, subsets=["bogus"]
            )

    def test_subset_definitions(self):
        subsets = detector.ablation_subsets(2)
        assert subsets["all"] == [0, 1, 2, 3, 4]
        assert subsets["specialization"] == [3, 4]
        assert subsets["none"] == []


class TestPersistence:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = detector.init_detector(6, 5, seed=3, fingerprint="deadbeef")
        model.history = [{"epoch": 0, "train_loss": 0.5}]
        path = tmp_path / "det.json"
        detector.save_detector(model, path)
        loaded = detector.load_detector(path)
        assert loaded.node_count == 6 and loaded.feature_width == 5
        assert loaded.fingerprint == "deadbeef"
        assert loaded.history == model.history
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])

    def test_forward_identical_after_roundtrip(self, tmp_path):
        model = detector.init_detector(6, 5, seed=3)
        sample = toy_sample(seed=1)
        path = tmp_path / "det.json"
        detector.save_detector(model, path)
        loaded = detector.load_detector(path)
        assert np.array_equal(
            detector.detector_forward(model, sample),
            detector.detector_forward(loaded, sample),
        )

    def test_version_check(self, tmp_path):
        path = tmp_path / "det.json"
        path.write_text('{"format_version": 99}')
        with pytest.raises(ConfigError):
            detector.load_detector(path)

    def test_history_csv_header(self):
        csv = detector.history_to_csv(
            [{"epoch": 0, "train_loss": 0.5, "train_accuracy": 0.5, "test_loss": 0.6, "test_accuracy": 0.5}]
        )
        lines = csv.strip().split("\n")
        assert lines[0] == "epoch,train_loss,train_accuracy,test_loss,test_accuracy"
        assert len(lines) == 2
