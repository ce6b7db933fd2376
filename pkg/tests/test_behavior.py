import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphshield import behavior, nncore
from graphshield.behavior import AttributeParams, BehaviorGraph
from graphshield.errors import ConfigError, DomainError, ShapeError

from conftest import random_behavior_graph


def graph_from_arrays(*layers):
    layers = [np.asarray(v, dtype=np.float64) for v in layers]
    return BehaviorGraph([len(v) for v in layers], layers)


@st.composite
def behavior_graphs(draw):
    n_layers = draw(st.integers(2, 4))
    sizes = draw(st.lists(st.integers(1, 6), min_size=n_layers, max_size=n_layers))
    layers = []
    for size in sizes:
        vals = draw(
            st.lists(
                st.one_of(st.just(0.0), st.floats(0.0, 10.0, allow_nan=False)),
                min_size=size,
                max_size=size,
            )
        )
        layers.append(np.array(vals))
    return BehaviorGraph(sizes, layers)


class TestExtraction:
    def test_default_shape_node_count(self, small_task):
        graph = behavior.extract_behavior_graph(
            small_task["net"], small_task["extractor"].transform(small_task["test"].images[0])
        )
        assert graph.node_count == 98
        assert graph.layer_sizes == [64, 32, 2]

    def test_zero_features_relu(self):
        net = nncore.init_network([4, 3, 2], ["relu", "relu"], seed=0)
        graph = behavior.extract_behavior_graph(net, np.zeros(4))
        assert np.array_equal(graph.activations[0], np.zeros(4))

    def test_matches_forward_trace_bitwise(self, small_task):
        f = small_task["extractor"].transform(small_task["test"].images[3])
        graph = behavior.extract_behavior_graph(small_task["net"], f)
        trace = nncore.forward_trace(small_task["net"], f)
        for a, b in zip(graph.activations, trace.activations):
            assert np.array_equal(a, b)


class TestNormalization:
    def test_forced_arithmetic(self):
        graph = graph_from_arrays([2.0, 2.0, 4.0], [1.0])
        alpha = behavior.normalize_activations(graph)
        assert np.allclose(alpha[0], [0.25, 0.25, 0.5])

    def test_dead_layer_stays_zero(self):
        graph = graph_from_arrays([0.0, 0.0], [1.0])
        alpha = behavior.normalize_activations(graph)
        assert np.array_equal(alpha[0], [0.0, 0.0])

    def test_negative_activation_rejected(self):
        graph = graph_from_arrays([1.0, -0.5], [1.0])
        with pytest.raises(DomainError):
            behavior.normalize_activations(graph)

    @given(behavior_graphs())
    @settings(max_examples=200, deadline=None)
    def test_layer_sums_zero_or_one(self, graph):
        for alpha in behavior.normalize_activations(graph):
            total = np.sum(alpha)
            assert abs(total) < 1e-9 or abs(total - 1.0) < 1e-9
            assert np.all(alpha >= 0.0) and np.all(alpha <= 1.0 + 1e-12)


class TestImpact:
    def test_forced_arithmetic(self):
        # alpha_n = 0.5 with previous-layer mean 0.2 -> impact 0.3
        graph = graph_from_arrays([4.0, 1.0, 0.0, 0.0, 0.0], [1.0, 1.0])
        alpha = behavior.normalize_activations(graph)
        iota = behavior.impact(graph, alpha)
        # second layer neurons: alpha 0.5 each, previous mean = 1/5
        assert np.allclose(iota[5:], 0.5 - 0.2)

    def test_uniform_network_zero_hidden_impact(self):
        graph = graph_from_arrays([1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [5.0, 5.0, 5.0])
        alpha = behavior.normalize_activations(graph)
        iota = behavior.impact(graph, alpha)
        assert np.allclose(iota[3:], 0.0, atol=1e-12)

    @given(behavior_graphs())
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, graph):
        alpha = behavior.normalize_activations(graph)
        iota = behavior.impact(graph, alpha)
        assert np.all(iota >= -1.0 - 1e-12) and np.all(iota <= 1.0 + 1e-12)


class TestInfluence:
    def test_decision_rule(self):
        marks = behavior.influence([np.array([0.4, 0.3, 0.2, 0.1])], 0.5)
        assert np.array_equal(marks, [1, 1, 0, 0])

    def test_p_zero_marks_nothing(self):
        marks = behavior.influence([np.array([0.4, 0.3, 0.2, 0.1])], 0.0)
        assert np.array_equal(marks, [0, 0, 0, 0])

    def test_single_dominant_neuron(self):
        marks = behavior.influence([np.array([1.0, 0.0, 0.0])], 0.5)
        assert np.array_equal(marks, [1, 0, 0])

    @given(behavior_graphs(), st.floats(0.001, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_minimal_prefix(self, graph, p):
        alpha = behavior.normalize_activations(graph)
        marks = behavior.influence(alpha, p)
        offset = 0
        for vec in alpha:
            layer_marks = marks[offset : offset + len(vec)]
            offset += len(vec)
            mass = float(np.sum(vec[layer_marks == 1]))
            if np.sum(layer_marks) == 0:
                # nothing marked only when the layer cannot reach p
                assert np.sum(vec) < p - 1e-12 or p == 0
            else:
                assert mass >= p - 1e-12
                # dropping the weakest marked neuron falls below p
                weakest = np.min(vec[layer_marks == 1])
                assert mass - weakest < p

    @given(behavior_graphs(), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_p(self, graph, p1, p2):
        lo, hi = sorted((p1, p2))
        alpha = behavior.normalize_activations(graph)
        small = behavior.influence(alpha, lo)
        large = behavior.influence(alpha, hi)
        assert np.all(small <= large)


class TestInputProportion:
    def test_forced_count(self):
        graph = graph_from_arrays([0.0, 0.2, 0.0, 0.1], [1.0, 1.0])
        rho = behavior.input_proportion(graph, tau=0.0)
        assert np.allclose(rho[4:], 0.5)

    def test_sigmoid_layer_full_proportion(self, small_task):
        f = small_task["extractor"].transform(small_task["test"].images[0])
        graph = behavior.extract_behavior_graph(small_task["net"], f)
        rho = behavior.input_proportion(graph, tau=0.0)
        # sigmoid hidden layer never emits zeros, so the output layer sees all inputs
        assert np.allclose(rho[96:], 1.0)

    def test_dead_previous_layer(self):
        graph = graph_from_arrays([1.0], [0.0, 0.0], [1.0])
        rho = behavior.input_proportion(graph)
        assert np.allclose(rho[3:], 0.0)

    @given(behavior_graphs())
    @settings(max_examples=100, deadline=None)
    def test_constant_within_layer(self, graph):
        rho = behavior.input_proportion(graph)
        offset = 0
        for size in graph.layer_sizes:
            layer_vals = rho[offset : offset + size]
            offset += size
            assert np.all(layer_vals == layer_vals[0])


def brute_force_specialization(classifier, extractor, data, k):
    """Independent recount of top-k participation frequencies."""
    sizes = classifier.layer_sizes
    classes = int(max(data.labels)) + 1
    counts = [0] * classes
    freq = [np.zeros(sum(sizes)) for _ in range(classes)]
    for image, label in zip(data.images, data.labels):
        f = extractor.transform(image)
        trace = nncore.forward_trace(classifier, f)
        if trace.predicted != label:
            continue
        counts[label] += 1
        offset = 0
        for vec in trace.activations:
            ranked = sorted(range(len(vec)), key=lambda j: (-vec[j], j))
            for j in ranked[:k]:
                freq[label][offset + j] += 1
            offset += len(vec)
    return np.array([freq[c] / counts[c] for c in range(classes)])


class TestSpecialization:
    def test_single_image_top1(self):
        net = nncore.DenseNetwork(
            [nncore.DenseLayer(np.array([[0.9, 0.1], [0.0, 0.0]]), np.zeros(2), "identity")]
        )
        extractor = nncore.FeatureExtractor.identity(2)
        data = nncore.LabeledImageSet(np.array([[1.0, 0.0]]), np.array([0]))
        table = behavior.fit_specialization(net, extractor, data, k=1)
        # hidden layer activations (0.9, 0.1): neuron 0 is top-1
        assert table.values[0][2] == 1.0 and table.values[0][3] == 0.0

    def test_k_saturation(self, small_task):
        table = behavior.fit_specialization(
            small_task["net"], small_task["extractor"], small_task["train"], k=100
        )
        assert np.all(table.values == 1.0)

    def test_matches_brute_force_exactly(self, small_task, spec_table):
        oracle = brute_force_specialization(
            small_task["net"], small_task["extractor"], small_task["train"], 10
        )
        assert np.array_equal(spec_table.values, oracle)

    def test_half_frequency(self):
        # output = (x0, 0): both images predicted class 0, but the layer-0
        # top-1 neuron differs between them
        net = nncore.DenseNetwork(
            [nncore.DenseLayer(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2), "identity")]
        )
        extractor = nncore.FeatureExtractor.identity(2)
        data = nncore.LabeledImageSet(
            np.array([[0.5, 0.8], [0.8, 0.1]]), np.array([0, 0])
        )
        table = behavior.fit_specialization(net, extractor, data, k=1)
        assert table.values[0][0] == 0.5 and table.values[0][1] == 0.5

    def test_empty_class_rejected(self):
        net = nncore.DenseNetwork([nncore.DenseLayer(np.eye(2), np.zeros(2), "identity")])
        data = nncore.LabeledImageSet(np.array([[1.0, 0.0]]), np.array([1]))
        with pytest.raises(ConfigError):
            behavior.fit_specialization(net, nncore.FeatureExtractor.identity(2), data, k=1)

    def test_sigmoid_gating_never_fires(self, small_task, spec_table):
        f = small_task["extractor"].transform(small_task["test"].images[1])
        graph = behavior.extract_behavior_graph(small_task["net"], f)
        zeta = behavior.specialization(graph, spec_table, 0)
        # sigmoid layers never produce zeros; only layer-0 features can gate
        dead = graph.flat_activations() == 0.0
        assert np.array_equal(zeta[~dead], spec_table.values[0][~dead])
        assert np.all(zeta[dead] == 0.0)
        assert np.all((zeta >= 0.0) & (zeta <= 1.0))

    def test_shape_mismatch_rejected(self, spec_table):
        graph = graph_from_arrays([1.0, 1.0], [1.0])
        with pytest.raises(ShapeError):
            behavior.specialization(graph, spec_table, 0)


class TestAttributes:
    def test_width_and_rows(self, small_task, spec_table):
        f = small_task["extractor"].transform(small_task["test"].images[0])
        graph = behavior.extract_behavior_graph(small_task["net"], f)
        mat = behavior.attributes(graph, spec_table, AttributeParams())
        assert mat.shape == (98, 5)

    def test_deterministic(self, small_task, spec_table):
        f = small_task["extractor"].transform(small_task["test"].images[0])
        graph = behavior.extract_behavior_graph(small_task["net"], f)
        a = behavior.attributes(graph, spec_table, AttributeParams())
        b = behavior.attributes(graph, spec_table, AttributeParams())
        assert np.array_equal(a, b)

    def test_permutation_equivariance(self, spec_table):
        # permuting neurons within a layer permutes attributes identically
        rng = np.random.default_rng(21)
        graph = graph_from_arrays(rng.uniform(0, 1, 64), rng.uniform(0, 1, 32), rng.uniform(0, 1, 2))
        params = AttributeParams()
        base = behavior.attributes(graph, spec_table, params)
        perm = rng.permutation(32)
        permuted_graph = graph_from_arrays(
            graph.activations[0], graph.activations[1][perm], graph.activations[2]
        )
        permuted_table = behavior.SpecializationTable(
            values=np.concatenate(
                [spec_table.values[:, :64], spec_table.values[:, 64:96][:, perm], spec_table.values[:, 96:]],
                axis=1,
            ),
            k=spec_table.k,
            layer_sizes=spec_table.layer_sizes,
            class_counts=spec_table.class_counts,
        )
        permuted = behavior.attributes(permuted_graph, permuted_table, params)
        expected_rows = np.concatenate([np.arange(64), 64 + perm, [96, 97]])
        # ties in influence/top-k can differ under permutation; skip tied layers
        hidden = graph.activations[1]
        if len(np.unique(hidden)) == len(hidden):
            assert np.allclose(permuted, base[expected_rows], atol=1e-12)


class TestAdjacency:
    def test_sigmoid_full_bipartite(self, small_task):
        f = small_task["extractor"].transform(small_task["test"].images[2])
        graph = behavior.extract_behavior_graph(small_task["net"], f)
        ad = behavior.adjacency(graph, 0.0)
        live_features = np.count_nonzero(f)
        assert int(ad.sum()) == live_features * 32 + 32 * 2

    def test_dead_source_kills_row(self):
        graph = graph_from_arrays([0.0, 1.0], [1.0, 1.0], [1.0])
        ad = behavior.adjacency(graph)
        assert np.all(ad[0] == 0)
        assert np.array_equal(np.nonzero(ad[1])[0], [2, 3])

    def test_block_superdiagonal_only(self):
        rng = np.random.default_rng(4)
        graph = graph_from_arrays(rng.uniform(0, 1, 4), rng.uniform(0, 1, 3), rng.uniform(0, 1, 2))
        ad = behavior.adjacency(graph)
        allowed = np.zeros_like(ad)
        allowed[0:4, 4:7] = 1
        allowed[4:7, 7:9] = 1
        assert np.all(ad[allowed == 0] == 0)


class TestExport:
    def make_graph_and_attrs(self, spec_table, small_task):
        f = small_task["extractor"].transform(small_task["test"].images[0])
        graph = behavior.extract_behavior_graph(small_task["net"], f)
        return graph, behavior.attributes(graph, spec_table, AttributeParams())

    def test_impact_colors(self, small_task, spec_table):
        graph, attrs = self.make_graph_and_attrs(spec_table, small_task)
        dot = behavior.export_attributed_graph(graph, attrs, "impact")
        assert dot.startswith("digraph")
        assert "blue" in dot or "red" in dot or "green" in dot

    def test_influence_binary_colors(self, small_task, spec_table):
        graph, attrs = self.make_graph_and_attrs(spec_table, small_task)
        dot = behavior.export_attributed_graph(graph, attrs, "influence")
        assert '"red"' in dot and '"lightgray"' in dot

    def test_empty_graph_declares_nodes(self):
        graph = graph_from_arrays([0.0, 0.0], [0.0])
        attrs = np.zeros((3, 5))
        dot = behavior.export_attributed_graph(graph, attrs, "impact")
        assert "l0_0" in dot and "l1_0" in dot
        assert "->" not in dot

    def test_unknown_channel_rejected(self, small_task, spec_table):
        graph, attrs = self.make_graph_and_attrs(spec_table, small_task)
        with pytest.raises(ConfigError):
            behavior.export_attributed_graph(graph, attrs, "bogus")

    def test_deterministic(self, small_task, spec_table):
        graph, attrs = self.make_graph_and_attrs(spec_table, small_task)
        a = behavior.export_attributed_graph(graph, attrs, "specialization", cls=1)
        b = behavior.export_attributed_graph(graph, attrs, "specialization", cls=1)
        assert a == b


class TestTablePersistence:
    def test_roundtrip_bit_exact(self, tmp_path, spec_table):
        path = tmp_path / "table.json"
        behavior.save_specialization_table(spec_table, path)
        loaded = behavior.load_specialization_table(path)
        assert np.array_equal(loaded.values, spec_table.values)
        assert loaded.k == spec_table.k
        assert loaded.layer_sizes == spec_table.layer_sizes
        assert loaded.class_counts == spec_table.class_counts
