"""Per-sample behavior graphs of the classifier and their node attributes.

A behavior graph takes the classifier's neurons as nodes (the feature
vector is layer 0) and the activations a sample produces as edge weights
between consecutive layers. Four node attributes are derived per sample:

* impact: normalized activation minus the previous layer's mean normalized
  activation (how the neuron shifts values flowing through),
* influence: 1 for the minimal set of top neurons whose normalized
  activations cumulatively reach mass p within their layer,
* input proportion: fraction of nonzero incoming activations,
* specialization (per class): fitted top-k participation frequency, gated
  to 0 when the neuron is inactive on the current sample.

Nodes are totally ordered layer-major, index-ascending; all tie-breaking
(top-k, influence sort) is by ascending neuron index for determinism.
"""

from dataclasses import dataclass
import json

import numpy as np

from . import nncore
from .errors import ConfigError, DomainError, ShapeError

SPEC_TABLE_VERSION = 1


@dataclass(frozen=True)
class NeuronId:
    """Position of a neuron: layer 0 is the classifier's input layer."""

    layer: int
    index: int


@dataclass
class BehaviorGraph:
    """Raw per-layer activation vectors of one sample, feature vector first."""

    layer_sizes: list
    activations: list  # one vector per layer, layer 0 = features
    sample_id: str = ""

    def __post_init__(self):
        if len(self.activations) != len(self.layer_sizes):
            raise ShapeError("one activation vector per layer required")
        for size, vec in zip(self.layer_sizes, self.activations):
            if vec.shape != (size,):
                raise ShapeError("activation vector length must match layer size")

    @property
    def node_count(self):
        return sum(self.layer_sizes)

    def flat_activations(self):
        return np.concatenate(self.activations)


@dataclass
class AttributeParams:
    """p: influence mass threshold, k: specialization top-k, t: class count,
    tau: nonzero threshold for input proportion / adjacency."""

    p: float = 0.5
    k: int = 10
    t: int = 2
    tau: float = 0.0

    def validate(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("p must be in [0, 1]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.t < 2:
            raise ConfigError("t must be >= 2")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")

    def to_dict(self):
        return {"p": self.p, "k": self.k, "t": self.t, "tau": self.tau}

    @classmethod
    def from_dict(cls, doc):
        params = cls(**doc)
        params.validate()
        return params


def extract_behavior_graph(classifier, features, sample_id=""):
    """Behavior graph of the classifier on one feature vector. Adversarial
    inputs are extracted identically; no well-classified requirement."""
    trace = nncore.forward_trace(classifier, features)
    return BehaviorGraph(
        layer_sizes=classifier.layer_sizes,
        activations=trace.activations,
        sample_id=sample_id,
    )


def normalize_activations(graph):
    """Per-layer scaling to unit sum; an all-zero layer stays all-zero."""
    normalized = []
    for layer_idx, vec in enumerate(graph.activations):
        if np.any(vec < 0):
            raise DomainError(
                f"layer {layer_idx} has negative activations; normalization "
                "requires nonnegative values (relu/sigmoid)"
            )
        total = np.sum(vec)
        normalized.append(vec / total if total > 0 else np.zeros_like(vec))
    return normalized


def impact(graph, normalized):
    """Normalized activation minus the previous layer's mean normalized
    activation. Layer 0 uses the 1/width baseline (the mean of any layer
    that normalizes to unit sum), so the attribute covers every node."""
    parts = []
    for layer_idx, alpha in enumerate(normalized):
        if layer_idx == 0:
            baseline = 1.0 / graph.layer_sizes[0]
        else:
            baseline = np.mean(normalized[layer_idx - 1])
        parts.append(alpha - baseline)
    return np.concatenate(parts)


def influence(normalized, p):
    """Mark the minimal descending-mass prefix per layer reaching mass p.

    Ties are broken by ascending neuron index; p = 0 marks nothing, and a
    dead layer (total mass 0) marks nothing for p > 0.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must be in [0, 1]")
    parts = []
    for alpha in normalized:
        marks = np.zeros(len(alpha), dtype=np.int64)
        if p > 0 and np.sum(alpha) > 0:
            # stable sort on negated values = descending with ascending-index ties
            order = np.argsort(-alpha, kind="stable")
            cum = np.cumsum(alpha[order])
            # 1e-12 slack so p=1.0 still marks a full unit-mass layer despite
            # rounding; the mass guard above keeps dead layers unmarked even
            # when p is below the slack
            reached = np.flatnonzero(cum >= p - 1e-12)
            if len(reached):
                marks[order[: reached[0] + 1]] = 1
        parts.append(marks)
    return np.concatenate(parts)


def input_proportion(graph, tau=0.0):
    """Fraction of incoming activations above tau in magnitude; constant
    within a layer for a fully connected classifier. Layer 0 counts the raw
    feature entries themselves."""
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    parts = []
    for layer_idx, size in enumerate(graph.layer_sizes):
        source = graph.activations[max(layer_idx - 1, 0)]
        rho = np.count_nonzero(np.abs(source) > tau) / len(source)
        parts.append(np.full(size, rho))
    return np.concatenate(parts)


def _topk_indicator(vec, k):
    """1 for the k largest entries (all, if k >= width); ties by ascending index."""
    marks = np.zeros(len(vec), dtype=np.float64)
    order = np.argsort(-vec, kind="stable")
    marks[order[: min(k, len(vec))]] = 1.0
    return marks


@dataclass
class SpecializationTable:
    """Per-class, per-neuron frequency of ranking top-k within the layer
    across the clean fitting images of that class."""

    values: np.ndarray  # (t, node_count)
    k: int
    layer_sizes: list
    class_counts: list

    @property
    def t(self):
        return self.values.shape[0]

    @property
    def node_count(self):
        return self.values.shape[1]


def fit_specialization(classifier, extractor, data, k):
    """Fit top-k participation frequencies per class on clean images.

    Only images the target classifies correctly enter the counts; an empty
    class (absent or never correctly classified) is an error.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    layer_sizes = classifier.layer_sizes
    node_count = sum(layer_sizes)
    classes = int(np.max(data.labels)) + 1
    sums = np.zeros((classes, node_count))
    counts = np.zeros(classes, dtype=np.int64)
    features = extractor.transform(data.images)
    preds = np.argmax(nncore.forward_batch(classifier, features), axis=1)
    for f, label, pred in zip(features, data.labels, preds):
        if pred != label:
            continue
        graph = extract_behavior_graph(classifier, f)
        indicator = np.concatenate(
            [_topk_indicator(vec, k) for vec in graph.activations]
        )
        sums[label] += indicator
        counts[label] += 1
    for cls in range(classes):
        if counts[cls] == 0:
            raise ConfigError(f"no well-classified fitting images for class {cls}")
    return SpecializationTable(
        values=sums / counts[:, None],
        k=k,
        layer_sizes=list(layer_sizes),
        class_counts=counts.tolist(),
    )


def specialization(graph, table, cls):
    """Table frequency where the neuron is active on this sample, else 0."""
    if table.layer_sizes != list(graph.layer_sizes):
        raise ShapeError("specialization table fitted on a different classifier shape")
    active = graph.flat_activations() != 0.0
    return np.where(active, table.values[cls], 0.0)


def attributes(graph, table, params):
    """Assemble the (node_count, 3 + t) attribute matrix in node order:
    impact, influence, input proportion, specialization per class."""
    params.validate()
    if table.t < params.t:
        raise ShapeError("table has fewer classes than params.t")
    normalized = normalize_activations(graph)
    columns = [
        impact(graph, normalized),
        influence(normalized, params.p).astype(np.float64),
        input_proportion(graph, params.tau),
    ]
    columns += [specialization(graph, table, c) for c in range(params.t)]
    return np.column_stack(columns)


def adjacency(graph, tau_edge=0.0):
    """Binary consecutive-layer adjacency: node i keeps its outgoing edges
    iff its own activation exceeds tau_edge in magnitude."""
    if tau_edge < 0:
        raise ConfigError("tau_edge must be >= 0")
    n = graph.node_count
    ad = np.zeros((n, n), dtype=np.uint8)
    offsets = np.cumsum([0] + list(graph.layer_sizes))
    for layer_idx in range(len(graph.layer_sizes) - 1):
        src0, src1 = offsets[layer_idx], offsets[layer_idx + 1]
        dst0, dst1 = offsets[layer_idx + 1], offsets[layer_idx + 2]
        alive = np.abs(graph.activations[layer_idx]) > tau_edge
        ad[src0:src1, dst0:dst1] = alive[:, None]
    return ad


ATTRIBUTE_CHANNELS = ("impact", "influence", "input-proportion", "specialization")


def _scale_color(value):
    """White -> red -> black ramp for [0, 1] attribute values."""
    v = float(np.clip(value, 0.0, 1.0))
    if v <= 0.5:
        # white (255,255,255) to red (255,0,0)
        g = int(round(255 * (1.0 - 2.0 * v)))
        return f"#ff{g:02x}{g:02x}"
    r = int(round(255 * (2.0 - 2.0 * v)))
    return f"#{r:02x}0000"


def _impact_color(value, near_zero=0.01):
    if value > near_zero:
        return "red"
    if value < -near_zero:
        return "blue"
    return "green"


def export_attributed_graph(graph, attr_matrix, channel, cls=0, tau_edge=0.0):
    """Graphviz DOT document with nodes colored by one attribute channel.

    Impact maps negative/near-zero/positive to blue/green/red; influence is
    binary red vs gray; input proportion and specialization use a
    white-red-black ramp. Nodes with no surviving edges are still declared.
    """
    if channel not in ATTRIBUTE_CHANNELS:
        raise ConfigError(f"unknown channel {channel!r}")
    if channel == "impact":
        values = attr_matrix[:, 0]
        colors = [_impact_color(v) for v in values]
    elif channel == "influence":
        values = attr_matrix[:, 1]
        colors = ["red" if v >= 0.5 else "lightgray" for v in values]
    elif channel == "input-proportion":
        values = attr_matrix[:, 2]
        colors = [_scale_color(v) for v in values]
    else:
        values = attr_matrix[:, 3 + cls]
        colors = [_scale_color(v) for v in values]

    offsets = np.cumsum([0] + list(graph.layer_sizes))
    names = []
    for layer_idx, size in enumerate(graph.layer_sizes):
        names += [f"l{layer_idx}_{j}" for j in range(size)]

    lines = ["digraph behavior {", "  rankdir=LR;", "  node [style=filled];"]
    for name, value, color in zip(names, values, colors):
        lines.append(f'  {name} [fillcolor="{color}", label="{name}\\n{value:.4f}"];')
    ad = adjacency(graph, tau_edge)
    for i, j in zip(*np.nonzero(ad)):
        lines.append(f"  {names[i]} -> {names[j]};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# --- persistence -----------------------------------------------------------

def save_specialization_table(table, path, meta=None):
    doc = {
        "format_version": SPEC_TABLE_VERSION,
        "k": table.k,
        "layer_sizes": table.layer_sizes,
        "class_counts": table.class_counts,
        "classes": {
            str(cls): {
                str(layer): table.values[cls][off : off + size].tolist()
                for layer, (off, size) in enumerate(
                    zip(np.cumsum([0] + table.layer_sizes)[:-1], table.layer_sizes)
                )
            }
            for cls in range(table.t)
        },
    }
    if meta:
        doc.update(meta)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_specialization_table(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != SPEC_TABLE_VERSION:
        raise ConfigError("unsupported specialization table version")
    layer_sizes = doc["layer_sizes"]
    t = len(doc["classes"])
    values = np.zeros((t, sum(layer_sizes)))
    for cls in range(t):
        per_layer = doc["classes"][str(cls)]
        values[cls] = np.concatenate(
            [np.array(per_layer[str(layer)]) for layer in range(len(layer_sizes))]
        )
    return SpecializationTable(
        values=values,
        k=doc["k"],
        layer_sizes=layer_sizes,
        class_counts=doc["class_counts"],
    )
