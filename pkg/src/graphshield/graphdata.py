"""The labeled graph dataset: attribute matrices, adjacencies and labels.

Each adversarial/original pair contributes two samples (clean label 0,
adversarial label 1), so datasets are balanced by construction. Samples are
serialized as line-delimited JSON records with a header line and a trailing
sha256 checksum line; adjacency is stored as the per-source alive mask since
the block structure is fully determined by the layer sizes.
"""

from dataclasses import dataclass, field
import hashlib
import json

import numpy as np

from . import behavior
from .errors import ConfigError, ShapeError

ARCHIVE_VERSION = 1

ATTRIBUTE_NAMES = ("impact", "influence", "input_proportion")


def attribute_columns(t):
    return list(ATTRIBUTE_NAMES) + [f"specialization_{c}" for c in range(t)]


def shape_fingerprint(layer_sizes, params):
    doc = json.dumps(
        {"layer_sizes": list(layer_sizes), "params": params.to_dict()},
        sort_keys=True,
    )
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class GraphSample:
    """One detector training example: attributes, adjacency, binary label."""

    attributes: np.ndarray  # (node_count, 3 + t)
    adjacency: np.ndarray  # (node_count, node_count) uint8
    label: int  # 0 clean, 1 adversarial
    provenance: str  # e.g. "clean", "FGSM", plus source image id

    def __post_init__(self):
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.uint8)
        if self.attributes.shape[0] != self.adjacency.shape[0]:
            raise ShapeError("attribute rows must equal adjacency dimension")
        if self.label not in (0, 1):
            raise ConfigError("graph label must be 0 or 1")


@dataclass
class GraphDataset:
    samples: list
    params: behavior.AttributeParams
    layer_sizes: list

    @property
    def fingerprint(self):
        return shape_fingerprint(self.layer_sizes, self.params)

    def __len__(self):
        return len(self.samples)

    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)


def _alive_mask(sample, layer_sizes):
    """Per-source-node alive flags recovered from the adjacency rows."""
    n = sum(layer_sizes)
    alive = np.zeros(n, dtype=np.uint8)
    row_any = sample.adjacency.any(axis=1)
    last_offset = n - layer_sizes[-1]
    alive[:last_offset] = row_any[:last_offset]
    return alive


def _adjacency_from_alive(alive, layer_sizes):
    n = sum(layer_sizes)
    ad = np.zeros((n, n), dtype=np.uint8)
    offsets = np.cumsum([0] + list(layer_sizes))
    for layer_idx in range(len(layer_sizes) - 1):
        src0, src1 = offsets[layer_idx], offsets[layer_idx + 1]
        dst0, dst1 = offsets[layer_idx + 1], offsets[layer_idx + 2]
        ad[src0:src1, dst0:dst1] = alive[src0:src1, None]
    return ad


def _sample_from_pair_image(classifier, image_features, table, params, label, provenance):
    graph = behavior.extract_behavior_graph(classifier, image_features)
    return GraphSample(
        attributes=behavior.attributes(graph, table, params),
        adjacency=behavior.adjacency(graph, params.tau),
        label=label,
        provenance=provenance,
    )


def build_dataset(classifier, extractor, pairs, table, params):
    """Preprocess every pair into (clean, adversarial) graph samples."""
    params.validate()
    if len(pairs) == 0:
        raise ConfigError("pair set is empty")
    if table.layer_sizes != list(classifier.layer_sizes):
        raise ShapeError("specialization table does not match classifier shape")
    clean_features = extractor.transform(pairs.originals)
    adv_features = extractor.transform(pairs.adversarials)
    samples = []
    for i in range(len(pairs)):
        samples.append(
            _sample_from_pair_image(
                classifier, clean_features[i], table, params, 0, f"clean:{pairs.kind}:{i}"
            )
        )
        samples.append(
            _sample_from_pair_image(
                classifier, adv_features[i], table, params, 1, f"{pairs.kind}:{i}"
            )
        )
    return GraphDataset(samples, params, list(classifier.layer_sizes))


def merge(*datasets):
    """Concatenate datasets sharing params and classifier shape."""
    if not datasets:
        raise ConfigError("nothing to merge")
    first = datasets[0]
    for other in datasets[1:]:
        if other.fingerprint != first.fingerprint:
            raise ConfigError("cannot merge datasets with different fingerprints")
    samples = [s for ds in datasets for s in ds.samples]
    return GraphDataset(samples, first.params, list(first.layer_sizes))


def split(dataset, train_fraction=0.8, seed=0):
    """Stratified-by-label disjoint, exhaustive train/test partition."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train fraction must be in (0, 1)")
    labels = dataset.labels()
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        cut = int(len(idx) * train_fraction)
        if cut == 0 or cut == len(idx):
            raise ConfigError(f"label {cls} would empty under fraction {train_fraction}")
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    make = lambda idx: GraphDataset(
        [dataset.samples[i] for i in idx], dataset.params, list(dataset.layer_sizes)
    )
    return make(train_idx), make(test_idx)


def attribute_table(dataset):
    """All node rows of all samples stacked into one (rows, 3 + t) matrix."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    return np.vstack([s.attributes for s in dataset.samples])


@dataclass
class DatasetStats:
    columns: list
    table: dict  # column -> {mean, std, min, p25, p50, p75, max}

    def to_csv(self):
        keys = ["mean", "std", "min", "p25", "p50", "p75", "max"]
        lines = ["statistic," + ",".join(self.columns)]
        for key in keys:
            lines.append(
                key + "," + ",".join(repr(self.table[c][key]) for c in self.columns)
            )
        return "\n".join(lines) + "\n"


def stats(dataset):
    """Column statistics over every node row (population std)."""
    rows = attribute_table(dataset)
    columns = attribute_columns(dataset.params.t)
    table = {}
    for j, name in enumerate(columns):
        col = rows[:, j]
        table[name] = {
            "mean": float(np.mean(col)),
            "std": float(np.std(col)),
            "min": float(np.min(col)),
            "p25": float(np.percentile(col, 25)),
            "p50": float(np.percentile(col, 50)),
            "p75": float(np.percentile(col, 75)),
            "max": float(np.max(col)),
        }
    return DatasetStats(columns, table)


@dataclass
class CorrelationMatrix:
    columns: list  # attribute columns plus "label"
    matrix: np.ndarray
    constant_columns: list

    def to_csv(self):
        lines = ["," + ",".join(self.columns)]
        for name, row in zip(self.columns, self.matrix):
            lines.append(name + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def correlations(dataset):
    """Pearson correlations over attribute columns plus the sample label
    (broadcast to node rows). Constant columns get correlation 0 by
    convention and are reported in ``constant_columns``."""
    rows = attribute_table(dataset)
    if rows.shape[0] < 2:
        raise ConfigError("need at least 2 rows for correlations")
    label_col = np.repeat(dataset.labels(), [len(s.attributes) for s in dataset.samples])
    data = np.column_stack([rows, label_col.astype(np.float64)])
    columns = attribute_columns(dataset.params.t) + ["label"]
    n = data.shape[1]
    centered = data - np.mean(data, axis=0)
    norms = np.sqrt(np.sum(centered**2, axis=0))
    constant = [columns[j] for j in range(n) if norms[j] == 0.0]
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                matrix[i, j] = 1.0
            elif norms[i] == 0.0 or norms[j] == 0.0:
                matrix[i, j] = 0.0
            else:
                matrix[i, j] = float(
                    np.dot(centered[:, i], centered[:, j]) / (norms[i] * norms[j])
                )
    return CorrelationMatrix(columns, matrix, constant)


# --- archive ---------------------------------------------------------------

def serialize(dataset, path, meta=None):
    """Line-delimited archive: header, one JSON record per sample, trailing
    sha256 checksum over everything before it."""
    header = {
        "format_version": ARCHIVE_VERSION,
        "params": dataset.params.to_dict(),
        "layer_sizes": list(dataset.layer_sizes),
        "fingerprint": dataset.fingerprint,
        "count": len(dataset),
    }
    if meta:
        header.update(meta)
    lines = [json.dumps(header, sort_keys=True)]
    for sample in dataset.samples:
        alive = _alive_mask(sample, dataset.layer_sizes)
        record = {
            "label": sample.label,
            "provenance": sample.provenance,
            "alive": "".join(str(int(b)) for b in alive),
            "attrs": sample.attributes.tolist(),
        }
        lines.append(json.dumps(record))
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w") as fh:
        fh.write(body)
        fh.write(f"#sha256={digest}\n")


def deserialize(path):
    with open(path) as fh:
        content = fh.read()
    lines = content.splitlines()
    if not lines or not lines[-1].startswith("#sha256="):
        raise ConfigError("archive missing checksum line (truncated?)")
    body = "\n".join(lines[:-1]) + "\n"
    expected = lines[-1][len("#sha256=") :]
    if hashlib.sha256(body.encode()).hexdigest() != expected:
        raise ConfigError("archive checksum mismatch (corrupt or truncated)")
    header = json.loads(lines[0])
    if header.get("format_version") != ARCHIVE_VERSION:
        raise ConfigError(f"unsupported archive version {header.get('format_version')}")
    params = behavior.AttributeParams.from_dict(header["params"])
    layer_sizes = header["layer_sizes"]
    samples = []
    for line in lines[1 : 1 + header["count"]]:
        record = json.loads(line)
        alive = np.array([int(ch) for ch in record["alive"]], dtype=np.uint8)
        samples.append(
            GraphSample(
                attributes=np.array(record["attrs"]),
                adjacency=_adjacency_from_alive(alive, layer_sizes),
                label=record["label"],
                provenance=record["provenance"],
            )
        )
    if len(samples) != header["count"]:
        raise ConfigError("archive record count does not match header")
    return GraphDataset(samples, params, layer_sizes)
