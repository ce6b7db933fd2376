"""Graph-convolutional evasion-attack detector, trained from scratch.

Architecture: four chained GCN layers (32, 32, 32, 1 filters, tanh) whose
outputs are concatenated to 97 features per node; a 1-D convolution with 16
filters of kernel 97 and stride 97 (i.e. one window per node) followed by a
second convolution with 32 filters of kernel 5 and stride 1, both relu; then
dense layers of 200 and 2 sigmoid units. The loss is the mean per-output
binary cross-entropy against one-hot labels; all gradients are hand-derived
and optimized with Adam. The head dimension depends on the node count, so a
trained detector is tied to one classifier shape.
"""

from dataclasses import dataclass, field
import json

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .graphdata import GraphDataset, GraphSample, attribute_columns

GCN_WIDTHS = (32, 32, 32, 1)
CONCAT_WIDTH = sum(GCN_WIDTHS)  # 97 features per node entering the conv block
CONV1_FILTERS = 16
CONV2_FILTERS = 32
CONV2_KERNEL = 5
DENSE_UNITS = 200
OUTPUTS = 2

DETECTOR_VERSION = 1

_ADJ_CACHE = {}


def normalize_adjacency(ad):
    """Symmetrize, add self-loops, normalize degrees on both sides.

    Results are cached per distinct adjacency pattern and bit-identical on
    cache hits.
    """
    ad = np.asarray(ad)
    if ad.ndim != 2 or ad.shape[0] != ad.shape[1]:
        raise ShapeError("adjacency must be square")
    key = (ad.shape[0], ad.tobytes())
    hit = _ADJ_CACHE.get(key)
    if hit is not None:
        return hit
    sym = ((ad | ad.T) > 0).astype(np.float64) + np.eye(ad.shape[0])
    inv_sqrt_deg = 1.0 / np.sqrt(np.sum(sym, axis=1))
    a_hat = sym * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]
    _ADJ_CACHE[key] = a_hat
    return a_hat


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class DetectorModel:
    params: dict  # name -> ndarray
    node_count: int
    feature_width: int
    seed: int
    fingerprint: str = ""
    history: list = field(default_factory=list)

    @property
    def head_input(self):
        return CONV2_FILTERS * (self.node_count - (CONV2_KERNEL - 1))

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}


def init_detector(node_count, feature_width, seed, fingerprint=""):
    """Seeded uniform fan-in initialization of all parameter groups."""
    if node_count < CONV2_KERNEL:
        raise ConfigError(f"need at least {CONV2_KERNEL} nodes")
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {}
    width = feature_width
    for i, out_width in enumerate(GCN_WIDTHS, start=1):
        params[f"gcn{i}_w"] = uniform((width, out_width), width)
        params[f"gcn{i}_b"] = np.zeros(out_width)
        width = out_width
    # stride == kernel makes conv1 a per-node linear map over the 97 features
    params["conv1_w"] = uniform((CONCAT_WIDTH, CONV1_FILTERS), CONCAT_WIDTH)
    params["conv1_b"] = np.zeros(CONV1_FILTERS)
    params["conv2_w"] = uniform(
        (CONV2_FILTERS, CONV2_KERNEL, CONV1_FILTERS), CONV2_KERNEL * CONV1_FILTERS
    )
    params["conv2_b"] = np.zeros(CONV2_FILTERS)
    head_in = CONV2_FILTERS * (node_count - (CONV2_KERNEL - 1))
    params["dense1_w"] = uniform((head_in, DENSE_UNITS), head_in)
    params["dense1_b"] = np.zeros(DENSE_UNITS)
    params["dense2_w"] = uniform((DENSE_UNITS, OUTPUTS), DENSE_UNITS)
    params["dense2_b"] = np.zeros(OUTPUTS)
    return DetectorModel(params, node_count, feature_width, seed, fingerprint)


def gcn_forward(w, b, a_hat, h):
    """One propagation step: tanh(a_hat @ h @ w + b)."""
    if h.shape[0] != a_hat.shape[0] or h.shape[1] != w.shape[0]:
        raise ShapeError("gcn layer shape mismatch")
    return np.tanh(a_hat @ h @ w + b)


def _forward(model, sample, with_cache=False):
    p = model.params
    if sample.attributes.shape != (model.node_count, model.feature_width):
        raise ShapeError(
            f"sample shape {sample.attributes.shape} does not match detector "
            f"({model.node_count}, {model.feature_width})"
        )
    a_hat = normalize_adjacency(sample.adjacency)
    h = sample.attributes
    gcn_inputs, gcn_outputs = [], []
    for i in range(1, len(GCN_WIDTHS) + 1):
        m = a_hat @ h
        h = np.tanh(m @ p[f"gcn{i}_w"] + p[f"gcn{i}_b"])
        gcn_inputs.append(m)
        gcn_outputs.append(h)
    hcat = np.concatenate(gcn_outputs, axis=1)  # (N, 97)

    z1 = hcat @ p["conv1_w"] + p["conv1_b"]
    c1 = np.maximum(z1, 0.0)  # (N, 16)

    n_out = model.node_count - (CONV2_KERNEL - 1)
    z2 = np.tile(p["conv2_b"], (n_out, 1))
    for j in range(CONV2_KERNEL):
        z2 += c1[j : j + n_out] @ p["conv2_w"][:, j, :].T
    c2 = np.maximum(z2, 0.0)  # (N-4, 32)

    flat = c2.ravel()
    d1 = _sigmoid(flat @ p["dense1_w"] + p["dense1_b"])
    out = _sigmoid(d1 @ p["dense2_w"] + p["dense2_b"])
    if not with_cache:
        return out
    return out, {
        "a_hat": a_hat,
        "gcn_inputs": gcn_inputs,
        "gcn_outputs": gcn_outputs,
        "hcat": hcat,
        "z1": z1,
        "c1": c1,
        "z2": z2,
        "c2": c2,
        "flat": flat,
        "d1": d1,
        "out": out,
    }


def detector_forward(model, sample):
    """Class probabilities (clean, adversarial), each in (0, 1)."""
    return _forward(model, sample)


def sample_loss(out, label):
    """Mean per-output binary cross-entropy against the one-hot label."""
    target = np.zeros(OUTPUTS)
    target[label] = 1.0
    eps = 1e-12
    return float(
        -np.mean(target * np.log(out + eps) + (1 - target) * np.log(1 - out + eps))
    )


def _backward(model, sample, cache):
    """Gradients of the sample loss for every parameter group."""
    p = model.params
    out = cache["out"]
    target = np.zeros(OUTPUTS)
    target[sample.label] = 1.0
    grads = {}

    dz_out = (out - target) / OUTPUTS  # BCE + sigmoid cancel
    grads["dense2_w"] = np.outer(cache["d1"], dz_out)
    grads["dense2_b"] = dz_out
    dd1 = p["dense2_w"] @ dz_out
    dz_d1 = dd1 * cache["d1"] * (1.0 - cache["d1"])
    grads["dense1_w"] = np.outer(cache["flat"], dz_d1)
    grads["dense1_b"] = dz_d1
    dflat = p["dense1_w"] @ dz_d1
    dc2 = dflat.reshape(cache["c2"].shape)

    dz2 = dc2 * (cache["z2"] > 0.0)
    n_out = dz2.shape[0]
    grads["conv2_b"] = np.sum(dz2, axis=0)
    dw2 = np.zeros_like(p["conv2_w"])
    dc1 = np.zeros_like(cache["c1"])
    for j in range(CONV2_KERNEL):
        dw2[:, j, :] = dz2.T @ cache["c1"][j : j + n_out]
        dc1[j : j + n_out] += dz2 @ p["conv2_w"][:, j, :]
    grads["conv2_w"] = dw2

    dz1 = dc1 * (cache["z1"] > 0.0)
    grads["conv1_w"] = cache["hcat"].T @ dz1
    grads["conv1_b"] = np.sum(dz1, axis=0)
    dhcat = dz1 @ p["conv1_w"].T

    # split concat gradient back onto the four GCN outputs, then walk the
    # chain backwards; each layer also receives gradient from its successor
    splits = np.cumsum(GCN_WIDTHS)[:-1]
    dh_concat = np.split(dhcat, splits, axis=1)
    a_hat = cache["a_hat"]
    dh_next = np.zeros_like(dh_concat[-1])
    for i in range(len(GCN_WIDTHS), 0, -1):
        h_i = cache["gcn_outputs"][i - 1]
        dh = dh_concat[i - 1] + dh_next
        dz = dh * (1.0 - h_i * h_i)
        grads[f"gcn{i}_w"] = cache["gcn_inputs"][i - 1].T @ dz
        grads[f"gcn{i}_b"] = np.sum(dz, axis=0)
        if i > 1:
            # a_hat is symmetric, so a_hat.T @ x == a_hat @ x
            dh_next = a_hat @ (dz @ p[f"gcn{i}_w"].T)
    return grads


def loss_and_grads(model, sample):
    out, cache = _forward(model, sample, with_cache=True)
    return sample_loss(out, sample.label), _backward(model, sample, cache)


@dataclass
class DetectorTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 40
    seed: int = 0
    patience: int = 0  # 0 disables early stopping

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("invalid detector training settings")


def dataset_metrics(model, dataset):
    """Mean loss and accuracy over a dataset."""
    losses = []
    correct = 0
    for sample in dataset.samples:
        out = detector_forward(model, sample)
        losses.append(sample_loss(out, sample.label))
        if int(np.argmax(out)) == sample.label:
            correct += 1
    return float(np.mean(losses)), correct / len(dataset)


def train_detector(model, train, test, config):
    """Adam on the mean BCE; returns (best model, history).

    History records per-epoch train/test loss and accuracy; the returned
    parameters are the ones at minimum test loss. Deterministic given the
    config seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    p = model.copy_params()
    work = DetectorModel(
        p, model.node_count, model.feature_width, model.seed, model.fingerprint
    )
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(v) for k, v in p.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    best_loss = np.inf
    best_params = model.copy_params()
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            total = {k: np.zeros_like(val) for k, val in p.items()}
            for i in idx:
                _, grads = loss_and_grads(work, train.samples[i])
                for k in total:
                    total[k] += grads[k]
            step += 1
            for k in p:
                g = total[k] / len(idx)
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v[k] = beta2 * v[k] + (1 - beta2) * g * g
                m_hat = m[k] / (1 - beta1**step)
                v_hat = v[k] / (1 - beta2**step)
                p[k] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        train_loss, train_acc = dataset_metrics(work, train)
        test_loss, test_acc = dataset_metrics(work, test)
        if not np.isfinite(train_loss):
            raise NumericalError(f"training diverged at epoch {epoch}")
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "train_accuracy": train_acc,
                "test_loss": test_loss,
                "test_accuracy": test_acc,
            }
        )
        if test_loss < best_loss:
            best_loss = test_loss
            best_params = {k: val.copy() for k, val in p.items()}
        elif config.patience and epoch - int(
            np.argmin([h["test_loss"] for h in history])
        ) >= config.patience:
            break
    best = DetectorModel(
        best_params,
        model.node_count,
        model.feature_width,
        model.seed,
        model.fingerprint,
        history,
    )
    return best, history


@dataclass
class EvalReport:
    loss: float
    accuracy: float
    confusion: dict  # tn, fp, fn, tp
    per_provenance: dict  # provenance kind -> accuracy
    count: int

    def to_dict(self):
        return {
            "loss": self.loss,
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "per_provenance": self.per_provenance,
            "count": self.count,
        }


def evaluate(model, dataset):
    """Loss, accuracy, confusion counts and per-attack breakdown.

    Prediction is the argmax output; ties resolve to class 0 (clean).
    """
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    confusion = {"tn": 0, "fp": 0, "fn": 0, "tp": 0}
    by_kind = {}
    losses = []
    for sample in dataset.samples:
        out = detector_forward(model, sample)
        losses.append(sample_loss(out, sample.label))
        pred = int(np.argmax(out))
        if sample.label == 0:
            confusion["tn" if pred == 0 else "fp"] += 1
        else:
            confusion["tp" if pred == 1 else "fn"] += 1
        kind = sample.provenance.split(":")[0] or "unknown"
        hits, total = by_kind.get(kind, (0, 0))
        by_kind[kind] = (hits + (pred == sample.label), total + 1)
    return EvalReport(
        loss=float(np.mean(losses)),
        accuracy=(confusion["tp"] + confusion["tn"]) / len(dataset),
        confusion=confusion,
        per_provenance={k: hits / total for k, (hits, total) in sorted(by_kind.items())},
        count=len(dataset),
    )


# --- attribute ablation ----------------------------------------------------

def ablation_subsets(t):
    """Column-index subsets for the single-attribute detectors."""
    return {
        "all": list(range(3 + t)),
        "impact": [0],
        "influence": [1],
        "input_proportion": [2],
        "specialization": [3 + c for c in range(t)],
        "none": [],
    }


def mask_dataset(dataset, keep_columns):
    """Copy of the dataset with all attribute columns outside
    ``keep_columns`` zeroed."""
    width = dataset.samples[0].attributes.shape[1]
    unknown = [c for c in keep_columns if not 0 <= c < width]
    if unknown:
        raise ConfigError(f"unknown attribute columns {unknown}")
    mask = np.zeros(width)
    mask[list(keep_columns)] = 1.0
    samples = [
        GraphSample(s.attributes * mask, s.adjacency, s.label, s.provenance)
        for s in dataset.samples
    ]
    return GraphDataset(samples, dataset.params, list(dataset.layer_sizes))


def ablate(train, test, config, seed, subsets=None):
    """Train one detector per attribute subset (columns outside the subset
    zero-masked) and report each evaluation; same split and seed for all."""
    t = train.params.t
    all_subsets = ablation_subsets(t)
    if subsets is not None:
        unknown = [name for name in subsets if name not in all_subsets]
        if unknown:
            raise ConfigError(f"unknown attribute subsets {unknown}")
        all_subsets = {name: all_subsets[name] for name in subsets}
    node_count = train.samples[0].attributes.shape[0]
    width = train.samples[0].attributes.shape[1]
    reports = {}
    for name, columns in all_subsets.items():
        masked_train = mask_dataset(train, columns)
        masked_test = mask_dataset(test, columns)
        model = init_detector(node_count, width, seed, train.fingerprint)
        trained, _ = train_detector(model, masked_train, masked_test, config)
        reports[name] = evaluate(trained, masked_test)
    return reports


# --- persistence -----------------------------------------------------------

def save_detector(model, path, meta=None):
    doc = {
        "format_version": DETECTOR_VERSION,
        "node_count": model.node_count,
        "feature_width": model.feature_width,
        "seed": model.seed,
        "fingerprint": model.fingerprint,
        "architecture": {
            "gcn_widths": list(GCN_WIDTHS),
            "conv1": {"filters": CONV1_FILTERS, "kernel": CONCAT_WIDTH, "stride": CONCAT_WIDTH},
            "conv2": {"filters": CONV2_FILTERS, "kernel": CONV2_KERNEL, "stride": 1},
            "dense": [DENSE_UNITS, OUTPUTS],
        },
        "params": {k: v.tolist() for k, v in model.params.items()},
        "history": model.history,
    }
    if meta:
        doc.update(meta)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_detector(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != DETECTOR_VERSION:
        raise ConfigError(f"unsupported detector version {doc.get('format_version')}")
    return DetectorModel(
        params={k: np.array(v) for k, v in doc["params"].items()},
        node_count=doc["node_count"],
        feature_width=doc["feature_width"],
        seed=doc["seed"],
        fingerprint=doc["fingerprint"],
        history=doc["history"],
    )


def history_to_csv(history):
    lines = ["epoch,train_loss,train_accuracy,test_loss,test_accuracy"]
    for h in history:
        lines.append(
            f"{h['epoch']},{h['train_loss']!r},{h['train_accuracy']!r},"
            f"{h['test_loss']!r},{h['test_accuracy']!r}"
        )
    return "\n".join(lines) + "\n"
