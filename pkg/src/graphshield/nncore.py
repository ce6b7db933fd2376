"""Minimal dense-network engine with activation tracing and manual gradients.

Everything is plain numpy in float64. Networks are small (tens of neurons),
so clarity wins over vectorization tricks. The feature extractor is a frozen
linear map, which keeps attack gradients exact.
"""

from dataclasses import dataclass, field

import json
import numpy as np

from .errors import ConfigError, DomainError, NumericalError, ShapeError

CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


def apply_activation(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ConfigError(f"unknown activation {kind!r}")


def activation_derivative(kind, a):
    """Derivative of the activation w.r.t. its pre-activation, expressed
    through the post-activation value ``a`` (well defined a.e. for relu)."""
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "identity":
        return np.ones_like(a)
    raise ConfigError(f"unknown activation {kind!r}")


@dataclass
class DenseLayer:
    """One fully connected layer: out = activation(x @ weights + bias)."""

    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("layer weights must be 2-D")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("bias length must equal weight columns")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]


@dataclass
class DenseNetwork:
    """Ordered stack of dense layers; the classifier under attack."""

    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer dims mismatch: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def layer_sizes(self):
        """Neuron counts per layer, input layer included."""
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def copy(self):
        return DenseNetwork(
            [
                DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
                for l in self.layers
            ]
        )


@dataclass
class ForwardTrace:
    """Post-activation vectors per layer; index 0 is the feature vector."""

    activations: list
    predicted: int

    @property
    def output(self):
        return self.activations[-1]


@dataclass
class LabeledImageSet:
    """Images as rows of a (n, d) array with pixel range [0, 1]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ShapeError("images must be (n, d) with one label per row")

    def __len__(self):
        return len(self.images)


class FeatureExtractor:
    """Frozen linear feature map f = x @ matrix.

    Kinds: ``identity``, ``downsample`` (block-mean pooling of a square
    image) and ``random_projection`` (seeded Gaussian matrix, scaled by
    1/sqrt(out_dim)). Linear on purpose: attack gradients pass through
    exactly as matrix transposes.
    """

    def __init__(self, kind, matrix, params):
        self.kind = kind
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.params = dict(params)

    @classmethod
    def identity(cls, dim):
        return cls("identity", np.eye(dim), {"dim": dim})

    @classmethod
    def downsample(cls, side, factor):
        if side % factor != 0:
            raise ConfigError(f"side {side} not divisible by factor {factor}")
        out_side = side // factor
        m = np.zeros((side * side, out_side * out_side))
        for r in range(side):
            for c in range(side):
                m[r * side + c, (r // factor) * out_side + (c // factor)] = 1.0 / (
                    factor * factor
                )
        return cls("downsample", m, {"side": side, "factor": factor})

    @classmethod
    def random_projection(cls, in_dim, out_dim, seed):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((in_dim, out_dim)) / np.sqrt(out_dim)
        return cls(
            "random_projection", m, {"in_dim": in_dim, "out_dim": out_dim, "seed": seed}
        )

    @property
    def in_dim(self):
        return self.matrix.shape[0]

    @property
    def out_dim(self):
        return self.matrix.shape[1]

    def transform(self, images):
        images = np.asarray(images, dtype=np.float64)
        if images.shape[-1] != self.in_dim:
            raise ShapeError(
                f"extractor expects {self.in_dim} inputs, got {images.shape[-1]}"
            )
        return images @ self.matrix

    def backprop(self, grad_features):
        return np.asarray(grad_features) @ self.matrix.T


def forward(net, features):
    """Class scores for one feature vector (final post-activation layer)."""
    return forward_trace(net, features).output


def forward_trace(net, features):
    """Run the classifier keeping every layer's post-activation vector."""
    a = np.asarray(features, dtype=np.float64)
    if a.shape != (net.in_dim,):
        raise ShapeError(f"expected feature vector of length {net.in_dim}, got {a.shape}")
    trace = [a]
    for layer in net.layers:
        a = apply_activation(layer.activation, a @ layer.weights + layer.bias)
        trace.append(a)
    return ForwardTrace(trace, int(np.argmax(trace[-1])))


def forward_batch(net, features):
    """Vectorized forward over a (n, d) feature matrix."""
    a = np.asarray(features, dtype=np.float64)
    for layer in net.layers:
        a = apply_activation(layer.activation, a @ layer.weights + layer.bias)
    return a


def predict(net, extractor, images):
    scores = forward_batch(net, extractor.transform(images))
    return np.argmax(scores, axis=1)


def accuracy(net, extractor, data):
    return float(np.mean(predict(net, extractor, data.images) == data.labels))


def softmax(scores):
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _backprop_to_features(net, trace, true_labels):
    """Gradient of softmax cross-entropy w.r.t. the feature vector(s).

    ``trace`` is the list of per-layer post-activations (batched or not);
    loss is averaged over the batch by the caller, so this returns the
    per-sample gradient.
    """
    out = trace[-1]
    grad_a = softmax(out)
    if out.ndim == 1:
        grad_a[true_labels] -= 1.0
    else:
        grad_a[np.arange(len(out)), true_labels] -= 1.0
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        grad_z = grad_a * activation_derivative(layer.activation, trace[idx + 1])
        if not np.all(np.isfinite(grad_z)):
            raise NumericalError(f"non-finite gradient at layer {idx}")
        grad_a = grad_z @ layer.weights.T
    return grad_a


def input_gradient(net, extractor, image, true_label):
    """d(cross-entropy loss)/d(image pixels) for one image."""
    features = extractor.transform(np.asarray(image, dtype=np.float64))
    trace = forward_trace(net, features)
    grad_f = _backprop_to_features(net, trace.activations, int(true_label))
    grad = extractor.backprop(grad_f)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient at extractor")
    return grad


def input_gradient_batch(net, extractor, images, true_labels):
    """Batched variant of input_gradient; one gradient row per image."""
    features = extractor.transform(np.asarray(images, dtype=np.float64))
    trace = [features]
    a = features
    for layer in net.layers:
        a = apply_activation(layer.activation, a @ layer.weights + layer.bias)
        trace.append(a)
    grad_f = _backprop_to_features(net, trace, np.asarray(true_labels))
    return extractor.backprop(grad_f)


@dataclass
class TargetTrainConfig:
    learning_rate: float = 0.3
    batch_size: int = 16
    epochs: int = 150
    seed: int = 0
    momentum: float = 0.9

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("invalid target training settings")


def init_network(layer_sizes, activations, seed):
    """Seeded uniform fan-in initialization."""
    if len(activations) != len(layer_sizes) - 1:
        raise ConfigError("need one activation per weight layer")
    rng = np.random.default_rng(seed)
    layers = []
    for (d_in, d_out), act in zip(zip(layer_sizes, layer_sizes[1:]), activations):
        bound = 1.0 / np.sqrt(d_in)
        w = rng.uniform(-bound, bound, size=(d_in, d_out))
        layers.append(DenseLayer(w, np.zeros(d_out), act))
    return DenseNetwork(layers)


def train_target(net, extractor, data, config, test_data=None):
    """SGD with momentum on softmax cross-entropy. Returns (net, report).

    The input network is not mutated; training is bit-reproducible given
    the seed. A non-decreasing loss across all epochs yields a warning in
    the report, not a failure.
    """
    config.validate()
    if len(np.unique(data.labels)) < 2:
        raise ConfigError("training data must contain at least 2 classes")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    features = extractor.transform(data.images)
    n = len(data)
    velocity = [
        (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers
    ]
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            f_batch, y_batch = features[idx], data.labels[idx]
            trace = [f_batch]
            a = f_batch
            for layer in net.layers:
                a = apply_activation(layer.activation, a @ layer.weights + layer.bias)
                trace.append(a)
            probs = softmax(trace[-1])
            batch_loss = -np.mean(
                np.log(probs[np.arange(len(idx)), y_batch] + 1e-300)
            )
            epoch_loss += batch_loss * len(idx)
            grad_a = probs
            grad_a[np.arange(len(idx)), y_batch] -= 1.0
            grad_a /= len(idx)
            for li in range(len(net.layers) - 1, -1, -1):
                layer = net.layers[li]
                grad_z = grad_a * activation_derivative(
                    layer.activation, trace[li + 1]
                )
                grad_w = trace[li].T @ grad_z
                grad_b = np.sum(grad_z, axis=0)
                grad_a = grad_z @ layer.weights.T
                vw, vb = velocity[li]
                vw *= config.momentum
                vw -= config.learning_rate * grad_w
                vb *= config.momentum
                vb -= config.learning_rate * grad_b
                layer.weights += vw
                layer.bias += vb
        losses.append(epoch_loss / n)
    report = {
        "epochs": config.epochs,
        "final_loss": losses[-1] if losses else None,
        "train_accuracy": accuracy(net, extractor, data),
        "test_accuracy": accuracy(net, extractor, test_data)
        if test_data is not None
        else None,
        "loss_curve": losses,
    }
    if losses and losses[-1] >= losses[0] and config.epochs > 1:
        report["warning"] = "loss did not decrease over training"
    return net, report


def gen_synthetic_data(side, samples_per_class, noise, seed, classes=2):
    """Two-class blob images: class 0 lights the top-left quadrant, class 1
    the bottom-right. Pixels clipped to [0, 1]; stratified counts exact."""
    if classes != 2:
        raise ConfigError("the synthetic task is binary (classes=2)")
    if noise < 0:
        raise ConfigError("noise level must be >= 0")
    rng = np.random.default_rng(seed)
    half = side // 2
    images = []
    labels = []
    for cls in range(classes):
        for _ in range(samples_per_class):
            img = np.zeros((side, side))
            # modest amplitude keeps the task separable but leaves the
            # decision margin small enough for small-budget attacks
            brightness = rng.uniform(0.1, 0.3)
            if cls == 0:
                img[:half, :half] = brightness
            else:
                img[half:, half:] = brightness
            if noise > 0:
                img += rng.normal(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0).ravel())
            labels.append(cls)
    return LabeledImageSet(np.array(images), np.array(labels))


def stratified_split(data, train_fraction, seed):
    """Per-class shuffled split preserving label proportions."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        cut = int(len(idx) * train_fraction)
        if cut == 0 or cut == len(idx):
            raise ConfigError(f"class {cls} would empty under fraction {train_fraction}")
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return (
        LabeledImageSet(data.images[train_idx], data.labels[train_idx]),
        LabeledImageSet(data.images[test_idx], data.labels[test_idx]),
    )


# --- persistence -----------------------------------------------------------

def network_to_dict(net):
    return {
        "format_version": CHECKPOINT_VERSION,
        "layers": [
            {
                "in_dim": l.in_dim,
                "out_dim": l.out_dim,
                "activation": l.activation,
                "weights": l.weights.tolist(),
                "bias": l.bias.tolist(),
            }
            for l in net.layers
        ],
    }


def network_from_dict(doc):
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')}")
    return DenseNetwork(
        [
            DenseLayer(np.array(l["weights"]), np.array(l["bias"]), l["activation"])
            for l in doc["layers"]
        ]
    )


def save_network(net, path):
    # json round-trips python floats exactly (shortest-repr decimals)
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh)


def load_network(path):
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def extractor_to_dict(extractor):
    return {"kind": extractor.kind, "params": extractor.params}


def extractor_from_dict(doc):
    kind, params = doc["kind"], doc["params"]
    if kind == "identity":
        return FeatureExtractor.identity(params["dim"])
    if kind == "downsample":
        return FeatureExtractor.downsample(params["side"], params["factor"])
    if kind == "random_projection":
        return FeatureExtractor.random_projection(
            params["in_dim"], params["out_dim"], params["seed"]
        )
    raise ConfigError(f"unknown extractor kind {kind!r}")


def save_image_csv(data, path):
    """One row per image: label, then pixels (full-precision decimals)."""
    with open(path, "w") as fh:
        for label, image in zip(data.labels, data.images):
            fh.write(",".join([str(int(label))] + [repr(float(v)) for v in image]) + "\n")


def load_image_csv(path):
    images, labels = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            labels.append(int(parts[0]))
            images.append([float(v) for v in parts[1:]])
    data = LabeledImageSet(np.array(images), np.array(labels))
    if np.min(data.images) < 0.0 or np.max(data.images) > 1.0:
        raise DomainError("image pixels must lie in [0, 1]")
    return data
