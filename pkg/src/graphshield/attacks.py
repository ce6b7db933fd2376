"""FGSM, BIM and PGD evasion attacks against the trained target model.

All three are untargeted L-inf attacks maximizing the true-class loss.
FGSM is the one-step special case of the shared iterative loop, which makes
the BIM(1, eps) == FGSM(eps) and PGD(no random start) == BIM equivalences
hold bitwise.
"""

from dataclasses import dataclass, field
import json
import os

import numpy as np

from . import nncore
from .errors import AttackError, ConfigError

ATTACK_KINDS = ("FGSM", "BIM", "PGD")


@dataclass
class AttackSpec:
    kind: str
    epsilon: float
    step_size: float = 0.0
    iterations: int = 1
    random_start: bool = False
    clip_min: float = 0.0
    clip_max: float = 1.0
    seed: int = 0

    def validate(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        # epsilon == 0 is allowed and degenerates to the identity attack
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.kind in ("BIM", "PGD"):
            if self.iterations < 1:
                raise ConfigError("iterative attacks need iterations >= 1")
            if self.step_size < 0 or self.step_size > self.epsilon:
                raise ConfigError("need 0 <= step_size <= epsilon")


def _iterate(net, extractor, image, label, epsilon, step, iterations, start):
    lo = np.clip(image - epsilon, 0.0, 1.0)
    hi = np.clip(image + epsilon, 0.0, 1.0)
    x = start
    for _ in range(iterations):
        grad = nncore.input_gradient(net, extractor, x, label)
        x = np.clip(x + step * np.sign(grad), lo, hi)
    return x


def fgsm(net, extractor, image, label, spec):
    """One signed-gradient step of size epsilon, clipped to [0, 1]."""
    spec.validate()
    if spec.kind != "FGSM":
        raise ConfigError("spec.kind must be FGSM")
    image = np.asarray(image, dtype=np.float64)
    return _iterate(net, extractor, image, label, spec.epsilon, spec.epsilon, 1, image)


def bim(net, extractor, image, label, spec):
    """Iterated signed-gradient steps projected back to the eps-ball."""
    spec.validate()
    if spec.kind != "BIM":
        raise ConfigError("spec.kind must be BIM")
    image = np.asarray(image, dtype=np.float64)
    return _iterate(
        net, extractor, image, label, spec.epsilon, spec.step_size, spec.iterations, image
    )


def pgd(net, extractor, image, label, spec, rng=None):
    """BIM with an optional seeded uniform random start in the eps-ball."""
    spec.validate()
    if spec.kind != "PGD":
        raise ConfigError("spec.kind must be PGD")
    image = np.asarray(image, dtype=np.float64)
    start = image
    if spec.random_start:
        if rng is None:
            rng = np.random.default_rng(spec.seed)
        start = np.clip(
            image + rng.uniform(-spec.epsilon, spec.epsilon, size=image.shape),
            0.0,
            1.0,
        )
    return _iterate(
        net, extractor, image, label, spec.epsilon, spec.step_size, spec.iterations, start
    )


def run_attack(net, extractor, image, label, spec, rng=None):
    if spec.kind == "FGSM":
        return fgsm(net, extractor, image, label, spec)
    if spec.kind == "BIM":
        return bim(net, extractor, image, label, spec)
    return pgd(net, extractor, image, label, spec, rng=rng)


@dataclass
class AdversarialPairSet:
    """Successful flips paired with their originals.

    Every original is correctly classified by the target and every
    adversarial is misclassified; both facts are re-checked on construction.
    """

    kind: str
    epsilon: float
    originals: np.ndarray  # (m, d)
    adversarials: np.ndarray  # (m, d)
    labels: np.ndarray  # true labels, (m,)
    adv_labels: np.ndarray  # predicted labels of adversarials, (m,)
    flip_rate: float
    no_gradient_count: int = 0

    def __post_init__(self):
        self.originals = np.asarray(self.originals, dtype=np.float64)
        self.adversarials = np.asarray(self.adversarials, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.adv_labels = np.asarray(self.adv_labels, dtype=np.int64)

    def __len__(self):
        return len(self.originals)

    def check(self, net, extractor):
        if len(self) == 0:
            return
        if np.max(np.abs(self.adversarials - self.originals)) > self.epsilon + 1e-12:
            raise AttackError("L-inf budget violated")
        if np.min(self.adversarials) < 0.0 or np.max(self.adversarials) > 1.0:
            raise AttackError("adversarial pixels left [0, 1]")
        orig_pred = nncore.predict(net, extractor, self.originals)
        adv_pred = nncore.predict(net, extractor, self.adversarials)
        if np.any(orig_pred != self.labels):
            raise AttackError("pair set contains a misclassified original")
        if np.any(adv_pred == self.labels):
            raise AttackError("pair set contains an unsuccessful adversarial")


def build_pair_set(net, extractor, test_data, spec):
    """Attack every correctly-classified test image; keep only flips."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    preds = nncore.predict(net, extractor, test_data.images)
    originals, adversarials, labels, adv_labels = [], [], [], []
    attacked = 0
    no_gradient = 0
    for image, label, pred in zip(test_data.images, test_data.labels, preds):
        if pred != label:
            continue
        attacked += 1
        grad = nncore.input_gradient(net, extractor, image, int(label))
        if not np.any(grad):
            no_gradient += 1
            continue
        adv = run_attack(net, extractor, image, int(label), spec, rng=rng)
        adv_pred = int(np.argmax(nncore.forward(net, extractor.transform(adv))))
        if adv_pred != label:
            originals.append(image)
            adversarials.append(adv)
            labels.append(int(label))
            adv_labels.append(adv_pred)
    if attacked == 0:
        raise AttackError("no correctly classified test images to attack")
    if not originals:
        raise AttackError(
            f"{spec.kind} at epsilon={spec.epsilon} flipped nothing; try a larger epsilon"
        )
    pairs = AdversarialPairSet(
        kind=spec.kind,
        epsilon=spec.epsilon,
        originals=np.array(originals),
        adversarials=np.array(adversarials),
        labels=np.array(labels),
        adv_labels=np.array(adv_labels),
        flip_rate=len(originals) / attacked,
        no_gradient_count=no_gradient,
    )
    pairs.check(net, extractor)
    return pairs


# --- persistence -----------------------------------------------------------

def save_pair_set(pairs, stem, meta=None):
    """Write ``<stem>.json`` manifest plus ``<stem>.csv`` vectors.

    CSV rows: true label, adversarial label, original pixels, adversarial
    pixels; full-precision decimals so round-trips are bit-exact. ``meta``
    entries (e.g. a config fingerprint) are merged into the manifest.
    """
    manifest = {
        "kind": pairs.kind,
        "epsilon": pairs.epsilon,
        "count": len(pairs),
        "pixels": int(pairs.originals.shape[1]) if len(pairs) else 0,
        "flip_rate": pairs.flip_rate,
        "no_gradient_count": pairs.no_gradient_count,
    }
    if meta:
        manifest.update(meta)
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    with open(stem + ".csv", "w") as fh:
        for i in range(len(pairs)):
            row = [str(int(pairs.labels[i])), str(int(pairs.adv_labels[i]))]
            row += [repr(float(v)) for v in pairs.originals[i]]
            row += [repr(float(v)) for v in pairs.adversarials[i]]
            fh.write(",".join(row) + "\n")


def load_pair_set(stem):
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    d = manifest["pixels"]
    originals, adversarials, labels, adv_labels = [], [], [], []
    with open(stem + ".csv") as fh:
        for line in fh:
            parts = line.strip().split(",")
            labels.append(int(parts[0]))
            adv_labels.append(int(parts[1]))
            vals = [float(v) for v in parts[2:]]
            originals.append(vals[:d])
            adversarials.append(vals[d:])
    return AdversarialPairSet(
        kind=manifest["kind"],
        epsilon=manifest["epsilon"],
        originals=np.array(originals).reshape(-1, d),
        adversarials=np.array(adversarials).reshape(-1, d),
        labels=np.array(labels, dtype=np.int64),
        adv_labels=np.array(adv_labels, dtype=np.int64),
        flip_rate=manifest["flip_rate"],
        no_gradient_count=manifest["no_gradient_count"],
    )
