"""Pipeline configuration: one JSON file, one master seed.

Per-stage seeds are derived deterministically from the master seed and the
stage name, so a single number reproduces the whole experiment. Every
artifact embeds the config fingerprint (a hash of the canonical config
document) and stages refuse inputs whose fingerprint does not match.
"""

from dataclasses import dataclass, field
import hashlib
import json

from .attacks import AttackSpec
from .behavior import AttributeParams
from .detector import DetectorTrainConfig
from .errors import ConfigError
from .nncore import TargetTrainConfig

ATTACK_NAMES = ("FGSM", "BIM", "PGD")

DEFAULT_CONFIG = {
    "master_seed": 0,
    "workdir": "runs/default",
    "data": {"side": 16, "samples_per_class": 200, "noise": 0.1},
    "extractor": {"kind": "downsample", "factor": 2},
    "classifier": {"hidden": [32], "activation": "sigmoid", "classes": 2},
    "target_split": 0.7,
    "target_training": {"learning_rate": 0.5, "batch_size": 16, "epochs": 200},
    "attacks": {
        "FGSM": {"epsilon": 0.1},
        "BIM": {"epsilon": 0.1, "step_size": 0.02, "iterations": 10},
        "PGD": {
            "epsilon": 0.1,
            "step_size": 0.02,
            "iterations": 10,
            "random_start": True,
        },
    },
    "attributes": {"p": 0.5, "k": 10, "t": 2, "tau": 0.0},
    "detector_split": 0.8,
    "detector_training": {"learning_rate": 0.001, "batch_size": 32, "epochs": 30},
    "ablation_training": {"learning_rate": 0.001, "batch_size": 32, "epochs": 20},
}


def stage_seed(master_seed, stage):
    """Stable 32-bit seed derived from the master seed and a stage name."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass
class PipelineConfig:
    doc: dict

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file does not parse: {exc}")
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc):
        merged = json.loads(json.dumps(DEFAULT_CONFIG))
        for key, value in doc.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key].update(value)
            else:
                merged[key] = value
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def validate(self):
        """Collect every problem before failing, so one run reports all."""
        errors = []
        d = self.doc
        data = d["data"]
        if data["side"] < 2 or data["side"] % 2 != 0:
            errors.append("data.side must be an even integer >= 2")
        if data["samples_per_class"] < 2:
            errors.append("data.samples_per_class must be >= 2")
        if data["noise"] < 0:
            errors.append("data.noise must be >= 0")
        ex = d["extractor"]
        if ex["kind"] not in ("identity", "downsample", "random_projection"):
            errors.append(f"unknown extractor kind {ex['kind']!r}")
        if ex["kind"] == "downsample" and data["side"] % ex.get("factor", 2) != 0:
            errors.append("extractor.factor must divide data.side")
        for frac_key in ("target_split", "detector_split"):
            if not 0.0 < d[frac_key] < 1.0:
                errors.append(f"{frac_key} must be in (0, 1)")
        for name in ("target_training", "detector_training", "ablation_training"):
            sec = d[name]
            if sec["learning_rate"] <= 0 or sec["batch_size"] < 1 or sec["epochs"] < 0:
                errors.append(f"{name} has invalid settings")
        for name in ATTACK_NAMES:
            if name not in d["attacks"]:
                errors.append(f"attacks.{name} missing")
                continue
            try:
                self.attack_spec(name).validate()
            except ConfigError as exc:
                errors.append(f"attacks.{name}: {exc}")
        try:
            self.attribute_params().validate()
        except ConfigError as exc:
            errors.append(f"attributes: {exc}")
        if d["attributes"]["t"] != d["classifier"].get("classes", 2):
            errors.append("attributes.t must equal classifier.classes")
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))

    @property
    def fingerprint(self):
        # the workdir is where the experiment lives, not what it computes;
        # moving a run must not invalidate its artifacts
        semantic = {k: v for k, v in self.doc.items() if k != "workdir"}
        canonical = json.dumps(semantic, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @property
    def master_seed(self):
        return self.doc["master_seed"]

    @property
    def workdir(self):
        return self.doc["workdir"]

    def seed(self, stage):
        return stage_seed(self.master_seed, stage)

    def feature_dim(self):
        side = self.doc["data"]["side"]
        ex = self.doc["extractor"]
        if ex["kind"] == "identity":
            return side * side
        if ex["kind"] == "downsample":
            return (side // ex["factor"]) ** 2
        return ex["out_dim"]

    def classifier_sizes(self):
        return (
            [self.feature_dim()]
            + list(self.doc["classifier"]["hidden"])
            + [self.doc["classifier"].get("classes", 2)]
        )

    def classifier_activations(self):
        act = self.doc["classifier"].get("activation", "sigmoid")
        return [act] * (len(self.doc["classifier"]["hidden"]) + 1)

    def build_extractor(self):
        from . import nncore

        side = self.doc["data"]["side"]
        ex = self.doc["extractor"]
        if ex["kind"] == "identity":
            return nncore.FeatureExtractor.identity(side * side)
        if ex["kind"] == "downsample":
            return nncore.FeatureExtractor.downsample(side, ex["factor"])
        return nncore.FeatureExtractor.random_projection(
            side * side, ex["out_dim"], ex.get("seed", self.seed("extractor"))
        )

    def attack_spec(self, kind):
        sec = dict(self.doc["attacks"][kind])
        sec.setdefault("seed", self.seed(f"attack:{kind}"))
        return AttackSpec(kind=kind, **sec)

    def attribute_params(self):
        return AttributeParams(**self.doc["attributes"])

    def target_train_config(self):
        return TargetTrainConfig(seed=self.seed("target"), **self.doc["target_training"])

    def detector_train_config(self, section="detector_training"):
        return DetectorTrainConfig(
            seed=self.seed(section), **self.doc[section]
        )


def write_default_config(path):
    with open(path, "w") as fh:
        json.dump(DEFAULT_CONFIG, fh, indent=2)
        fh.write("\n")
