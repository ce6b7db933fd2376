"""End-to-end experiment stages over a workspace directory.

Each stage reads its input artifacts, verifies their embedded config
fingerprint, and writes versioned outputs. Completed stages whose artifacts
carry the current fingerprint are skipped, which makes run-all resumable.
"""

import hashlib
import json
import os

import numpy as np

from . import attacks, behavior, detector, graphdata, nncore
from .config import ATTACK_NAMES
from .errors import MissingArtifactError

KINDS_WITH_TOTAL = tuple(list(ATTACK_NAMES) + ["TOTAL"])


def _path(cfg, *parts):
    return os.path.join(cfg.workdir, *parts)


def _ensure_dir(path):
    os.makedirs(os.path.dirname(path), exist_ok=True)


def _json_fingerprint(path):
    try:
        with open(path) as fh:
            return json.load(fh).get("config_fingerprint")
    except (OSError, json.JSONDecodeError):
        return None


def _archive_fingerprint(path):
    try:
        with open(path) as fh:
            return json.loads(fh.readline()).get("config_fingerprint")
    except (OSError, json.JSONDecodeError):
        return None


def _require(path, stage, fingerprint, reader=_json_fingerprint):
    if not os.path.exists(path):
        raise MissingArtifactError(f"stage {stage}: missing input artifact {path}")
    found = reader(path)
    if found != fingerprint:
        raise MissingArtifactError(
            f"stage {stage}: artifact {path} was produced by a different config "
            f"(fingerprint {found} != {fingerprint})"
        )


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --- stages ----------------------------------------------------------------

def gen_data(cfg, log=print):
    meta_path = _path(cfg, "data", "meta.json")
    if _json_fingerprint(meta_path) == cfg.fingerprint:
        log("gen-data: up to date, skipping")
        return
    d = cfg.doc["data"]
    data = nncore.gen_synthetic_data(
        d["side"], d["samples_per_class"], d["noise"], cfg.seed("data")
    )
    train, test = nncore.stratified_split(
        data, cfg.doc["target_split"], cfg.seed("target-split")
    )
    _ensure_dir(meta_path)
    for name, subset in (("full", data), ("train", train), ("test", test)):
        nncore.save_image_csv(subset, _path(cfg, "data", f"{name}.csv"))
    meta = {
        "config_fingerprint": cfg.fingerprint,
        "counts": {"full": len(data), "train": len(train), "test": len(test)},
        "checksums": {
            name: _file_sha256(_path(cfg, "data", f"{name}.csv"))
            for name in ("full", "train", "test")
        },
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2)
    log(f"gen-data: {len(data)} images ({len(train)} train / {len(test)} test)")


def train_target(cfg, log=print):
    out_path = _path(cfg, "target.json")
    if _json_fingerprint(out_path) == cfg.fingerprint:
        log("train-target: up to date, skipping")
        return
    _require(_path(cfg, "data", "meta.json"), "train-target", cfg.fingerprint)
    train = nncore.load_image_csv(_path(cfg, "data", "train.csv"))
    test = nncore.load_image_csv(_path(cfg, "data", "test.csv"))
    extractor = cfg.build_extractor()
    net = nncore.init_network(
        cfg.classifier_sizes(), cfg.classifier_activations(), cfg.seed("target-init")
    )
    net, report = nncore.train_target(
        net, extractor, train, cfg.target_train_config(), test_data=test
    )
    doc = nncore.network_to_dict(net)
    doc["config_fingerprint"] = cfg.fingerprint
    doc["extractor"] = nncore.extractor_to_dict(extractor)
    doc["report"] = {k: v for k, v in report.items() if k != "loss_curve"}
    _ensure_dir(out_path)
    with open(out_path, "w") as fh:
        json.dump(doc, fh)
    log(
        "train-target: train acc {train_accuracy:.4f}, test acc {test_accuracy:.4f}".format(
            **report
        )
    )


def load_target(cfg, stage):
    path = _path(cfg, "target.json")
    _require(path, stage, cfg.fingerprint)
    with open(path) as fh:
        doc = json.load(fh)
    return nncore.network_from_dict(doc), nncore.extractor_from_dict(doc["extractor"])


def attack(cfg, kind, log=print):
    stem = _path(cfg, "pairs", kind.lower())
    if _json_fingerprint(stem + ".json") == cfg.fingerprint:
        log(f"attack {kind}: up to date, skipping")
        return
    net, extractor = load_target(cfg, f"attack {kind}")
    test = nncore.load_image_csv(_path(cfg, "data", "test.csv"))
    pairs = attacks.build_pair_set(net, extractor, test, cfg.attack_spec(kind))
    _ensure_dir(stem + ".json")
    attacks.save_pair_set(pairs, stem, meta={"config_fingerprint": cfg.fingerprint})
    log(f"attack {kind}: {len(pairs)} pairs, flip rate {pairs.flip_rate:.3f}")


def fit_spec(cfg, log=print):
    out_path = _path(cfg, "spec_table.json")
    if _json_fingerprint(out_path) == cfg.fingerprint:
        log("fit-spec: up to date, skipping")
        return
    net, extractor = load_target(cfg, "fit-spec")
    train = nncore.load_image_csv(_path(cfg, "data", "train.csv"))
    table = behavior.fit_specialization(net, extractor, train, cfg.attribute_params().k)
    behavior.save_specialization_table(
        table, out_path, meta={"config_fingerprint": cfg.fingerprint}
    )
    log(f"fit-spec: fitted on {table.class_counts} images per class")


def build_graphs(cfg, log=print):
    params = cfg.attribute_params()
    net, extractor = load_target(cfg, "build-graphs")
    _require(_path(cfg, "spec_table.json"), "build-graphs", cfg.fingerprint)
    table = behavior.load_specialization_table(_path(cfg, "spec_table.json"))
    per_kind = []
    for kind in ATTACK_NAMES:
        out_path = _path(cfg, "graphs", f"{kind.lower()}.jsonl")
        if _archive_fingerprint(out_path) == cfg.fingerprint:
            log(f"build-graphs {kind}: up to date, skipping")
            per_kind.append(graphdata.deserialize(out_path))
            continue
        stem = _path(cfg, "pairs", kind.lower())
        _require(stem + ".json", "build-graphs", cfg.fingerprint)
        pairs = attacks.load_pair_set(stem)
        dataset = graphdata.build_dataset(net, extractor, pairs, table, params)
        _ensure_dir(out_path)
        graphdata.serialize(
            dataset, out_path, meta={"config_fingerprint": cfg.fingerprint}
        )
        per_kind.append(dataset)
        log(f"build-graphs {kind}: {len(dataset)} graph samples")
    total_path = _path(cfg, "graphs", "total.jsonl")
    if _archive_fingerprint(total_path) != cfg.fingerprint:
        total = graphdata.merge(*per_kind)
        graphdata.serialize(
            total, total_path, meta={"config_fingerprint": cfg.fingerprint}
        )
        log(f"build-graphs TOTAL: {len(total)} graph samples")


def _load_graphs(cfg, kind, stage):
    path = _path(cfg, "graphs", f"{kind.lower()}.jsonl")
    _require(path, stage, cfg.fingerprint, reader=_archive_fingerprint)
    return graphdata.deserialize(path)


def _split_graphs(cfg, dataset):
    return graphdata.split(
        dataset, cfg.doc["detector_split"], cfg.seed("detector-split")
    )


def train_detector_stage(cfg, kind, log=print):
    out_path = _path(cfg, "detectors", f"{kind.lower()}.json")
    if _json_fingerprint(out_path) == cfg.fingerprint:
        log(f"train-detector {kind}: up to date, skipping")
        return
    dataset = _load_graphs(cfg, kind, f"train-detector {kind}")
    train, test = _split_graphs(cfg, dataset)
    node_count = train.samples[0].attributes.shape[0]
    width = train.samples[0].attributes.shape[1]
    model = detector.init_detector(
        node_count, width, cfg.seed(f"detector:{kind}"), dataset.fingerprint
    )
    trained, history = detector.train_detector(
        model, train, test, cfg.detector_train_config()
    )
    report = detector.evaluate(trained, test)
    _ensure_dir(out_path)
    detector.save_detector(
        trained, out_path, meta={"config_fingerprint": cfg.fingerprint}
    )
    history_path = _path(cfg, "reports", f"history_{kind.lower()}.csv")
    _ensure_dir(history_path)
    with open(history_path, "w") as fh:
        fh.write(detector.history_to_csv(history))
    with open(_path(cfg, "reports", f"eval_{kind.lower()}.json"), "w") as fh:
        json.dump(
            {"config_fingerprint": cfg.fingerprint, **report.to_dict()}, fh, indent=2
        )
    log(
        f"train-detector {kind}: test acc {report.accuracy:.4f}, "
        f"loss {report.loss:.4f}"
    )


def evaluate_stage(cfg, kind, log=print):
    det_path = _path(cfg, "detectors", f"{kind.lower()}.json")
    _require(det_path, f"evaluate {kind}", cfg.fingerprint)
    model = detector.load_detector(det_path)
    dataset = _load_graphs(cfg, kind, f"evaluate {kind}")
    if model.fingerprint != dataset.fingerprint:
        raise MissingArtifactError(
            f"evaluate {kind}: detector fingerprint {model.fingerprint} does not "
            f"match dataset fingerprint {dataset.fingerprint} (different "
            "AttributeParams or classifier shape)"
        )
    _, test = _split_graphs(cfg, dataset)
    report = detector.evaluate(model, test)
    log(json.dumps(report.to_dict(), indent=2))
    return report


def ablate_stage(cfg, log=print):
    out_path = _path(cfg, "reports", "ablation.json")
    if _json_fingerprint(out_path) == cfg.fingerprint:
        log("ablate: up to date, skipping")
        return
    dataset = _load_graphs(cfg, "TOTAL", "ablate")
    train, test = _split_graphs(cfg, dataset)
    reports = detector.ablate(
        train,
        test,
        cfg.detector_train_config("ablation_training"),
        cfg.seed("ablation"),
    )
    _ensure_dir(out_path)
    with open(out_path, "w") as fh:
        json.dump(
            {
                "config_fingerprint": cfg.fingerprint,
                "reports": {k: r.to_dict() for k, r in reports.items()},
            },
            fh,
            indent=2,
        )
    csv_path = _path(cfg, "reports", "ablation.csv")
    with open(csv_path, "w") as fh:
        fh.write("detector,accuracy,loss\n")
        for name, report in reports.items():
            fh.write(f"{name},{report.accuracy!r},{report.loss!r}\n")
    for name, report in reports.items():
        log(f"ablate {name}: accuracy {report.accuracy:.4f}")


def stats_stage(cfg, log=print):
    dataset = _load_graphs(cfg, "TOTAL", "stats")
    result = graphdata.stats(dataset)
    out_path = _path(cfg, "reports", "stats.csv")
    _ensure_dir(out_path)
    with open(out_path, "w") as fh:
        fh.write(result.to_csv())
    log(f"stats: written to {out_path}")
    return result


def correlations_stage(cfg, log=print):
    dataset = _load_graphs(cfg, "TOTAL", "correlations")
    result = graphdata.correlations(dataset)
    out_path = _path(cfg, "reports", "correlations.csv")
    _ensure_dir(out_path)
    with open(out_path, "w") as fh:
        fh.write(result.to_csv())
    log(f"correlations: written to {out_path}")
    return result


def export_graph_stage(cfg, kind, index, channel, cls=0, log=print):
    dataset = _load_graphs(cfg, kind, "export-graph")
    if not 0 <= index < len(dataset):
        raise MissingArtifactError(
            f"export-graph: sample index {index} out of range (dataset has "
            f"{len(dataset)} samples)"
        )
    net, extractor = load_target(cfg, "export-graph")
    sample = dataset.samples[index]
    # rebuild the behavior graph's activation structure from the stored sample
    graph = behavior.BehaviorGraph(
        layer_sizes=list(dataset.layer_sizes),
        activations=_activations_from_sample(sample, dataset.layer_sizes),
        sample_id=sample.provenance,
    )
    dot = behavior.export_attributed_graph(graph, sample.attributes, channel, cls=cls)
    out_path = _path(cfg, "exports", f"{kind.lower()}_{index}_{channel}.dot")
    _ensure_dir(out_path)
    with open(out_path, "w") as fh:
        fh.write(dot)
    log(f"export-graph: written to {out_path}")
    return out_path


def _activations_from_sample(sample, layer_sizes):
    """Synthesize 0/1 activation vectors from the stored alive pattern, just
    enough for edge reconstruction in exports."""
    alive = graphdata._alive_mask(sample, layer_sizes).astype(np.float64)
    # the last layer's nodes have no outgoing edges; treat them as alive
    alive[sum(layer_sizes[:-1]) :] = 1.0
    offsets = np.cumsum([0] + list(layer_sizes))
    return [alive[offsets[i] : offsets[i + 1]] for i in range(len(layer_sizes))]


def run_all(cfg, log=print):
    gen_data(cfg, log)
    train_target(cfg, log)
    for kind in ATTACK_NAMES:
        attack(cfg, kind, log)
    fit_spec(cfg, log)
    build_graphs(cfg, log)
    for kind in KINDS_WITH_TOTAL:
        train_detector_stage(cfg, kind, log)
    stats_stage(cfg, log)
    correlations_stage(cfg, log)
    ablate_stage(cfg, log)
    summary_path = write_summary(cfg)
    log(f"run-all: summary written to {summary_path}")


def write_summary(cfg):
    lines = ["graphshield experiment summary", f"config fingerprint: {cfg.fingerprint}", ""]
    lines.append("detector results (test split):")
    results_csv = ["detector,accuracy,loss"]
    for kind in KINDS_WITH_TOTAL:
        with open(_path(cfg, "reports", f"eval_{kind.lower()}.json")) as fh:
            report = json.load(fh)
        lines.append(
            f"  {kind:<6} accuracy {report['accuracy']:.4f}  loss {report['loss']:.4f}"
        )
        results_csv.append(f"{kind},{report['accuracy']!r},{report['loss']!r}")
    with open(_path(cfg, "reports", "results.csv"), "w") as fh:
        fh.write("\n".join(results_csv) + "\n")
    lines.append("")
    with open(_path(cfg, "reports", "ablation.json")) as fh:
        ablation = json.load(fh)["reports"]
    lines.append("attribute ablation (TOTAL dataset):")
    for name, report in ablation.items():
        lines.append(f"  {name:<18} accuracy {report['accuracy']:.4f}")
    lines.append("")
    lines.append("see reports/stats.csv and reports/correlations.csv for the")
    lines.append("attribute statistics and Pearson correlation matrix")
    summary_path = _path(cfg, "reports", "summary.txt")
    with open(summary_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return summary_path
