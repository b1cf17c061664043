"""Experiment harness: disk artifacts for runs, the weight-norm study, and
SL/CR heatmap exports.

Every run writes into its own directory named ``<name>-<confighash>-s<seed>``:

    metrics.csv     one row per round (append-only, flushed per round)
    summary.json    config echo, final metrics, communication accounting
    sl_matrix.json  final global SL matrix (skipped for local-only runs)
    cr_matrix.json  final softmaxed CR matrix of the aggregated model
    model.params / model.json   final model checkpoint

The metrics CSV contains only deterministic columns so byte-identity checks
across reruns and worker counts hold; wall-clock timings go to the summary.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import shutil
import warnings
from pathlib import Path

import numpy as np
import scipy.stats

from . import engine, nn
from .config import RunConfig, config_hash, materialize, to_dict
from .consistency import SLMatrix, cr_matrix, sl_cr_distance
from .errors import ArtifactNotFoundError, InvalidInputError
from .numerics import Rng, softmax_rows

METRIC_COLUMNS = ("t", "accuracy", "loss", "cla_loss", "reg_loss",
                  "sl_cr_distance", "participants")
SCHEMA_VERSION = 1


def _fmt(value: float) -> str:
    return repr(float(value))


def _record_row(record: engine.RoundRecord) -> list[str]:
    return [
        str(record.round_index),
        _fmt(record.accuracy),
        _fmt(record.test_loss),
        _fmt(record.cla_loss),
        _fmt(record.reg_loss),
        _fmt(record.sl_cr_distance),
        ";".join(str(i) for i in record.participants),
    ]


def run_dir_name(config: RunConfig) -> str:
    return f"{config.name}-{config_hash(config)}-s{config.seed}"


def run_experiment(config: RunConfig, out_root, force: bool = False) -> Path:
    """Execute one run and write its artifact directory; returns its path."""
    out_dir = Path(out_root) / run_dir_name(config)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise FileExistsError(
                f"output directory {out_dir} exists and is not empty (use force to overwrite)"
            )
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train, test = materialize(config.dataset, config.seed)
    with open(out_dir / "metrics.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        handle.flush()

        def sink(record: engine.RoundRecord) -> None:
            writer.writerow(_record_row(record))
            handle.flush()

        result = engine.run(config, train, test, on_round=sink)

    records, model = result.records, result.model
    params = nn.param_count(model)
    class_count = train.class_count
    strategy = config.strategy
    upload = engine.upload_bytes_per_client(params, class_count, strategy)
    download = engine.download_bytes_per_client(params, class_count, strategy)
    participant_rounds = sum(len(r.participants) for r in records)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "name": config.name,
        "config": to_dict(config),
        "config_hash": config_hash(config),
        "rounds_completed": len(records),
        "final": {
            "accuracy": records[-1].accuracy if records else None,
            "test_loss": records[-1].test_loss if records else None,
            "sl_cr_distance": records[-1].sl_cr_distance if records else None,
        },
        "communication": {
            "param_scalars": params,
            "upload_bytes_per_client_per_round": upload,
            "download_bytes_per_client_per_round": download,
            "total_upload_bytes": upload * participant_rounds,
            "total_download_bytes": download * participant_rounds,
        },
        "round_millis": [r.millis for r in records],
        "total_millis": sum(r.millis for r in records),
    }
    (out_dir / "summary.json").write_text(_to_json(summary) + "\n")

    nn.save_model(model, out_dir, "model")
    if result.global_sl is not None:
        (out_dir / "sl_matrix.json").write_text(_to_json(result.global_sl.to_dict()) + "\n")
        cr = softmax_rows(cr_matrix(model.classifier_weights))
        (out_dir / "cr_matrix.json").write_text(_to_json({
            "class_count": class_count,
            "values": cr.tolist(),
        }) + "\n")
    return out_dir


def _to_json(payload) -> str:
    def default(obj):
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        raise TypeError(f"not JSON serializable: {type(obj)}")

    return json.dumps(payload, indent=2, sort_keys=False, default=default)


def norm_study(proportions, config: RunConfig, out_path=None) -> dict:
    """Centralized study of classifier weight-row norms vs class proportions.

    Resamples the configured training set to the requested class
    proportions, trains a single bias-free model, and reports each class's
    relative weight norm ``||w_c|| / sum_i ||w_i||`` with the Spearman rank
    correlation between proportion and relative norm over classes that have
    data. The correlation is reported, never asserted: it is an
    observational quantity with known counterexamples.
    """
    p = np.asarray(proportions, dtype=np.float64)
    if p.ndim != 1:
        raise InvalidInputError("proportions must be a 1-D vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidInputError("proportions must be finite and non-negative")
    if not np.any(p > 0):
        raise InvalidInputError("at least one class proportion must be positive")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InvalidInputError(f"proportions must sum to 1, got {p.sum()}")

    train, _ = materialize(config.dataset, config.seed)
    class_count = train.class_count
    if p.size != class_count:
        raise InvalidInputError(f"{p.size} proportions for {class_count} classes")

    rng = Rng(config.seed).child("norm-study")
    gen = rng.child("resample").generator
    total = len(train)
    chunks_x, chunks_y = [], []
    for c in range(class_count):
        want = int(round(p[c] * total))
        if p[c] > 0:
            want = max(1, want)
        if want == 0:
            continue
        pool = np.flatnonzero(train.labels == c)
        if pool.size == 0:
            raise InvalidInputError(f"class {c} has a positive proportion but no samples")
        take = gen.choice(pool, size=want, replace=want > pool.size)
        chunks_x.append(train.features[take])
        chunks_y.append(train.labels[take])
    features = np.concatenate(chunks_x)
    labels = np.concatenate(chunks_y)
    order = gen.permutation(labels.size)
    features, labels = features[order], labels[order]

    spec = nn.ModelSpec(
        input_dim=features.shape[1],
        class_count=class_count,
        hidden=config.model.hidden,
        embed=config.model.embed,
        classifier_bias=False,
    )
    model = nn.init_model(spec, rng.child("init"))
    central = dataclasses.replace(
        config, local_epochs=max(1, config.rounds * config.local_epochs)
    )
    report = engine.client_train(
        model, SLMatrix.uniform(class_count), features, labels, class_count,
        engine.FedAvg(), central, rng.child("train"),
    )
    nn.set_flat_params(model, report.params)

    norms = np.linalg.norm(model.classifier_weights, axis=1)
    relative = norms / norms.sum()
    with_data = np.flatnonzero(p > 0)
    spearman = None
    if with_data.size >= 2:
        with warnings.catch_warnings():
            # constant proportions (uniform study) legitimately have no rank
            warnings.simplefilter("ignore", scipy.stats.ConstantInputWarning)
            rho = scipy.stats.spearmanr(p[with_data], relative[with_data]).statistic
        spearman = float(rho) if math.isfinite(rho) else None

    result = {
        "schema_version": SCHEMA_VERSION,
        "proportions": p.tolist(),
        "relative_norms": relative.tolist(),
        "classes_with_data": [int(c) for c in with_data],
        "spearman_proportion_vs_norm": spearman,
        "samples": int(labels.size),
        "seed": config.seed,
    }
    if out_path is not None:
        Path(out_path).write_text(_to_json(result) + "\n")
    return result


def _require(path: Path) -> Path:
    if not path.exists():
        raise ArtifactNotFoundError(f"missing run artifact: {path}")
    return path


def heatmap_export(run_dir, out_dir=None) -> dict:
    """Emit SL and softmaxed-CR grids plus their Frobenius distance.

    Reads a completed run directory (needs the final model checkpoint and
    the global SL matrix export) and writes ``heatmap.json`` plus plain CSV
    grids suitable for external plotting.
    """
    run_dir = Path(run_dir)
    sl_path = _require(run_dir / "sl_matrix.json")
    _require(run_dir / "model.json")
    _require(run_dir / "model.params")
    sl = SLMatrix.from_dict(json.loads(sl_path.read_text()))
    model = nn.load_model(run_dir, "model")
    cr = softmax_rows(cr_matrix(model.classifier_weights))
    distance = sl_cr_distance(sl, model.classifier_weights)

    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "class_count": sl.class_count,
        "sl": sl.values.tolist(),
        "cr_softmax": cr.tolist(),
        "distance": distance,
    }
    (out / "heatmap.json").write_text(_to_json(payload) + "\n")
    for stem, grid in (("sl_heatmap", sl.values), ("cr_heatmap", cr)):
        with open(out / f"{stem}.csv", "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            for row in grid:
                writer.writerow([_fmt(v) for v in row])
    return payload
