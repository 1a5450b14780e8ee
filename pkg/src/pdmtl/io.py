"""Config files, dataset files, and run output bundles.

Config files are YAML mappings of :class:`RunConfig` fields, with a nested
``data`` section and an optional top-level ``output_dir``.  Unknown keys are
errors.  A run writes the bundle below into its output directory:

``losses.csv``      epoch, task_id, train_loss, test_loss
``topology.json``   per-epoch mixing matrix, transference, spectrum, clusters
``heatmaps.csv``    epoch, row, w_0 .. w_{n-1}  (one n x n grid per epoch)
``config.yaml``     the fully resolved config
``timing.csv``      wall-clock seconds per epoch (not deterministic)
``manifest.json``   schema version and file list
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from . import topology as topo
from .datagen import CovarianceSpec, Split, SyntheticDataset, dataset_key
from .nn import ConfigurationError
from .trainer import RunConfig, RunMetrics

SCHEMA_VERSION = 1
BUNDLE_FILES = ("losses.csv", "topology.json", "heatmaps.csv", "config.yaml", "timing.csv", "manifest.json")
CONVERGENCE_TOL = 0.05


class ConfigParseError(ConfigurationError):
    pass


def parse_config_text(text: str, source="<config>") -> Tuple[RunConfig, Optional[str]]:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigParseError(f"{source}: parse error at {where}: {getattr(exc, 'problem', exc)}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigParseError(f"{source}: top level must be a mapping")
    doc = dict(doc)
    out_dir = doc.pop("output_dir", None)
    try:
        config = RunConfig.from_dict(doc).validate()
    except TypeError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    return config, out_dir


def parse_config(path) -> Tuple[RunConfig, Optional[str]]:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def dump_config(config: RunConfig, output_dir=None) -> str:
    doc = config.to_dict()
    if output_dir is not None:
        doc["output_dir"] = str(output_dir)
    return yaml.safe_dump(doc, sort_keys=False)


def convergence_epoch(losses, tol=CONVERGENCE_TOL) -> int:
    """First (1-based) epoch whose loss is within ``tol`` of the run minimum."""
    losses = np.asarray(losses, dtype=np.float64)
    return int(np.flatnonzero(losses <= (1.0 + tol) * losses.min())[0]) + 1


def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"refusing to write non-finite value {x!r}")
    return repr(float(x))


def write_bundle(metrics: RunMetrics, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = metrics.config.n_clients

    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "task_id", "train_loss", "test_loss"])
        for rec in metrics.epochs:
            for k in range(n):
                w.writerow([rec.epoch, k, _fmt(rec.train_loss[k]), _fmt(rec.test_loss[k])])

    with open(out / "heatmaps.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "row"] + [f"w_{j}" for j in range(n)])
        for rec in metrics.epochs:
            topo.check_doubly_stochastic(rec.w)
            for i in range(n):
                w.writerow([rec.epoch, i] + [_fmt(v) for v in rec.w[i]])

    topology = {
        "schema_version": SCHEMA_VERSION,
        "n_clients": n,
        "epochs": [rec.topology_dict() for rec in metrics.epochs],
    }
    (out / "topology.json").write_text(json.dumps(topology, allow_nan=False, indent=1) + "\n", encoding="utf-8")
    (out / "config.yaml").write_text(dump_config(metrics.config), encoding="utf-8")

    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for rec in metrics.epochs:
            w.writerow([rec.epoch, f"{rec.wall_clock:.4f}"])

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "files": list(BUNDLE_FILES),
        "convergence_definition": f"first epoch with test_loss <= {1 + CONVERGENCE_TOL:g} * min(test_loss)",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return out


def read_losses(path) -> Dict[int, Dict[str, List[float]]]:
    """``{task_id: {"epoch": [...], "train_loss": [...], "test_loss": [...]}}``."""
    tasks: Dict[int, Dict[str, List[float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = {"epoch", "task_id", "train_loss", "test_loss"}
        if reader.fieldnames is None or not expected <= set(reader.fieldnames):
            raise ConfigurationError(f"{path}: not a losses.csv file (columns {reader.fieldnames})")
        for row in reader:
            t = tasks.setdefault(int(row["task_id"]), {"epoch": [], "train_loss": [], "test_loss": []})
            t["epoch"].append(int(row["epoch"]))
            t["train_loss"].append(float(row["train_loss"]))
            t["test_loss"].append(float(row["test_loss"]))
    return tasks


def compare_losses(path_a, path_b, tol=CONVERGENCE_TOL) -> List[dict]:
    """Per-task convergence epochs of two runs (a: candidate, b: baseline)."""
    a, b = read_losses(path_a), read_losses(path_b)
    if set(a) != set(b):
        raise ConfigurationError(f"task sets differ: {sorted(a)} vs {sorted(b)}")
    rows = []
    for task in sorted(a):
        ca = convergence_epoch(a[task]["test_loss"], tol)
        cb = convergence_epoch(b[task]["test_loss"], tol)
        rows.append(
            {
                "task_id": task,
                "convergence_a": ca,
                "convergence_b": cb,
                "speedup": cb / ca,
                "final_a": a[task]["test_loss"][-1],
                "final_b": b[task]["test_loss"][-1],
            }
        )
    return rows


def format_comparison(rows: List[dict], label_a="a", label_b="b") -> str:
    lines = [
        f"convergence epoch = first epoch with test loss <= {1 + CONVERGENCE_TOL:g} x run minimum",
        f"{'task':>4}  {label_a:>10}  {label_b:>10}  {'speedup':>7}  {'final_' + label_a:>12}  {'final_' + label_b:>12}",
    ]
    for r in rows:
        lines.append(
            f"{r['task_id']:>4}  {r['convergence_a']:>10}  {r['convergence_b']:>10}  "
            f"{r['speedup']:>7.2f}  {r['final_a']:>12.5f}  {r['final_b']:>12.5f}"
        )
    return "\n".join(lines)


def load_transference(path, epoch=None) -> np.ndarray:
    """Read a Z snapshot: a topology.json (latest epoch with Z unless ``epoch``
    is given), a JSON ``{"z": [[...]]}`` / bare nested list, or a CSV grid."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".csv":
        return np.array([[float(v) for v in line.split(",")] for line in text.splitlines() if line.strip()])
    doc = json.loads(text)
    if isinstance(doc, dict) and "epochs" in doc:
        recs = [r for r in doc["epochs"] if r.get("z") is not None]
        if epoch is not None:
            recs = [r for r in recs if r["epoch"] == epoch]
        if not recs:
            raise ConfigurationError(f"{path}: no transference snapshot" + (f" at epoch {epoch}" if epoch else ""))
        return np.array(recs[-1]["z"], dtype=np.float64)
    if isinstance(doc, dict):
        doc = doc["z"]
    return np.array(doc, dtype=np.float64)


def save_dataset(ds: SyntheticDataset, path) -> Path:
    """``.npz`` archive: a JSON header plus the raw float64/int8 arrays."""
    header = {
        "schema_version": SCHEMA_VERSION,
        "dim": ds.spec.dim,
        "splits": [len(ds.train), len(ds.test), len(ds.shared)],
        "seed": ds.seed,
        "tracked_coords": ds.tracked_coords,
        "covariance": ds.spec.to_dict(),
        "digest": ds.cache_key(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(header, sort_keys=True)),
            train_x=ds.train.x,
            train_y=ds.train.labels,
            test_x=ds.test.x,
            test_y=ds.test.labels,
            shared_x=ds.shared.x,
            shared_y=ds.shared.labels,
        )
    return path


def load_dataset(path) -> SyntheticDataset:
    with np.load(path, allow_pickle=False) as f:
        header = json.loads(str(f["header"]))
        ds = SyntheticDataset(
            spec=CovarianceSpec.from_dict(header["covariance"]),
            tracked_coords=list(header["tracked_coords"]),
            seed=int(header["seed"]),
            train=Split(f["train_x"], f["train_y"]),
            test=Split(f["test_x"], f["test_y"]),
            shared=Split(f["shared_x"], f["shared_y"]),
        )
    if ds.cache_key() != header["digest"]:
        raise ConfigurationError(f"{path}: header digest does not match contents")
    return ds


def cached_dataset(config: RunConfig, cache_dir) -> SyntheticDataset:
    """Load the dataset for ``config`` from ``cache_dir``, generating it once."""
    from .datagen import COVARIANCES, make_dataset

    make_spec, coords = COVARIANCES[config.data.covariance]
    spec = make_spec()
    splits = (config.data.n_train, config.data.n_test, config.data.n_shared)
    digest = dataset_key(spec, coords, config.data_seed, splits)
    path = Path(cache_dir) / f"dataset-{digest}.npz"
    if path.exists():
        return load_dataset(path)
    ds = make_dataset(spec, coords, *splits, seed=config.data_seed)
    save_dataset(ds, path)
    return ds
