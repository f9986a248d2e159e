"""On-disk formats: matrix CSV, label files, dataset bundles, logs, manifests.

Matrices are stored as human-inspectable CSV with a header line
``# rows=<K> cols=<d> unit_rows=<0|1>`` and 17-significant-digit floats, which
round-trips float64 exactly.  All writes are atomic (temp file + rename) and
every command directory carries a manifest whose input hashes can be
re-verified.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corelinalg import EmbeddingMatrix
from .errors import NonFinite, ShapeMismatch

TOOL_VERSION = "0.1.0"

FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.txt"
MANIFEST_FILE = "manifest.json"


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_matrix(path: str | Path, m: EmbeddingMatrix) -> None:
    lines = [f"# rows={m.rows} cols={m.cols} unit_rows={1 if m.unit_rows else 0}"]
    for row in m.data:
        lines.append(",".join(format(v, ".17g") for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_matrix(path: str | Path) -> EmbeddingMatrix:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ShapeMismatch(f"{path}: missing matrix header line")
        fields = dict(
            part.split("=", 1) for part in header.lstrip("# ").split() if "=" in part
        )
        try:
            rows = int(fields["rows"])
            cols = int(fields["cols"])
            unit = fields.get("unit_rows", "0") == "1"
        except (KeyError, ValueError) as exc:
            raise ShapeMismatch(f"{path}: malformed header {header!r}") from exc
        data = np.empty((rows, cols))
        for i in range(rows):
            line = fh.readline()
            if not line:
                raise ShapeMismatch(f"{path}: expected {rows} rows, file ended at {i}")
            parts = line.strip().split(",")
            if len(parts) != cols:
                raise ShapeMismatch(
                    f"{path}: row {i} has {len(parts)} values, expected {cols}"
                )
            try:
                data[i] = [float(p) for p in parts]
            except ValueError as exc:
                raise ShapeMismatch(f"{path}: row {i} has a non-numeric value") from exc
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise NonFinite(f"{path}: non-finite value at row {bad[0]}, col {bad[1]}")
    return EmbeddingMatrix(data, unit_rows=unit)


def save_labels(path: str | Path, labels: Sequence[int]) -> None:
    atomic_write_text(path, "\n".join(str(int(v)) for v in labels) + "\n")


def load_labels(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").split()
    try:
        return np.array([int(v) for v in lines], dtype=np.intp)
    except ValueError as exc:
        raise ShapeMismatch(f"{path}: labels must be integers") from exc


def save_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    atomic_write_text(
        path, "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n"
    )


def load_jsonl(path: str | Path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            out.append(json.loads(line))
    return out


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    out_dir: str | Path,
    command: str,
    config: dict,
    seed: int | None,
    inputs: Sequence[str | Path],
    outputs: Sequence[str | Path],
) -> Path:
    """Hash inputs and record the resolved configuration; written atomically."""
    out_dir = Path(out_dir)
    doc = {
        "tool_version": TOOL_VERSION,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / MANIFEST_FILE
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(path: str | Path) -> bool:
    """True when every recorded input hash still matches the file on disk."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for file_path, digest in doc.get("inputs", {}).items():
        if sha256_file(file_path) != digest:
            return False
    return True


def save_dataset_bundle(
    out_dir: str | Path,
    features: EmbeddingMatrix,
    labels: np.ndarray,
    spec_echo: dict,
    extra_matrices: dict[str, EmbeddingMatrix] | None = None,
) -> dict[str, Path]:
    """Features CSV + labels + optional side matrices; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    feat_path = out_dir / FEATURES_FILE
    save_matrix(feat_path, features)
    paths["features"] = feat_path
    labels_path = out_dir / LABELS_FILE
    save_labels(labels_path, labels)
    paths["labels"] = labels_path
    for name, m in (extra_matrices or {}).items():
        p = out_dir / f"{name}.csv"
        save_matrix(p, m)
        paths[name] = p
    meta = {
        "k": int(np.max(labels)) + 1 if labels.size else 0,
        "d": features.cols,
        "n": features.rows,
        "spec": spec_echo,
    }
    meta_path = out_dir / "dataset.json"
    atomic_write_text(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths["dataset"] = meta_path
    return paths


def load_dataset_bundle(
    in_dir: str | Path,
) -> tuple[EmbeddingMatrix, np.ndarray, dict]:
    in_dir = Path(in_dir)
    features = load_matrix(in_dir / FEATURES_FILE)
    labels = load_labels(in_dir / LABELS_FILE)
    if labels.shape[0] != features.rows:
        raise ShapeMismatch(
            f"{in_dir}: {labels.shape[0]} labels vs {features.rows} feature rows"
        )
    meta_path = in_dir / "dataset.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return features, labels, meta
