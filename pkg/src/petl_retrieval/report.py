"""Result tables, params-vs-mR scatter data and embedding dumps.

Nothing already on disk is overwritten: an existing file is renamed to the
next free ``<stem>.v<N><suffix>`` before the new one is written.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .metrics import FIELDS

SCATTER_FIELDS = ("method", "params_trainable", "mr")


def versioned_path(path: Path) -> Path:
    """Move an existing ``path`` aside to the next free version and return ``path``."""
    if path.exists():
        n = 1
        while (old := path.with_name(f"{path.stem}.v{n}{path.suffix}")).exists():
            n += 1
        path.rename(old)
    return path


def _rows(results) -> list[dict]:
    rows = []
    for r in results:
        if hasattr(r, "as_row"):
            if getattr(r, "record", True) is None:
                continue
            r = r.as_row()
        row = {"method": r["method"], **{f: r[f] for f in FIELDS}}
        rows.append(row)
    return rows


def _write_csv(path: Path, rows: list[dict], fields: Sequence[str]) -> None:
    with open(versioned_path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def emit_report(results, output_dir: str | Path,
                embeddings: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None,
                extra: dict | None = None) -> dict[str, Path]:
    """Write results.csv, results.json, params_vs_mr.csv and optional embedding dumps.

    ``results`` holds BenchmarkRow objects or plain dicts with a ``method`` key
    and the nine metric fields. Failed benchmark rows are kept in the JSON
    (with their error) but left out of the tables.
    """
    results = list(results)
    if not results:
        raise InputError("emit_report needs at least one result")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _rows(results)
    written = {}

    written["csv"] = out / "results.csv"
    _write_csv(written["csv"], rows, ("method", *FIELDS))
    written["scatter"] = out / "params_vs_mr.csv"
    _write_csv(written["scatter"], rows, SCATTER_FIELDS)

    failures = [{"method": r.method, "error": r.error} for r in results if getattr(r, "error", None)]
    payload = {"rows": rows, "failures": failures, **(extra or {})}
    written["json"] = versioned_path(out / "results.json")
    written["json"].write_text(json.dumps(payload, indent=2, default=str))

    for split, (V, T) in (embeddings or {}).items():
        written.update(dump_embeddings(V, T, out, split))
    return written


def dump_embeddings(V: np.ndarray, T: np.ndarray, output_dir: str | Path, split: str) -> dict[str, Path]:
    """One .npy matrix per modality: ``emb_<split>_image.npy`` and ``emb_<split>_text.npy``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for modality, matrix in (("image", V), ("text", T)):
        path = versioned_path(out / f"emb_{split}_{modality}.npy")
        np.save(path, np.asarray(matrix, dtype=np.float32))
        paths[f"{split}_{modality}"] = path
    return paths
