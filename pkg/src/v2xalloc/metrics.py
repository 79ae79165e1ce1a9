"""Run manifests and hash-linked CSV output."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from . import __version__

RUN_COLUMNS = (
    "mode", "seed", "sample", "vehicle_count", "v2i_sum_rate_bps", "v2v_success_rate", "decision_latency_us",
)


def manifest(cfg, seed, verb, extra=None):
    body = {"verb": verb, "seed": int(seed), "code_version": __version__, "config": cfg.to_dict()}
    if extra:
        body["extra"] = extra
    return body


def manifest_hash(body):
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(out_dir, body):
    """Write ``manifest.json`` into ``out_dir``; returns its hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = manifest_hash(body)
    text = json.dumps(body, sort_keys=True, indent=2, default=list) + "\n"
    (out_dir / "manifest.json").write_text(text)
    return digest


def _cell(value):
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def write_csv(path, columns, rows, digest):
    """CSV whose first line is ``# manifest_sha256=<digest>``; rows are dicts or sequences."""
    buf = io.StringIO()
    buf.write(f"# manifest_sha256={digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        values = [row[c] for c in columns] if isinstance(row, dict) else list(row)
        writer.writerow([_cell(v) for v in values])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path):
    """Return ``(digest, rows)`` where rows are dicts of strings."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# manifest_sha256="):
        raise ValueError(f"{path} lacks a manifest header line")
    digest = lines[0].split("=", 1)[1]
    return digest, list(csv.DictReader(lines[1:]))


def sample_rows(mode, seed, samples, offset=0):
    """Rows in ``RUN_COLUMNS`` order, numbering samples from ``offset``."""
    return [
        (mode, seed, offset + k, s.vehicle_count, s.v2i_sum_rate_bps, s.v2v_success_rate, s.decision_latency_us)
        for k, s in enumerate(samples)
    ]
