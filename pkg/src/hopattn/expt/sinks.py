"""Metric sinks, histogram files and the run manifest."""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import os
import platform
import time
import traceback

from hopattn import __version__
from hopattn import _backend

CSV_COLUMNS = ("experiment_id", "seed", "model_kind", "alpha", "alpha_prime", "depth", "layer",
               "metric_name", "value")
METRICS_CSV = "metrics.csv"
METRICS_JSONL = "metrics.jsonl"
MANIFEST = "manifest.json"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds")


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


class MetricsSink:
    """Append-only CSV + JSONL writer for one cell (one output directory)."""

    def __init__(self, directory: str, experiment_id: str, manifest: RunManifest | None = None):
        os.makedirs(directory, exist_ok=True)
        self.directory = directory
        self.experiment_id = experiment_id
        self.manifest = manifest
        self.csv_path = os.path.join(directory, METRICS_CSV)
        self.jsonl_path = os.path.join(directory, METRICS_JSONL)
        self._csv = open(self.csv_path, "w", newline="", encoding="utf-8")
        self._jsonl = open(self.jsonl_path, "w", encoding="utf-8")
        self._writer = csv.writer(self._csv, lineterminator="\n")
        self._writer.writerow(CSV_COLUMNS)
        self.count = 0
        if manifest is not None:
            manifest.add_output(self.csv_path)
            manifest.add_output(self.jsonl_path)

    def write(self, seed: int, model_kind: str, alpha: float, alpha_prime: float, depth: int,
              layer: int, metric_name: str, value: float) -> None:
        if self.manifest is not None and not self.manifest.written:
            raise RuntimeError("run manifest must be written before the first metric")
        row = dict(zip(CSV_COLUMNS, (self.experiment_id, int(seed), model_kind, float(alpha),
                                     float(alpha_prime), int(depth), int(layer), metric_name,
                                     float(value))))
        self._writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
        rec = dict(row, timestamp=_now())
        self._jsonl.write(json.dumps(rec, allow_nan=True) + "\n")
        self.count += 1

    def flush(self):
        self._csv.flush()
        self._jsonl.flush()

    def close(self):
        if not self._csv.closed:
            self._csv.close()
            self._jsonl.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_histogram(path: str, centers, density) -> str:
    """Two-column plot data ``bin_center,density``."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_center", "density"))
        for c, d in zip(centers, density):
            w.writerow((repr(float(c)), repr(float(d))))
    return path


def merge_metrics(cell_dirs: list[str], out_dir: str) -> tuple[str, str]:
    """Concatenate per-cell metric files, in the given order, into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    csv_out = os.path.join(out_dir, METRICS_CSV)
    jsonl_out = os.path.join(out_dir, METRICS_JSONL)
    with open(csv_out, "w", encoding="utf-8", newline="") as fc, \
            open(jsonl_out, "w", encoding="utf-8") as fj:
        fc.write(",".join(CSV_COLUMNS) + "\n")
        for d in cell_dirs:
            p = os.path.join(d, METRICS_CSV)
            if os.path.exists(p):
                with open(p, encoding="utf-8") as fh:
                    lines = fh.read().splitlines(keepends=True)
                fc.writelines(lines[1:])
            p = os.path.join(d, METRICS_JSONL)
            if os.path.exists(p):
                with open(p, encoding="utf-8") as fh:
                    fj.write(fh.read())
    return csv_out, jsonl_out


def code_version() -> str:
    return f"hopattn {__version__} ({_backend.BACKEND} kernels, python {platform.python_version()})"


class RunManifest:
    """``manifest.json`` written at start (status ``running``) and finalized at exit.

    Used as a context manager the manifest is finalized on every exit path:
    ``completed`` normally, ``aborted`` with the error text otherwise.
    """

    def __init__(self, out_dir: str, config: dict, seed, experiment_id: str):
        self.path = os.path.join(out_dir, MANIFEST)
        self.data = {
            "experiment_id": experiment_id,
            "code_version": code_version(),
            "seed": seed,
            "config": config,
            "start_time": _now(),
            "end_time": None,
            "status": "running",
            "outputs": [],
        }
        self.written = False
        self._t0 = time.perf_counter()

    def add_output(self, path: str) -> None:
        if path not in self.data["outputs"]:
            self.data["outputs"].append(path)

    def write(self) -> None:
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        buf = io.StringIO()
        json.dump(self.data, buf, indent=2, sort_keys=True, default=str)
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue() + "\n")
        os.replace(tmp, self.path)
        self.written = True

    def finalize(self, status: str = "completed", error: str | None = None, **extra) -> None:
        self.data.update(extra)
        self.data["status"] = status
        self.data["end_time"] = _now()
        self.data["elapsed_seconds"] = time.perf_counter() - self._t0
        if error is not None:
            self.data["error"] = error
        self.write()

    def __enter__(self):
        self.write()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.finalize("completed")
        else:
            text = "".join(traceback.format_exception_only(exc_type, exc)).strip()
            self.finalize("aborted", error=text)
        return False
