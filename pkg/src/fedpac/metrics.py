"""Drift measurement, communication accounting and per-round report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .preconditioners import (
    ALL_FIELDS,
    AVERAGED_FIELDS,
    PreconditionerState,
    compressed_rank,
    state_average,
    state_distance,
)

CSV_COLUMNS = (
    "round",
    "train_loss",
    "test_loss",
    "test_acc",
    "grad_norm",
    "drift_frob",
    "drift_spec_max",
    "upload_bytes",
    "download_bytes",
    "wall_seconds",
)

FLOAT_BYTES = 8


@dataclass
class RoundReport:
    round: int
    train_loss: float
    test_loss: float
    test_acc: float
    grad_norm: float
    drift_frobenius: float | None = None
    drift_spectral_per_layer: list | None = None
    upload_bytes: int = 0
    download_bytes: int = 0
    wall_seconds: float = 0.0

    @property
    def drift_spec_max(self) -> float | None:
        if not self.drift_spectral_per_layer:
            return None
        return max(self.drift_spectral_per_layer)


def drift_report(states: Sequence[PreconditionerState]) -> tuple[float, list[float]]:
    """Mean squared distance of each state to their average, plus mean layer-wise spectral distances."""
    states = list(states)
    center = state_average(states)
    frob = sum(state_distance(s, center, "frobenius") for s in states) / len(states)
    spec = np.mean([state_distance(s, center, "spectral_layerwise") for s in states], axis=0)
    return float(frob), [float(v) for v in spec]


# -- communication ---------------------------------------------------------

# Number of |x|-sized state families each variant uploads when counted as whole families.
STATE_FAMILIES = {"sophia": 1, "muon": 1, "soap": 2}


@dataclass(frozen=True)
class CommModel:
    param_bytes: int
    state_bytes: int
    upload_multiplier: float = 1.0
    download_multiplier: float = 1.0


def _param_floats(shapes) -> int:
    return sum(r * c for r, c in shapes)


def exact_state_floats(variant: str, shapes, compress: float | None = None) -> int:
    """Floats a client uploads for its state, counting every transmitted tensor."""
    total = 0
    for rows, cols in shapes:
        tensor_shapes = {
            "m": (rows, cols), "h": (rows, cols), "M": (rows, cols), "V": (rows, cols),
            "L": (rows, rows), "R": (cols, cols), "Q_L": (rows, rows), "Q_R": (cols, cols),
        }
        names = AVERAGED_FIELDS[variant] if compress is not None else ALL_FIELDS[variant]
        for name in names:
            m, n = tensor_shapes[name]
            if compress is None:
                total += m * n
            else:
                r = compressed_rank((m, n), compress)
                total += r * (m + n + 1)
    return total


def comm_cost(engine: str, variant: str | None, model_shapes, compress: float | None = None,
              align_states: bool = True, correct_updates: bool = True, convention: str = "families") -> tuple[int, int]:
    """Per participating client per round (upload_bytes, download_bytes).

    ``convention="families"`` counts each aggregated state family as |x| floats
    and a compressed upload as ``compress`` times one such family, whatever the
    number of families; ``convention="exact"`` counts the floats actually
    serialized.
    """
    x = _param_floats(model_shapes)
    if engine in ("fedavg", "fedsoa"):
        return x * FLOAT_BYTES, x * FLOAT_BYTES
    if engine != "fedpac":
        raise ValueError(f"unknown engine {engine!r}")
    if variant not in STATE_FAMILIES:
        raise ValueError(f"unknown optimizer variant {variant!r}")
    if convention == "families":
        theta = STATE_FAMILIES[variant] * x
        theta_up = compress * x if compress is not None else theta
    elif convention == "exact":
        theta = exact_state_floats(variant, model_shapes)
        theta_up = exact_state_floats(variant, model_shapes, compress)
    else:
        raise ValueError(f"unknown convention {convention!r}")
    up = x + (theta_up if align_states else 0)
    down = x + (theta if align_states else 0) + (x if correct_updates else 0)
    return int(round(up * FLOAT_BYTES)), int(round(down * FLOAT_BYTES))


# -- report files ----------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_csv(reports: Sequence[RoundReport], include_timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([
            _fmt(r.round),
            _fmt(float(r.train_loss)),
            _fmt(float(r.test_loss)),
            _fmt(float(r.test_acc)),
            _fmt(float(r.grad_norm)),
            _fmt(None if r.drift_frobenius is None else float(r.drift_frobenius)),
            _fmt(None if r.drift_spec_max is None else float(r.drift_spec_max)),
            _fmt(int(r.upload_bytes)),
            _fmt(int(r.download_bytes)),
            _fmt(float(r.wall_seconds) if include_timing else 0.0),
        ])
    return buf.getvalue()


def summarize(reports: Sequence[RoundReport]) -> dict:
    drifts = [r.drift_frobenius for r in reports if r.drift_frobenius is not None]
    last = reports[-1]
    return {
        "rounds": len(reports),
        "final_acc": float(last.test_acc),
        "final_test_loss": float(last.test_loss),
        "final_train_loss": float(last.train_loss),
        "final_grad_norm": float(last.grad_norm),
        "mean_drift_frob": float(np.mean(drifts)) if drifts else None,
        "total_upload_bytes": int(sum(r.upload_bytes for r in reports)),
        "total_download_bytes": int(sum(r.download_bytes for r in reports)),
    }


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.json")


def emit_reports(reports: Sequence[RoundReport], path, include_timing: bool = False) -> Path:
    """Write one CSV row per round and a JSON summary next to it.

    Wall-clock time is written as 0.0 unless ``include_timing`` so that reruns
    with the same seed produce identical bytes.
    """
    if not reports:
        raise ValueError("no reports to write")
    path = Path(path)
    path.write_text(reports_csv(reports, include_timing))
    summary_path(path).write_text(json.dumps(summarize(reports), indent=2, sort_keys=True) + "\n")
    return path


def read_reports(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def rounds_to_target(reports: Sequence[RoundReport], target: float, key: str = "train_loss") -> float:
    """1-based round at which ``key`` first drops to ``target``; inf if never."""
    for r in reports:
        if getattr(r, key) <= target:
            return float(r.round + 1)
    return math.inf
