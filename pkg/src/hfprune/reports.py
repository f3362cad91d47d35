"""CSV reports and the JSON log file they are regenerated from.

Three CSV files are produced for a pruning run:

``epochs.csv``
    one row per epoch of every stage (see ``EPOCH_HEADER``).
``layers.csv``
    one row per conv/fc layer: base size, size after pruning, pruning
    rates and the layer's share of the total reduction.
``proportional.csv``
    each layer's share of the removed params and mults after every
    sparsity-learning epoch (long format).

``logs.json`` holds everything needed to rebuild all three.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

from .graph import BaseComplexity, NetworkGraph
from .trainer import EpochLog

LOGS_FORMAT = "hfprune-logs/1"

EPOCH_HEADER = (
    "stage", "epoch", "lr", "lambda", "learning_loss", "pruning_loss", "total_loss",
    "effective_params", "effective_mults", "params_rate", "mults_rate", "train_acc", "test_acc",
)
LAYER_HEADER = (
    "layer_id", "kind", "params", "mults", "kept_params", "kept_mults",
    "params_rate", "mults_rate", "params_share", "mults_share",
)
PROPORTIONAL_HEADER = ("stage", "epoch", "layer_id", "params_share", "mults_share")


@dataclass
class LayerRow:
    layer_id: int
    kind: str
    params: int
    mults: int
    kept_params: int
    kept_mults: int

    @property
    def params_rate(self) -> float:
        return 1 - self.kept_params / self.params if self.params else 0.0

    @property
    def mults_rate(self) -> float:
        return 1 - self.kept_mults / self.mults if self.mults else 0.0


@dataclass
class RunLogs:
    layers: list[LayerRow]
    epochs: list[EpochLog]


def layer_rows(graph: NetworkGraph, base: BaseComplexity, final: BaseComplexity) -> list[LayerRow]:
    """Pair every conv/fc layer's original size with its size after pruning."""
    return [LayerRow(lid, graph.layer(lid).kind, base.per_layer_params[lid], base.per_layer_mults[lid],
                     final.per_layer_params[lid], final.per_layer_mults[lid])
            for lid in graph.weighted_ids()]


def _fmt(value) -> str:
    # repr round-trips floats exactly, which keeps the files byte-stable
    return repr(float(value)) if isinstance(value, float) else str(value)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def epochs_csv(logs: list[EpochLog]) -> str:
    return _csv(EPOCH_HEADER, (
        (e.stage, e.epoch, e.lr, e.lam, e.learning_loss, e.pruning_loss, e.total_loss, e.effective_params,
         e.effective_mults, e.params_rate, e.mults_rate, e.train_acc, e.test_acc) for e in logs))


def layers_csv(rows: list[LayerRow]) -> str:
    removed_p = sum(r.params - r.kept_params for r in rows)
    removed_m = sum(r.mults - r.kept_mults for r in rows)
    return _csv(LAYER_HEADER, (
        (r.layer_id, r.kind, r.params, r.mults, r.kept_params, r.kept_mults, r.params_rate, r.mults_rate,
         (r.params - r.kept_params) / removed_p if removed_p else 0.0,
         (r.mults - r.kept_mults) / removed_m if removed_m else 0.0) for r in rows))


def proportional_csv(logs: list[EpochLog]) -> str:
    return _csv(PROPORTIONAL_HEADER, (
        (e.stage, e.epoch, lid, share[0], share[1])
        for e in logs for lid, share in sorted(e.proportional.items())))


def write_reports(directory, logs: list[EpochLog], rows: list[LayerRow]) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {
        "epochs_csv": directory / "epochs.csv",
        "layers_csv": directory / "layers.csv",
        "proportional_csv": directory / "proportional.csv",
    }
    out["epochs_csv"].write_text(epochs_csv(logs), encoding="utf-8")
    out["layers_csv"].write_text(layers_csv(rows), encoding="utf-8")
    out["proportional_csv"].write_text(proportional_csv(logs), encoding="utf-8")
    return out


def read_csv(path) -> list[dict[str, str]]:
    """Rows of a report as dicts; raises ValueError on a header mismatch."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = {"epochs.csv": EPOCH_HEADER, "layers.csv": LAYER_HEADER,
                    "proportional.csv": PROPORTIONAL_HEADER}.get(path.name)
        if expected is not None and tuple(reader.fieldnames or ()) != expected:
            raise ValueError(f"{path}: header {reader.fieldnames} does not match {list(expected)}")
        return list(reader)


# ---------------------------------------------------------------------------
# logs.json


def _log_to_json(e: EpochLog) -> dict:
    d = asdict(e)
    d["layer_rates"] = {str(k): list(v) for k, v in sorted(e.layer_rates.items())}
    d["proportional"] = {str(k): list(v) for k, v in sorted(e.proportional.items())}
    return d


def _log_from_json(d: dict) -> EpochLog:
    d = dict(d)
    d["layer_rates"] = {int(k): tuple(v) for k, v in d.get("layer_rates", {}).items()}
    d["proportional"] = {int(k): tuple(v) for k, v in d.get("proportional", {}).items()}
    return EpochLog(**d)


def dump_logs(path, logs: list[EpochLog], rows: Optional[list[LayerRow]] = None) -> Path:
    path = Path(path)
    doc = {
        "format": LOGS_FORMAT,
        "layers": [asdict(r) for r in rows or []],
        "epochs": [_log_to_json(e) for e in logs],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_logs(path) -> RunLogs:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"no log file at {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("format") != LOGS_FORMAT:
        raise ValueError(f"{path}: unsupported log format {doc.get('format')!r}")
    try:
        return RunLogs([LayerRow(**r) for r in doc["layers"]], [_log_from_json(e) for e in doc["epochs"]])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed log file ({exc})") from None
