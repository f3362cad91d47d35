"""``hfprune`` command-line interface.

Every command prints a one-line JSON summary on stdout when it succeeds and
a one-line JSON diagnostic on stderr when it fails (exit code 1, or 2 for
usage errors). Commands that write an output directory also leave a
``run.json`` manifest there.

Settings come from three layers: built-in defaults, an optional JSON file
given with ``--config``, and command-line flags, each overriding the one
before.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DataSplits, load_cifar10_binary, synth_splits
from .graph import base_complexity, builtin_architecture
from .pruner import fold_batchnorm
from .reports import dump_logs, layer_rows, load_logs, write_reports
from .trainer import LAMBDA_MODES, TrainConfig, run_hfp, train_baseline

log = logging.getLogger("hfprune")

MANIFEST_NAME = "run.json"

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

DEFAULTS: dict[str, Any] = {f.name: f.default for f in fields(TrainConfig)}
DEFAULTS.update(
    lambda_target="auto",
    arch="tinyvgg",
    data="synth",
    data_seed=0,
    synth_train=2000,
    synth_test=500,
    limit=None,
    test_limit=None,
    baseline=None,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit
        raise UsageError(message)


# ---------------------------------------------------------------------------
# argument plumbing


def _float_or_auto(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}") from None


def _add_data_args(p):
    p.add_argument("--data", help="'synth' or 'cifar10:<dir>'")
    p.add_argument("--data-seed", type=int, help="seed of the synthetic generator")
    p.add_argument("--synth-train", type=int, help="synthetic training images")
    p.add_argument("--synth-test", type=int, help="synthetic test images")
    p.add_argument("--limit", type=int, help="keep only the first N CIFAR-10 training records")
    p.add_argument("--test-limit", type=int, help="keep only the first N CIFAR-10 test records")


def _add_train_args(p):
    p.add_argument("--arch", choices=["tinyvgg", "tinyresnet"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-start", type=float)
    p.add_argument("--lr-end", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hfprune", description="Budget-driven filter pruning on a small numpy engine.",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with settings (flags take precedence)")
        return p

    p = command("train-baseline", "train an unpruned model and save a checkpoint")
    _add_train_args(p)
    _add_data_args(p)
    p.add_argument("--out", required=True)

    p = command("prune", "sparsity learning, structural pruning and fine-tuning")
    _add_train_args(p)
    _add_data_args(p)
    p.add_argument("--target-params-rate", type=float)
    p.add_argument("--target-mults-rate", type=float)
    p.add_argument("--lambda-mode", choices=sorted(LAMBDA_MODES))
    p.add_argument("--lambda-target", type=_float_or_auto)
    p.add_argument("--lambda-start", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--fine-tune-epochs", type=int)
    p.add_argument("--fine-tune-mode", choices=["full", "bn_stats"])
    p.add_argument("--baseline", help="checkpoint directory of a trained model (otherwise one is trained)")
    p.add_argument("--baseline-epochs", type=int)
    p.add_argument("--out", required=True)

    p = command("eval", "test accuracy and complexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p)

    p = command("report", "regenerate the CSV reports of a run from its logs.json")
    p.add_argument("--run", required=True, help="output directory of a previous run")
    p.add_argument("--out", help="where to write the CSVs (default: the run directory)")

    p = command("export", "fold batch-norm into conv/fc weights for inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    return parser


def resolve_settings(ns: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    settings = dict(DEFAULTS)
    config = getattr(ns, "config", None)
    if config:
        path = Path(config)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        for key, value in doc.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"config file {path}: unknown setting {key!r}")
            settings[key] = value
    settings.update(flags)
    data = settings.get("data")
    if not (data == "synth" or (isinstance(data, str) and data.startswith("cifar10:"))):
        raise UsageError(f"--data must be 'synth' or 'cifar10:<dir>', got {data!r}")
    return settings


def train_config(settings: dict[str, Any]) -> TrainConfig:
    kw = {k: settings[k] for k in _TRAIN_KEYS if k in settings}
    lam = kw.get("lambda_target")
    kw["lambda_target"] = None if lam in (None, "auto") else float(lam)
    return TrainConfig(**kw)


def load_data(settings: dict[str, Any]) -> DataSplits:
    spec = settings["data"]
    if spec == "synth":
        return synth_splits(10, settings["synth_train"], settings["synth_test"], seed=settings["data_seed"])
    return load_cifar10_binary(spec.split(":", 1)[1], settings["limit"], settings["test_limit"])


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out: Path, doc: dict) -> Path:
    missing = [p for p in doc.get("artifacts", {}).values() if not (out / p).exists()]
    broken = bool(missing) and doc.get("status") == "ok"
    if broken:
        doc = dict(doc, status="error", message=f"missing artifacts: {missing}")
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if broken:
        raise RuntimeError(doc["message"])
    return path


def _relative(paths: dict[str, Path], out: Path) -> dict[str, str]:
    return {k: str(Path(v).relative_to(out)) for k, v in paths.items()}


# ---------------------------------------------------------------------------
# commands


def cmd_train_baseline(settings: dict[str, Any], started: str) -> dict:
    cfg = train_config(settings)
    data = load_data(settings)
    graph = builtin_architecture(settings["arch"], data.num_classes, data.image_shape)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    model, logs = train_baseline(graph, data, cfg)
    base = base_complexity(graph)
    rows = layer_rows(graph, base, base)
    artifacts = {"checkpoint": save_checkpoint(model, out / "checkpoint")}
    artifacts.update(write_reports(out, logs, rows))
    artifacts["logs"] = dump_logs(out / "logs.json", logs, rows)
    acc = model.accuracy(data.test.images, data.test.labels)
    doc = {
        "status": "ok", "command": "train-baseline", "config": settings, "seed": cfg.seed,
        "started": started, "finished": _now(), "artifacts": _relative(artifacts, out),
        "accuracies": {"test": acc}, "params": base.total_params, "mults": base.total_mults,
    }
    _write_manifest(out, doc)
    return {"status": "ok", "manifest": str(out / MANIFEST_NAME), "test_acc": acc}


def cmd_prune(settings: dict[str, Any], started: str) -> dict:
    cfg = train_config(settings)
    data = load_data(settings)
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}
    baseline = baseline_logs = None
    if settings.get("baseline"):
        baseline = load_checkpoint(settings["baseline"])
        graph = baseline.graph
    else:
        graph = builtin_architecture(settings["arch"], data.num_classes, data.image_shape)
        baseline, baseline_logs = train_baseline(graph, data, cfg)
        artifacts["baseline_checkpoint"] = save_checkpoint(baseline, out / "baseline")

    result = run_hfp(graph, data, cfg, baseline=baseline, baseline_logs=baseline_logs)
    rows = layer_rows(graph, result.base, result.final_complexity)
    artifacts["checkpoint"] = save_checkpoint(result.final, out / "pruned")
    artifacts.update(write_reports(out, result.logs, rows))
    artifacts["logs"] = dump_logs(out / "logs.json", result.logs, rows)
    pr, mr = result.achieved_rates
    doc = {
        "status": "ok", "command": "prune", "config": settings, "seed": cfg.seed,
        "started": started, "finished": _now(), "artifacts": _relative(artifacts, out),
        "targets": {"params_rate": cfg.target_params_rate, "mults_rate": cfg.target_mults_rate,
                    "params": result.targets.target_params, "mults": result.targets.target_mults},
        "lambda": {"mode": result.schedule.mode, "start": result.schedule.start_value,
                   "target": result.schedule.target_value},
        "achieved_rates": {"params": pr, "mults": mr},
        "final_pruning_loss": result.final_pruning_loss,
        "guarded_batchnorms": sorted(result.plan.guarded),
        "params": {"base": result.base.total_params, "pruned": result.final_complexity.total_params},
        "mults": {"base": result.base.total_mults, "pruned": result.final_complexity.total_mults},
        "accuracies": {"baseline": result.baseline_acc, "pruned": result.pruned_acc, "final": result.final_acc},
    }
    _write_manifest(out, doc)
    return {"status": "ok", "manifest": str(out / MANIFEST_NAME), "achieved_rates": [pr, mr],
            "final_acc": result.final_acc}


def cmd_eval(settings: dict[str, Any], started: str) -> dict:
    model = load_checkpoint(settings["checkpoint"])
    data = load_data(settings)
    g = model.graph
    if tuple(data.image_shape) != tuple(g.input_shape) or data.num_classes != g.num_classes:
        raise ValueError(f"checkpoint expects {g.input_shape} images and {g.num_classes} classes, "
                         f"data provides {data.image_shape} and {data.num_classes}")
    base = base_complexity(g)
    return {"status": "ok", "checkpoint": settings["checkpoint"], "n_test": len(data.test),
            "accuracy": model.accuracy(data.test.images, data.test.labels),
            "params": base.total_params, "mults": base.total_mults,
            "batchnorm_layers": len(g.batchnorm_ids())}


def cmd_report(settings: dict[str, Any], started: str) -> dict:
    run = Path(settings["run"])
    logs = load_logs(run / "logs.json")
    out = Path(settings.get("out") or run)
    paths = write_reports(out, logs.epochs, logs.layers)
    return {"status": "ok", "files": {k: str(v) for k, v in paths.items()}}


def cmd_export(settings: dict[str, Any], started: str) -> dict:
    model = load_checkpoint(settings["checkpoint"])
    folded = fold_batchnorm(model)
    out = save_checkpoint(folded, settings["out"])
    return {"status": "ok", "checkpoint": str(out), "removed_batchnorm_layers": len(model.bn)}


COMMANDS = {
    "train-baseline": cmd_train_baseline,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "report": cmd_report,
    "export": cmd_export,
}


def _fail(command: Optional[str], exc: BaseException, settings: Optional[dict], started: str) -> None:
    diag = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(diag, sort_keys=True), file=sys.stderr)
    out = (settings or {}).get("out")
    if command in ("train-baseline", "prune") and out and Path(out).is_dir():
        _write_manifest(Path(out), dict(diag, config=settings, started=started, finished=_now()))


def main(argv: Optional[Sequence[str]] = None) -> int:
    started = _now()
    command = settings = None
    try:
        ns = build_parser().parse_args(argv)
        command = ns.command
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        settings = resolve_settings(ns)
        summary = COMMANDS[command](settings, started)
    except UsageError as exc:
        _fail(command, exc, settings, started)
        return 2
    except Exception as exc:  # every failure path ends in one JSON line
        _fail(command, exc, settings, started)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
