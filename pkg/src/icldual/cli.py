"""Command-line entry point: ``icldual <command> [options]``.

Every command writes a CSV (LF line endings, UTF-8, floats with 17
significant digits) and a ``<out>.meta.json`` sidecar holding the effective
configuration.  Options may come from a JSON ``--config`` file; explicit
flags win over the file, the file wins over built-in defaults.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .attention import AttentionWeights, ContextLayout, FfnWeights
from .dual import build_dual_for_attention, build_dual_for_transformer_layer, dual_loss, dual_predict, dual_update
from .errors import NumericalError, ValidationError
from .generalization import empirical_gap
from .harness import (
    TASK_SETUPS,
    TaskSpec,
    TrainConfig,
    approximation_sweep,
    equivalence_experiment,
    feature_spec_for,
    ordered_map,
    parse_variant,
    parse_variants,
    rank_bound_experiment,
    sample_task_batch,
    train_attention_model,
    variant_sweep,
)
from .numerics import PRNG_ALGORITHM, SeededRng

SCHEMA_VERSION = 1
OUT_DIR_ENV = "ICLDUAL_OUT_DIR"


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _as_dict(row) -> dict:
    return dataclasses.asdict(row) if dataclasses.is_dataclass(row) else dict(row)


def write_csv(rows: Iterable, path, columns: Sequence[str] | None = None) -> None:
    """Header plus one line per row, in the given order."""
    rows = [_as_dict(r) for r in rows]
    if columns is None:
        if not rows:
            raise ValidationError("columns are required for an empty row set")
        columns = list(rows[0])
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            if set(r) != set(columns):
                raise ValidationError("rows are not homogeneous")
            w.writerow([format_value(r[c]) for c in columns])


def write_metadata(path, command: str, config: dict, columns: Sequence[str]) -> Path:
    meta = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "version": __version__,
        "prng": PRNG_ALGORITHM,
        "columns": list(columns),
    }
    side = Path(str(path) + ".meta.json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return side


# ---------------------------------------------------------------------------
# option parsing helpers
# ---------------------------------------------------------------------------


def int_list(text) -> list[int]:
    if isinstance(text, list):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc


def _seeds(cfg) -> list[int]:
    if cfg["seeds"] < 1:
        raise ValidationError("seeds must be >= 1")
    return [cfg["seed"] + i for i in range(cfg["seeds"])]


def _task(cfg) -> TaskSpec:
    return TaskSpec(cfg["task"], cfg["dt"], cfg["ds"])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# each command: (defaults, columns); None defaults are filled per task
COMMON = {"seed": 0, "workers": 1, "out": None}
TASK_OPTS = {"task": "linear", "dt": None, "ds": None}
TRAIN_OPTS = {**TASK_OPTS, "n": None, "steps": None, "epochs": 50, "lr": None, "dr": 1200, "feature": "prf",
              "seeds": 1}

COMMANDS: dict[str, tuple[dict, list[str]]] = {
    "equivalence": ({**TASK_OPTS, "n": 16, "dr": 1200, "feature": "prf", "seeds": 3, "trained": False,
                     "epochs": 5}, ["seed", "step", "l2_error"]),
    "approx": ({**TASK_OPTS, "n": 16, "dr": [3, 12, 120, 1200, 12000], "trials": 50}, ["dr", "trial", "mse", "mae"]),
    "train": ({**TRAIN_OPTS, "variant": "normal"}, ["seed", "epoch", "loss"]),
    "sweep": ({**TRAIN_OPTS, "variants": "normal"}, ["variant", "seed", "epoch", "loss"]),
    "rank-bound": ({"d": 12, "dh": [12, 24, 33, 48], "batches": 128, "reps": 3, "bias_shift": 0.0},
                   ["dh", "mean_bound"]),
    "gen-bound": ({**TASK_OPTS, "n": [8, 16, 32, 64, 128, 256, 512], "seeds": 20, "eval_samples": 4000, "w": 1.0,
                   "rho": None, "dr": 64, "delta": 0.05}, ["n", "seed", "trace", "bound", "gap"]),
    "dual-inspect": ({**TASK_OPTS, "n": 16, "dr": 1200, "feature": "prf", "dh": 0, "eta": 1.0},
                     ["quantity", "value"]),
}

_LIST_KEYS = {"dr": "approx", "dh": "rank-bound", "n": "gen-bound"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icldual", description="attention / dual-model experiments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (defaults, _) in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file with option values")
        for key in {**COMMON, **defaults}:
            flag = "--" + key.replace("_", "-")
            if key == "trained":
                sp.add_argument(flag, action="store_true", default=None)
            else:
                sp.add_argument(flag, dest=key, default=None)
    return p


_TYPES = {
    "seed": int, "workers": int, "dt": int, "ds": int, "steps": int, "epochs": int, "seeds": int, "trials": int,
    "d": int, "batches": int, "reps": int, "eval_samples": int, "lr": float, "bias_shift": float, "w": float,
    "rho": float, "delta": float, "eta": float,
}


def _coerce(command: str, key: str, value):
    if value is None:
        return None
    if key in ("dr", "dh", "n"):
        if _LIST_KEYS.get(key) == command:
            return int_list(value)
        if isinstance(value, list):
            raise ValidationError(f"--{key} takes a single value for {command}")
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad value for {key}: {value!r}") from exc
    if key in _TYPES:
        try:
            return _TYPES[key](value)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad value for {key}: {value!r}") from exc
    if key == "trained":
        return bool(value)
    return str(value)


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    defaults, _ = COMMANDS[command]
    allowed = {**COMMON, **defaults}
    cfg = dict(allowed)
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ValidationError("config must be a JSON object")
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {version}")
        if data.pop("command", command) != command:
            raise ValidationError("config was written for a different command")
        unknown = set(data) - set(allowed)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(data)
    for key in allowed:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    cfg = {k: _coerce(command, k, v) for k, v in cfg.items()}
    if "task" in cfg:
        setup = TASK_SETUPS.get(cfg["task"])
        if setup is None:
            raise ValidationError(f"unknown task {cfg['task']!r}")
        for key, src in (("dt", "d_t"), ("ds", "d_s")):
            if cfg[key] is None:
                cfg[key] = setup[src]
        if command in ("train", "sweep"):
            for key, src in (("n", "n_tokens"), ("steps", "steps_per_epoch"), ("lr", "lr")):
                if cfg[key] is None:
                    cfg[key] = setup[src]
    if cfg["workers"] < 1:
        raise ValidationError("workers must be >= 1")
    return cfg


def output_path(command: str, cfg: dict) -> Path:
    if cfg["out"]:
        return Path(cfg["out"])
    return Path(os.environ.get(OUT_DIR_ENV, ".")) / f"{command}.csv"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _train_config(cfg, variant) -> TrainConfig:
    return TrainConfig(n_tokens=cfg["n"], steps_per_epoch=cfg["steps"], epochs=cfg["epochs"], lr=cfg["lr"],
                       variant=variant, feature=cfg["feature"], d_r=cfg["dr"], seed=cfg["seed"])


def cmd_equivalence(cfg):
    trained = None
    if cfg["trained"]:
        setup = TASK_SETUPS[cfg["task"]]
        trained = TrainConfig(n_tokens=cfg["n"], steps_per_epoch=setup["steps_per_epoch"], epochs=cfg["epochs"],
                              lr=setup["lr"], feature=cfg["feature"], d_r=cfg["dr"])
    seeds = _seeds(cfg)
    reports = equivalence_experiment(_task(cfg), cfg["n"], cfg["dr"], seeds, cfg["feature"], trained, cfg["workers"])
    return [{"seed": s, "step": i, "l2_error": e} for s, r in zip(seeds, reports) for i, e in enumerate(r.distances)]


def cmd_approx(cfg):
    if cfg["trials"] < 1:
        raise ValidationError("trials must be >= 1")
    return approximation_sweep(_task(cfg), cfg["n"], cfg["dr"], cfg["trials"], cfg["seed"], cfg["workers"])


def cmd_train(cfg):
    base = _train_config(cfg, parse_variant(cfg["variant"]))
    seeds = _seeds(cfg)
    results = ordered_map(lambda s: train_attention_model(_task(cfg), dataclasses.replace(base, seed=s)),
                          seeds, cfg["workers"])
    return [{"seed": s, "epoch": e + 1, "loss": v} for s, r in zip(seeds, results) for e, v in enumerate(r.losses)]


def cmd_sweep(cfg):
    base = _train_config(cfg, parse_variant("normal"))
    return variant_sweep(_task(cfg), base, parse_variants(cfg["variants"]), _seeds(cfg), cfg["workers"]).rows


def cmd_rank_bound(cfg):
    return rank_bound_experiment(cfg["d"], cfg["dh"], cfg["batches"], cfg["reps"], SeededRng(cfg["seed"]),
                                 cfg["bias_shift"])


def cmd_gen_bound(cfg):
    return empirical_gap(_task(cfg), cfg["w"], cfg["n"], cfg["eval_samples"], _seeds(cfg), cfg["dr"],
                         cfg["delta"], cfg["rho"])


def cmd_dual_inspect(cfg):
    """Anatomy of one dual model (or Transformer-layer dual with --dh > 0)."""
    root = SeededRng(cfg["seed"])
    t = _task(cfg).resolved(root.child(0))
    X = sample_task_batch(t, cfg["n"], root.child(1, 0)).X
    w = AttentionWeights.random(t.d, t.d, root.child(2))
    spec = feature_spec_for(cfg["feature"], t.d, cfg["dr"], root.child(3))
    layout = ContextLayout(cfg["n"] - 1, 0, True)
    if cfg["dh"] > 0:
        f = FfnWeights.random(t.d, cfg["dh"], root.child(6))
        build = build_dual_for_transformer_layer(X[:, :-1], None, X[:, -1], w, f, spec, layout, cfg["eta"])
    else:
        build = build_dual_for_attention(X[:, :-1], None, X[:, -1], w, spec, layout, cfg["eta"])
    model, ds = build.model, build.dataset
    trained = dual_update(model, ds)
    pred = dual_predict(trained, ds.z_test)
    err = float(np.linalg.norm(pred - build.reference))
    rows = [
        ("N", ds.N), ("d_r", spec.d_r), ("D", ds.D), ("eta", ds.eta),
        ("norm_W_init", np.linalg.norm(model.W)), ("norm_W_hat", np.linalg.norm(trained.W)),
        ("norm_delta_W", np.linalg.norm(trained.W - model.W)),
        ("loss_init", dual_loss(model, ds)), ("loss_trained", dual_loss(trained, ds)),
        ("l2_error", err), ("relative_error", err / np.linalg.norm(build.reference)),
    ]
    if build.wf is not None:
        rows += [("rank_I_M", build.wf.mask_rank), ("rank_upper_bound", build.wf.upper_bound)]
    return [{"quantity": k, "value": v} for k, v in rows]


HANDLERS = {
    "equivalence": cmd_equivalence,
    "approx": cmd_approx,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "rank-bound": cmd_rank_bound,
    "gen-bound": cmd_gen_bound,
    "dual-inspect": cmd_dual_inspect,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.command, args)
        rows = HANDLERS[args.command](cfg)
        path = output_path(args.command, cfg)
        columns = COMMANDS[args.command][1]
        write_csv(rows, path, columns)
        write_metadata(path, args.command, cfg, columns)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}", file=sys.stderr)
    return 0


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
