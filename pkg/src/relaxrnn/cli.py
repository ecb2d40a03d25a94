"""Command line: ``relaxrnn {synth,train,eval,explain,reproduce}``.

Every option can also come from ``--config FILE`` (JSON, either a flat
mapping of option names or a ``config.json`` written by a previous run);
explicit flags win over the file, and the file wins over built-in defaults.
Each command writes the resolved settings to ``config.json`` in its output
directory and wall-clock times to a separate ``timing.json``.

Failures print one line, ``relaxrnn: error <CODE>: <message>``, to stderr and
exit with 2 (invalid arguments), 3 (bad data/model file) or 4 (numeric
failure).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .datapipe import load_dataset
from .errors import ContractError, DataFormatError, RelaxError
from .evaluation import curves_csv, evaluate, evaluate_regression
from .interpret import correlation_groups, gradient_saliency, permutation_importance, rank_features
from .models import ModelSpec, load_model, save_model
from .numerics import Rng
from .suites import SUITES, run_suite
from .synthgen import DELTAS, generate_benchmark, write_task
from .training import TrainConfig, random_search, train

CONFIG_FORMAT_VERSION = 1
OUTPUT_ROOT_ENV = "RELAXRNN_OUTPUT_ROOT"
MODEL_CHOICES = {"nn": "nn", "nn_t": "nn_t", "lstm": "lstm", "lstm_t": "lstm_t", "lstm_te": "lstm_te",
                 "shift": "shift_lstm", "mix": "mix_lstm"}

DEFAULTS = {
    "synth": {"delta": "all", "schedules": 5, "T": 30, "d": 3, "l": 10, "n_train": 1000, "n_val": 1000,
              "n_test": 1000, "seed": 0, "classify": False, "standardize": False, "out": None},
    "train": {"model": "lstm", "K": None, "hidden": 32, "layers": 1, "layer_norm": False, "te_dim": 24,
              "sweep": None, "trials": 40, "alpha": 0.0, "lr": 1e-3, "batch": 100, "epochs": 30, "patience": 5,
              "metric": None, "clip_norm": None, "seed": 0, "jobs": 1, "data": None, "out": None},
    "eval": {"model": None, "data": None, "bootstrap": 1000, "level": 0.95, "seed": 0, "out": None},
    "explain": {"model": None, "data": None, "mode": "gradient", "window": 12, "corr": 0.95, "seed": 0,
                "target_class": 1, "aggregate": "max", "score": "probability", "repeats": 1, "out": None},
    "reproduce": {"suite": None, "seed": 0, "jobs": 1, "param": {}, "out": None},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ContractError(message)


def _opt(p, *names, **kw):
    kw.setdefault("default", argparse.SUPPRESS)
    p.add_argument(*names, **kw)


def _key_value(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relaxrnn", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic benchmark tasks")
    _opt(p, "--delta", help="shift level(s), comma separated, or 'all' (default)")
    _opt(p, "--schedules", type=int, help="weight schedules per shift level (default 5)")
    _opt(p, "--T", type=int, help="sequence length (default 30)")
    _opt(p, "--d", type=int, help="input dimension (default 3)")
    _opt(p, "--l", type=int, help="memory length (default 10)")
    _opt(p, "--n-train", dest="n_train", type=int)
    _opt(p, "--n-val", dest="n_val", type=int)
    _opt(p, "--n-test", dest="n_test", type=int)
    _opt(p, "--classify", action="store_true", help="binary labels from the final target")
    _opt(p, "--standardize", action="store_true", help="standardize inputs with train statistics")

    p = sub.add_parser("train", help="train one model or run a random search")
    _opt(p, "--model", choices=sorted(MODEL_CHOICES))
    _opt(p, "--K", type=int, help="cells for shift / mix")
    _opt(p, "--hidden", type=int)
    _opt(p, "--layers", type=int, help="LSTM layers (1 or 2)")
    _opt(p, "--layer-norm", dest="layer_norm", action="store_true")
    _opt(p, "--te-dim", dest="te_dim", type=int)
    _opt(p, "--sweep", help="search space, e.g. 'hidden=100,150,300;lr=0.001,0.01'")
    _opt(p, "--trials", type=int)
    _opt(p, "--alpha", type=float, help="smoothness strength for mix")
    _opt(p, "--lr", type=float)
    _opt(p, "--batch", type=int)
    _opt(p, "--epochs", type=int, help="maximum epochs")
    _opt(p, "--patience", type=int)
    _opt(p, "--metric", choices=["val_mse", "val_auroc"])
    _opt(p, "--clip-norm", dest="clip_norm", type=float)
    _opt(p, "--jobs", type=int)
    _opt(p, "--data", help="directory holding train.jsonl and val.jsonl")

    p = sub.add_parser("eval", help="test-set metrics with bootstrap intervals")
    _opt(p, "--model", help="model file")
    _opt(p, "--data", help="test file, or a directory holding test.jsonl")
    _opt(p, "--bootstrap", type=int, help="resamples (0 = point estimates only)")
    _opt(p, "--level", type=float)

    p = sub.add_parser("explain", help="gradient saliency or permutation importance")
    _opt(p, "--model", help="model file")
    _opt(p, "--data", help="dataset file, or a directory holding test.jsonl")
    _opt(p, "--mode", choices=["gradient", "permutation"])
    _opt(p, "--window", type=int, help="time-window length for permutation (default 12)")
    _opt(p, "--corr", type=float, help="correlation threshold for grouping (default 0.95)")
    _opt(p, "--target-class", dest="target_class", type=int)
    _opt(p, "--aggregate", choices=["max", "sum"])
    _opt(p, "--score", choices=["probability", "logit"])
    _opt(p, "--repeats", type=int)

    p = sub.add_parser("reproduce", help="run a named experiment suite")
    _opt(p, "suite", nargs="?", help=f"one of {', '.join(sorted(SUITES))}")
    _opt(p, "--jobs", type=int, help="worker threads")
    _opt(p, "--param", action="append", type=_key_value, metavar="KEY=JSON",
         help="override a suite parameter, e.g. seeds=5 or deltas=[0,0.4]")

    for name, sp in sub.choices.items():
        _opt(sp, "--config", help="JSON settings file; flags override it")
        _opt(sp, "--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/{name})")
        _opt(sp, "--seed", type=int)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then ``--config``, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    if "param" in given:
        given["param"] = dict(given["param"])
    path = getattr(args, "config", None)
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ContractError(f"config file {path} not found") from e
        except json.JSONDecodeError as e:
            raise DataFormatError(f"config file {path}: invalid JSON ({e})") from e
        if isinstance(doc, dict) and "settings" in doc:
            if doc.get("command", command) != command:
                raise ContractError(f"config file {path} is for command {doc['command']!r}, not {command!r}")
            doc = doc["settings"]
        if not isinstance(doc, dict):
            raise DataFormatError(f"config file {path} must hold a JSON object")
        unknown = set(doc) - set(cfg)
        if unknown:
            raise ContractError(f"config file {path}: unknown setting(s) {', '.join(sorted(unknown))}")
        cfg.update(doc)
    cfg.update(given)
    return cfg


def _out_dir(command: str, cfg: dict, sub: str = "") -> Path:
    if cfg.get("out"):
        return Path(cfg["out"])
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / command / sub if sub else root / command


def _write_config(out: Path, command: str, cfg: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": CONFIG_FORMAT_VERSION, "command": command, "seed": cfg.get("seed"),
           "settings": dict(cfg, out=str(out))}
    p = out / "config.json"
    p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return p


def _write_timing(out: Path, timing: dict) -> Path:
    p = out / "timing.json"
    p.write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return p


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_data(path, default_name: str):
    if path is None:
        raise ContractError("--data is required")
    p = Path(path)
    if p.is_dir():
        p = p / default_name
    if not p.exists():
        raise ContractError(f"data file {p} not found")
    return load_dataset(p)


def _load_model_file(path):
    if path is None:
        raise ContractError("--model is required")
    if not Path(path).exists():
        raise ContractError(f"model file {path} not found")
    return load_model(path)


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: dict) -> list:
    out = _out_dir("synth", cfg)
    delta = cfg["delta"]
    if isinstance(delta, str):
        deltas = list(DELTAS) if delta == "all" else [_number(v, "--delta") for v in delta.split(",")]
    else:
        deltas = [float(v) for v in (delta if isinstance(delta, list) else [delta])]
    if any(d < 0 for d in deltas):
        raise ContractError("--delta must be nonnegative")
    t0 = time.perf_counter()
    tasks = generate_benchmark(deltas, cfg["schedules"], cfg["n_train"], cfg["n_val"], cfg["n_test"],
                               cfg["seed"], cfg["T"], cfg["d"], cfg["l"], cfg["standardize"])
    paths = [_write_config(out, "synth", cfg)]
    for task in tasks:
        paths += write_task(task, out, classify=cfg["classify"])
        paths.append(out / task.name / "meta.json")
    paths.append(_write_timing(out, {"seconds": time.perf_counter() - t0}))
    return paths


def _number(text: str, flag: str) -> float:
    try:
        return float(text)
    except ValueError as e:
        raise ContractError(f"{flag}: {text!r} is not a number") from e


def parse_sweep(text: str) -> dict:
    """``'hidden=100,150;lr=0.001,0.01'`` -> ``{'hidden': [100, 150], 'lr': [0.001, 0.01]}``."""
    space = {}
    for part in filter(None, (s.strip() for s in text.split(";"))):
        key, sep, values = part.partition("=")
        if not sep or not values:
            raise ContractError(f"--sweep: expected KEY=V1,V2,..., got {part!r}")
        items = []
        for v in values.split(","):
            try:
                items.append(json.loads(v))
            except json.JSONDecodeError:
                items.append(v)
        space[key.strip()] = items
    if not space:
        raise ContractError("--sweep is empty")
    return space


def cmd_train(cfg: dict) -> list:
    if cfg["model"] not in MODEL_CHOICES:
        raise ContractError(f"--model must be one of {', '.join(sorted(MODEL_CHOICES))}")
    out = _out_dir("train", cfg)
    train_ds = _load_data(cfg["data"], "train.jsonl")
    val_ds = _load_data(cfg["data"], "val.jsonl")
    spec = ModelSpec(MODEL_CHOICES[cfg["model"]], train_ds.d, cfg["hidden"], train_ds.T, K=cfg["K"],
                     num_layers=cfg["layers"], te_dim=cfg["te_dim"], use_layer_norm=cfg["layer_norm"],
                     task=train_ds.task, seed=cfg["seed"])
    tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch"], max_epochs=cfg["epochs"], patience=cfg["patience"],
                       metric=cfg["metric"], alpha=cfg["alpha"], seed=cfg["seed"], clip_norm=cfg["clip_norm"])
    paths = [_write_config(out, "train", cfg)]
    t0 = time.perf_counter()
    if cfg["sweep"]:
        space = parse_sweep(cfg["sweep"])
        state, board = random_search(spec, space, cfg["trials"], tcfg, train_ds, val_ds, Rng(cfg["seed"]),
                                     jobs=cfg["jobs"])
        paths.append(_dump(out / "leaderboard.json", board))
        if state is None:
            raise ContractError("every trial of the random search failed; see leaderboard.json")
        history = {"champion": board[0]}
    else:
        state, hist = train(spec, train_ds, val_ds, tcfg)
        history = hist.to_dict()
        timing_epochs = hist.wall_times
    save_model(state, out / "model.json")
    paths.append(out / "model.json")
    paths.append(_dump(out / "history.json", history))
    timing = {"seconds": time.perf_counter() - t0}
    if not cfg["sweep"]:
        timing["epoch_seconds"] = timing_epochs
    paths.append(_write_timing(out, timing))
    return paths


def cmd_eval(cfg: dict) -> list:
    out = _out_dir("eval", cfg)
    model = _load_model_file(cfg["model"])
    test = _load_data(cfg["data"], "test.jsonl")
    if cfg["bootstrap"] < 0:
        raise ContractError("--bootstrap must be >= 0")
    if test.task != model.spec.task:
        raise ContractError(f"{test.task} data given to a {model.spec.task} model")
    paths = [_write_config(out, "eval", cfg)]
    t0 = time.perf_counter()
    if model.spec.task == "classification":
        report = evaluate(model, test, cfg["bootstrap"], cfg["seed"], cfg["level"])
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        roc, pr = curves_csv(report)
        (out / "roc.csv").write_text(roc, encoding="utf-8")
        (out / "pr.csv").write_text(pr, encoding="utf-8")
        paths += [out / "report.json", out / "roc.csv", out / "pr.csv"]
    else:
        report = evaluate_regression(model, test, cfg["bootstrap"], cfg["seed"], cfg["level"])
        paths.append(_dump(out / "report.json", report))
    paths.append(_write_timing(out, {"seconds": time.perf_counter() - t0}))
    return paths


def _feature_names(ds) -> list:
    names = ds.metadata.get("encoded_features")
    if names and len(names) == ds.d:
        return list(names)
    feats = ds.schema.get("features", []) if isinstance(ds.schema, dict) else []
    if len(feats) == ds.d:
        return [f["name"] for f in feats]
    return [f"x{i}" for i in range(ds.d)]


def cmd_explain(cfg: dict) -> list:
    out = _out_dir("explain", cfg)
    model = _load_model_file(cfg["model"])
    ds = _load_data(cfg["data"], "test.jsonl")
    if model.spec.task != "classification":
        raise ContractError(f"explain --mode {cfg['mode']} needs a classification model, got a regression model")
    names = _feature_names(ds)
    paths = [_write_config(out, "explain", cfg)]
    t0 = time.perf_counter()
    if cfg["mode"] == "gradient":
        smap = gradient_saliency(model, ds, cfg["target_class"], cfg["aggregate"], cfg["score"])
        (out / "saliency.csv").write_text(smap.to_csv(names), encoding="utf-8")
        ranks = rank_features(smap, names)
        lines = ["rank,feature,importance,direction,trend,category"]
        lines += [f"{k + 1},{r.name},{r.importance!r},{r.direction},{r.trend},\"{r.category}\""
                  for k, r in enumerate(ranks)]
        (out / "ranking.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths += [out / "saliency.csv", out / "ranking.csv"]
    elif cfg["mode"] == "permutation":
        groups = correlation_groups(ds, cfg["corr"])
        table = permutation_importance(model, ds, cfg["window"], groups, Rng(cfg["seed"]), cfg["repeats"],
                                       names=names)
        (out / "importance.csv").write_text(table.to_csv(), encoding="utf-8")
        paths.append(out / "importance.csv")
        paths.append(_dump(out / "groups.json", {"threshold": cfg["corr"], "baseline_auroc": table.baseline,
                                                 "groups": [[names[i] for i in g] for g in groups]}))
    else:
        raise ContractError(f"unknown --mode {cfg['mode']!r}")
    paths.append(_write_timing(out, {"seconds": time.perf_counter() - t0}))
    return paths


def cmd_reproduce(cfg: dict) -> list:
    name = cfg["suite"]
    if name not in SUITES:
        raise ContractError(f"unknown suite {name!r}; available: {', '.join(sorted(SUITES))}")
    out = _out_dir("reproduce", cfg, name)
    paths = [_write_config(out, "reproduce", cfg)]
    res = run_suite(name, out, cfg["seed"], cfg["jobs"], cfg["param"])
    return paths + res["paths"]


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain,
            "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.command, args)
        # overflow surfaces as NumericError below; numpy's own warnings would be noise
        with np.errstate(over="ignore", invalid="ignore"):
            paths = COMMANDS[args.command](cfg)
    except RelaxError as e:
        msg = " ".join(str(e).split())
        print(f"relaxrnn: error {e.code}: {msg}", file=sys.stderr)
        return e.exit_code
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
