"""Command-line front end: synth | train | score | eval | grid | ablate.

Every run resolves its settings from built-in defaults, an optional preset,
an optional ``key = value`` config file and finally explicit flags, then
writes a manifest holding the resolved settings and the sha256 of every
artifact. A manifest is itself a valid config file for the same command.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path

from . import __version__
from .data import AnomalySpec, NormStats, load_series, synth_generate, write_binary, write_csv, zscore
from .errors import AmadError, ConfigError, ContractError, DataError, NumericError, ShapeError
from .model import FULL_SIZE_CONFIG, ModelConfig, load_checkpoint, save_checkpoint
from .scoring import (
    ABLATION_ROWS,
    DEFAULT_ALPHAS,
    DEFAULT_TAUS,
    Experiment,
    ablation_run,
    build_report,
    evaluate_flags,
    grid_search,
    read_score_csv,
    score_series,
    write_ablation_csv,
    write_eval_csv,
    write_grid_csv,
    write_score_csv,
)
from .train import TrainConfig, fit, write_log_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.txt"
PRESETS = {"desk": {}, "full": dict(FULL_SIZE_CONFIG)}


class UsageError(AmadError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- settings ----------------------------------------------------------------
MODEL_KEYS = {f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name != "deterministic_seed"}
MODEL_KEYS["input_dim"] = 0  # 0: take the channel count of the training series
TRAIN_KEYS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
SCORE_KEYS = {"ar": 1.0, "population": "train+test"}
HYPER_KEYS = {**MODEL_KEYS, **TRAIN_KEYS, "preset": "desk"}

COMMAND_KEYS = {
    "synth": {"seed": None, "out": None, "length": 4000, "test_length": 0, "dims": 3, "fraction": 0.01,
              "format": "csv"},
    "train": {"seed": None, "out": None, "train": None, **HYPER_KEYS},
    "score": {"out": None, "checkpoint": None, "series": None, "train": "", **SCORE_KEYS},
    "eval": {"out": None, "scores": None, "labels": ""},
    "grid": {"seed": None, "out": None, "train": None, "test": None, "alphas": DEFAULT_ALPHAS,
             "taus": DEFAULT_TAUS, **SCORE_KEYS, **HYPER_KEYS},
    "ablate": {"seed": None, "out": None, "datasets": "", "train": "", "test": "", **SCORE_KEYS, **HYPER_KEYS},
}
REQUIRED = {
    "synth": ("seed", "out"),
    "train": ("seed", "out", "train"),
    "score": ("out", "checkpoint", "series"),
    "eval": ("out", "scores"),
    "grid": ("seed", "out", "train", "test"),
    "ablate": ("seed", "out"),
}
INPUT_PATHS = ("train", "test", "checkpoint", "series", "scores", "labels")


def _to_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _convert(key: str, text, default):
    if not isinstance(text, str):
        return text
    try:
        if isinstance(default, bool):
            return _to_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    if key == "seed":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"seed must be an integer, got {text!r}") from None
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Manifest bookkeeping keys are skipped."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in ("command", "version") or key.startswith("artifact."):
            continue
        out[key] = value
    return out


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    allowed = COMMAND_KEYS[command]
    for key in list(file_values) + list(flag_values):
        if key not in allowed:
            raise ConfigError(f"unknown setting {key!r} for '{command}'")
    preset = flag_values.get("preset") or file_values.get("preset") or allowed.get("preset")
    settings = dict(allowed)
    if "preset" in allowed:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        settings.update(PRESETS[preset])
    for source in (file_values, flag_values):
        for k, v in source.items():
            settings[k] = _convert(k, v, allowed[k])
    missing = [k for k in REQUIRED[command] if settings.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): {', '.join(missing)}")
    for k in INPUT_PATHS:
        if k in settings and settings[k] and not Path(settings[k]).exists():
            raise DataError(f"{k}: no such file {settings[k]}")
    return settings


def _configs(s: dict, dims: int) -> tuple[ModelConfig, TrainConfig]:
    if not s["input_dim"]:
        s["input_dim"] = dims
    cfg = ModelConfig(**{k: s[k] for k in MODEL_KEYS}, deterministic_seed=s["seed"]).validate()
    return cfg, TrainConfig(**{k: s[k] for k in TRAIN_KEYS}).validate()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, settings: dict, artifacts: list[Path]) -> Path:
    lines = [f"# amad {__version__} run manifest; usable as --config", f"command = {command}"]
    lines += [f"{k} = {_format(v)}" for k, v in settings.items() if v is not None]
    lines += [f"artifact.{p.name} = {_sha256(p)}" for p in artifacts]
    path = out / MANIFEST
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# -- subcommands -------------------------------------------------------------
def cmd_synth(s: dict, out: Path) -> list[Path]:
    spec = AnomalySpec(fraction=s["fraction"])
    train, test = synth_generate(s["seed"], s["length"], s["dims"], spec, s["test_length"] or None)
    if s["format"] not in ("csv", "binary"):
        raise ConfigError(f"format must be csv or binary, got {s['format']!r}")
    ext, writer = (".csv", write_csv) if s["format"] == "csv" else (".amad", write_binary)
    paths = [out / f"train{ext}", out / f"test{ext}"]
    writer(paths[0], train)
    writer(paths[1], test)
    return paths


def cmd_train(s: dict, out: Path) -> list[Path]:
    train = load_series(s["train"])
    cfg, tcfg = _configs(s, train.dims)
    res = fit(train, cfg, tcfg, s["seed"])
    ckpt, logf = out / "model.ckpt", out / "train_log.csv"
    meta = {"train_config": tcfg.to_dict(), "seed": s["seed"], "best_epoch": res.best_epoch}
    save_checkpoint(ckpt, res.params, extra={"norm.mean": res.stats.mean, "norm.std": res.stats.std}, meta=meta)
    write_log_csv(logf, res.log)
    return [ckpt, logf]


def cmd_score(s: dict, out: Path) -> list[Path]:
    params, extra, meta = load_checkpoint(s["checkpoint"])
    if "norm.mean" not in extra or "norm.std" not in extra:
        raise DataError(f"{s['checkpoint']}: checkpoint carries no normalisation statistics")
    stats = NormStats(extra["norm.mean"], extra["norm.std"])
    automask = meta.get("train_config", {}).get("enable_automask", True)
    series = load_series(s["series"])
    if series.dims != params.cfg.input_dim:
        raise DataError(f"series has {series.dims} channels, checkpoint expects {params.cfg.input_dim}")
    test_s = score_series(params, zscore(series.values, stats), automask)
    train_s = None
    if s["population"] == "train+test":
        if not s["train"]:
            raise UsageError("score: population train+test needs --train")
        train_s = score_series(params, zscore(load_series(s["train"]).values, stats), automask)
    elif s["population"] != "test":
        raise ConfigError(f"population must be 'test' or 'train+test', got {s['population']!r}")
    rep = build_report(test_s, s["ar"], series.labels, train_s)
    path = out / "scores.csv"
    write_score_csv(path, rep)
    return [path]


def cmd_eval(s: dict, out: Path) -> list[Path]:
    _, raw, gt = read_score_csv(s["scores"])
    if s["labels"]:
        gt = load_series(s["labels"]).labels
    if gt is None:
        raise DataError("eval: no ground-truth labels in the score file and no --labels given")
    if len(gt) != len(raw):
        raise DataError(f"eval: {len(raw)} scores vs {len(gt)} labels")
    path = out / "eval.csv"
    write_eval_csv(path, evaluate_flags(raw, gt))
    return [path]


def _experiment(s: dict, train_path, test_path) -> Experiment:
    train, test = load_series(train_path), load_series(test_path)
    if train.dims != test.dims:
        raise DataError(f"{train_path} has {train.dims} channels, {test_path} has {test.dims}")
    cfg, tcfg = _configs(s, train.dims)
    return Experiment(train, test, cfg, tcfg, s["ar"], s["population"], s["seed"])


def cmd_grid(s: dict, out: Path) -> list[Path]:
    rows = grid_search(_experiment(s, s["train"], s["test"]), s["alphas"], s["taus"])
    path = out / "grid.csv"
    write_grid_csv(path, rows)
    return [path]


def parse_datasets(text: str) -> dict[str, tuple[str, str]]:
    """``name=train.csv,test.csv`` items separated by ``;``."""
    out = {}
    for item in filter(None, (t.strip() for t in text.split(";"))):
        name, sep, paths = item.partition("=")
        parts = paths.split(",")
        if not sep or len(parts) != 2 or not name.strip():
            raise ConfigError(f"dataset entries look like name=train.csv,test.csv; got {item!r}")
        out[name.strip()] = (parts[0].strip(), parts[1].strip())
    return out


def cmd_ablate(s: dict, out: Path) -> list[Path]:
    datasets = parse_datasets(s["datasets"])
    if s["train"] or s["test"]:
        if not (s["train"] and s["test"]):
            raise UsageError("ablate: --train and --test go together")
        datasets.setdefault("data", (s["train"], s["test"]))
    if not datasets:
        raise UsageError("ablate: give --dataset name=train.csv,test.csv or --train/--test")
    for name, paths in datasets.items():
        for p in paths:
            if not Path(p).exists():
                raise DataError(f"dataset {name}: no such file {p}")
    exps = {name: _experiment(s, *paths) for name, paths in datasets.items()}
    path = out / "ablation.csv"
    write_ablation_csv(path, ablation_run(exps, ABLATION_ROWS))
    return [path]


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score, "eval": cmd_eval,
            "grid": cmd_grid, "ablate": cmd_ablate}
HELP = {
    "synth": "write a seeded synthetic train/test pair",
    "train": "fit a model, write checkpoint and training log",
    "score": "score a series with a checkpoint",
    "eval": "precision/recall/F1 of a score file, raw and point-adjusted",
    "grid": "alpha x tau sensitivity grid",
    "ablate": "component ablation table",
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amad", description="AutoMask attention anomaly detection")
    parser.add_argument("--version", action="version", version=f"amad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="key = value settings file (a previous manifest works)")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, default in keys.items():
            if key == "datasets":
                p.add_argument("--dataset", dest="datasets", action="append", metavar="NAME=TRAIN,TEST")
                continue
            hint = "" if default in (None, "") else f" (default {_format(default)})"
            p.add_argument(_flag(key), dest=key, metavar=key.upper(), help=key.replace("_", " ") + hint)
    return parser


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "verbose") and v is not None}
        if "datasets" in flags:
            flags["datasets"] = ";".join(flags["datasets"])
        file_values = read_config(args.config) if args.config else {}
        settings = resolve(args.command, file_values, flags)
        out = Path(settings["out"])
        out.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](settings, out)
        write_manifest(out, args.command, settings, artifacts)
        for p in artifacts:
            print(p)
        return EXIT_OK
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, ContractError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
