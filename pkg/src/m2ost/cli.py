"""``m2ost`` command line: synth | train | eval | ablate | gradcheck | export.

Settings are resolved as defaults < ``--config`` key=value file < flags.
``M2OST_SEED`` replaces the default seed. Exit codes: 0 ok, 1 usage,
2 I/O, 3 numeric failure, 4 checkpoint/config/dataset incompatibility.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import ConfigError, ModelConfig, TrainConfig, config_from_mapping, dump_config_text, load_config_text

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT = 0, 1, 2, 3, 4

# model used by ``gradcheck`` unless overridden
GRADCHECK_MODEL = ModelConfig(image_size=32, patch_size=16, channels=8, depth=1, heads=2, num_genes=4)

CHECKPOINT_NAME = "model.m2o"
LOG_NAME = "train_log.csv"
RUN_CONFIG_NAME = "run_config.txt"

# flag name -> config field, for the few flags not spelled like their field
_FIELD_ALIASES = {"missing_fraction": "missing_level_fraction"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _levels(text: str):
    if text.lower() == "none":
        return None
    return tuple(int(x) for x in text.split(",") if x.strip())


def _add_config_flags(parser: argparse.ArgumentParser, cls, base, skip=()) -> None:
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag_name = next((k for k, v in _FIELD_ALIASES.items() if v == f.name), f.name)
        default = getattr(base, f.name)
        if f.name == "levels_enabled":
            kind = _levels
        elif f.name == "max_steps":
            kind = int
        elif isinstance(default, bool):
            kind = _bool
        else:
            kind = type(default)
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        group.add_argument("--" + flag_name.replace("_", "-"), dest=f.name, type=kind, default=argparse.SUPPRESS,
                           help=f"(default: {'all' if f.name == 'levels_enabled' and default is None else shown})")


def default_seed() -> int:
    env = os.environ.get("M2OST_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(EXIT_USAGE, f"M2OST_SEED must be an integer, got {env!r}") from None


def resolve_configs(args, model_base: ModelConfig = ModelConfig()) -> tuple[ModelConfig, TrainConfig]:
    train_base = TrainConfig(seed=default_seed())
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        try:
            file_values = load_config_text(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config file: {exc}") from exc
    unknown = sorted(set(file_values) - model_keys - train_keys)
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown config keys: {', '.join(unknown)}")
    flags = vars(args)
    try:
        model = config_from_mapping(ModelConfig, {k: v for k, v in file_values.items() if k in model_keys}, model_base)
        model = dataclasses.replace(model, **{k: flags[k] for k in model_keys if k in flags})
        train = config_from_mapping(TrainConfig, {k: v for k, v in file_values.items() if k in train_keys}, train_base)
        train = dataclasses.replace(train, **{k: flags[k] for k in train_keys if k in flags})
        return model.validate(), train.validate()
    except (ConfigError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"invalid configuration: {exc}") from exc


def _model_overridden(args) -> bool:
    names = {f.name for f in dataclasses.fields(ModelConfig)}
    return bool(getattr(args, "config", None)) or any(k in vars(args) for k in names)


def banner(command: str, cfg: ModelConfig, train: TrainConfig | None = None) -> str:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    line = (f"m2ost {command} [{stamp}] p={cfg.patch_size} C={cfg.channels} N={cfg.depth} "
            f"heads={cfg.heads} k={cfg.num_genes} levels={','.join(map(str, cfg.levels))}")
    if train is not None:
        line += f" lr={train.lr!r} batch={train.batch_size} epochs={train.epochs} seed={train.seed}"
    return line


# -- IO helpers --------------------------------------------------------------

def _read_dataset(path):
    from .data.io import DatasetFormatError, read_dataset
    try:
        return read_dataset(path)
    except (OSError, DatasetFormatError) as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from exc


def _check_dataset(ds, cfg: ModelConfig) -> None:
    if ds.image_size != cfg.image_size or ds.num_levels != cfg.num_levels:
        raise CliError(EXIT_COMPAT, f"dataset has {ds.num_levels} levels of {ds.image_size}px, model expects "
                                    f"{cfg.num_levels} of {cfg.image_size}px")
    if ds.num_genes != cfg.num_genes:
        raise CliError(EXIT_COMPAT, f"dataset has {ds.num_genes} genes, model predicts {cfg.num_genes} "
                                    f"(pass --num-genes {ds.num_genes})")


def _prepare_output(path: Path, is_dir: bool = False) -> Path:
    try:
        if is_dir:
            path.mkdir(parents=True, exist_ok=True)
            probe = path
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            probe = path.parent
        if not os.access(probe, os.W_OK):
            raise PermissionError(f"{probe} is not writable")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {path}: {exc}") from exc
    return path


def load_checkpoint(path, args) -> tuple[dc.ParamStore, ModelConfig]:
    """Parameters plus the config stored in the sidecar; flags/config file must agree with it."""
    from .encoder import check_config_matches
    path = Path(path)
    try:
        params = dc.ParamStore.load(path)
        sidecar = load_config_text(path.with_suffix(path.suffix + ".cfg").read_text(encoding="utf-8"))
    except (OSError, dc.CheckpointFormatError, ConfigError) as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from exc
    stored_fp = sidecar.pop("fingerprint", None)
    sidecar.pop("param_count", None)
    try:
        stored = config_from_mapping(ModelConfig, sidecar).validate()
    except ConfigError as exc:
        raise CliError(EXIT_COMPAT, f"checkpoint config unusable: {exc}") from exc
    if stored_fp is not None and stored.fingerprint() != stored_fp:
        raise CliError(EXIT_COMPAT, "checkpoint sidecar fingerprint does not match its own config")
    cfg = stored
    if _model_overridden(args):
        requested, _ = resolve_configs(args, stored)
        if requested.fingerprint() != stored.fingerprint():
            raise CliError(EXIT_COMPAT, f"config fingerprint {requested.fingerprint()} does not match "
                                        f"checkpoint {stored.fingerprint()}")
    try:
        check_config_matches(params, cfg)
    except ConfigError as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from exc
    return params, cfg


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data.io import write_dataset
    from .data.synth import SynthConfig, synth_generate
    seed = args.seed if args.seed is not None else default_seed()
    slides = min(args.slides, args.spots)
    if args.spots < 1 or args.spots % slides:
        raise CliError(EXIT_USAGE, f"--spots {args.spots} must be a positive multiple of --slides {slides}")
    scfg = SynthConfig(n_slides=slides, spots_per_slide=args.spots // slides, image_size=args.size,
                       num_levels=args.levels, num_genes=args.genes, noise=args.noise, split_seed=args.split_seed)
    out = _prepare_output(Path(args.out))
    try:
        ds = synth_generate(scfg, seed)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    try:
        size = write_dataset(ds, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    print(f"wrote {out}: {len(ds)} spots, {ds.num_genes} genes, {ds.num_levels} levels of "
          f"{ds.image_size}px, {size} bytes")
    splits = {s: len(ds.split_indices(s)) for s in ("train", "val", "test")}
    print("splits: " + " ".join(f"{k}={v}" for k, v in splits.items()))
    for subset, value in ds.metadata["oracle_pcc"].items():
        print(f"oracle_pcc[{subset}]={value:.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .encoder import init_parameters
    from .training import LOG_HEADER, fit, fit_missing_levels, save_checkpoint
    cfg, train = resolve_configs(args)
    print(banner("train", cfg, train))
    echo = dump_config_text(cfg) + dump_config_text(train)
    if args.dry_run:
        sys.stdout.write(echo)
        return EXIT_OK
    if not args.data:
        raise CliError(EXIT_USAGE, "--data is required")
    out = _prepare_output(Path(args.out), is_dir=True)
    ds = _read_dataset(args.data)
    _check_dataset(ds, cfg)
    (out / RUN_CONFIG_NAME).write_text(echo, encoding="utf-8")
    params = init_parameters(cfg, train.seed)
    runner = fit_missing_levels if train.missing_level_fraction > 0 else fit
    try:
        result = runner(params, ds, cfg, train, log_path=out / LOG_NAME, checkpoint_path=out / CHECKPOINT_NAME)
    except dc.NumericError as exc:
        raise CliError(EXIT_NUMERIC, f"training aborted: {exc}") from exc
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    if not (out / CHECKPOINT_NAME).exists():
        save_checkpoint(result.best_params, cfg, out / CHECKPOINT_NAME)
    assert (out / LOG_NAME).read_text().startswith(LOG_HEADER)
    print(f"steps={result.steps} best_step={result.best_step} best_val_pcc={result.best_val_pcc!r}")
    print(f"checkpoint={out / CHECKPOINT_NAME} log={out / LOG_NAME}")
    return EXIT_OK


def _predictions(args, ds, idx):
    """(predictions, cfg, params) from ``--oracle`` or a checkpoint."""
    from .training import predict
    if args.oracle:
        from .data.synth import oracle_predictions
        try:
            pred = oracle_predictions(ds)[idx]
        except ValueError as exc:
            raise CliError(EXIT_COMPAT, str(exc)) from exc
        cfg, _ = resolve_configs(args, ModelConfig(num_genes=ds.num_genes, image_size=ds.image_size,
                                                   num_levels=ds.num_levels, patch_size=ds.image_size // 4))
        return pred, cfg, None
    if not args.checkpoint:
        raise CliError(EXIT_USAGE, "--checkpoint or --oracle is required")
    params, cfg = load_checkpoint(args.checkpoint, args)
    _check_dataset(ds, cfg)
    try:
        pred = predict(params, cfg, ds, idx, batch_size=64, threads=args.threads_eval)
    except dc.NumericError as exc:
        raise CliError(EXIT_NUMERIC, f"prediction failed: {exc}") from exc
    return pred, cfg, params


def cmd_eval(args) -> int:
    from .evaluation.report import build_report
    ds = _read_dataset(args.data)
    idx = np.arange(len(ds)) if args.split == "all" else ds.split_indices(args.split)
    if len(idx) == 0:
        raise CliError(EXIT_USAGE, f"split {args.split!r} is empty")
    pred, cfg, params = _predictions(args, ds, idx)
    out = _prepare_output(Path(args.out))
    rep = build_report([ds.spot_ids[i] for i in idx], ds.values[idx].astype(np.float64), pred, cfg, params)
    try:
        out.write_text(rep.to_csv(), encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    print(f"split={args.split} spots={len(idx)} mean_pcc={rep.mean_pcc!r} mean_rmse={rep.mean_rmse!r}")
    if params is not None:
        print(f"params={rep.param_count} macs={rep.mac_count} fingerprint={rep.fingerprint}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation.ablation import COMPONENT_GRID, ablation_csv, level_subset_grid, run_ablation
    cfg, train = resolve_configs(args)
    print(banner("ablate", cfg, train))
    out = _prepare_output(Path(args.out))
    ds = _read_dataset(args.data)
    _check_dataset(ds, cfg)
    grid = []
    if args.grid in ("components", "all"):
        grid += COMPONENT_GRID
    if args.grid in ("levels", "all"):
        grid += level_subset_grid(cfg.num_levels)
    try:
        rows = run_ablation(ds, cfg, grid, train, eval_split=args.split, init_seed=train.seed)
    except dc.NumericError as exc:
        raise CliError(EXIT_NUMERIC, f"ablation aborted: {exc}") from exc
    text = ablation_csv(rows)
    try:
        out.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .training import model_gradcheck
    cfg, train = resolve_configs(args, GRADCHECK_MODEL)
    print(banner("gradcheck", cfg))
    entries = None if args.entries <= 0 else args.entries
    try:
        worst, report = model_gradcheck(cfg, seed=train.seed, max_entries=entries)
    except dc.NumericError as exc:
        raise CliError(EXIT_NUMERIC, f"gradcheck failed to evaluate: {exc}") from exc
    if args.verbose:
        for name, err in report.items():
            print(f"{name}\t{err:.3e}")
    ok = worst < args.threshold
    print(f"max_rel_err={worst:.3e} threshold={args.threshold:.1e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_export(args) -> int:
    from .evaluation.export import export_maps
    ds = _read_dataset(args.data)
    slide = args.slide or ds.slides()[0]
    if slide not in ds.slides():
        raise CliError(EXIT_USAGE, f"unknown slide {slide!r}; available: {', '.join(ds.slides())}")
    idx = np.asarray([i for i, s in enumerate(ds.slide_ids) if s == slide])
    pred, _, _ = _predictions(args, ds, idx)
    _prepare_output(Path(args.out))
    mode = "pca1" if args.gene is None else args.gene
    try:
        pgm, csv_path = export_maps(ds, pred, mode, args.out, slide=slide)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    print(f"wrote {pgm} and {csv_path}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="m2ost", description="Many-to-one multi-scale expression regression.")
    parser.add_argument("--log-level", default="WARNING", help="(default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True, help="output .m2od path")
    p.add_argument("--spots", type=int, default=2000, help="total spots (default: 2000)")
    p.add_argument("--slides", type=int, default=20, help="number of slides (default: 20)")
    p.add_argument("--size", type=int, default=32, help="patch side in pixels (default: 32)")
    p.add_argument("--levels", type=int, default=3, help="pyramid levels (default: 3)")
    p.add_argument("--genes", type=int, default=50, help="genes (default: 50)")
    p.add_argument("--noise", type=float, default=0.1, help="expression noise std (default: 0.1)")
    p.add_argument("--split-seed", type=int, default=0, help="slide split seed (default: 0)")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: $M2OST_SEED or 0)")
    p.set_defaults(func=cmd_synth)

    def with_configs(p, model_base=ModelConfig(), train=True, train_skip=()):
        p.add_argument("--config", help="key=value config file; flags override it (default: none)")
        _add_config_flags(p, ModelConfig, model_base)
        if train:
            _add_config_flags(p, TrainConfig, TrainConfig(), skip=train_skip)

    p = sub.add_parser("train", help="train a model; writes checkpoint, log and config echo")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--out", default="run", help="output directory (default: run)")
    p.add_argument("--dry-run", action="store_true", help="print banner and resolved config, then exit")
    with_configs(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "per-spot PCC/RMSE report"),
                             ("export", cmd_export, "PGM + CSV expression map of one slide")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--data", required=True, help="dataset file")
        p.add_argument("--checkpoint", help="checkpoint path (sidecar <path>.cfg next to it)")
        p.add_argument("--oracle", action="store_true", help="use the synthetic generator's exact targets")
        p.add_argument("--threads-eval", dest="threads_eval", type=int, default=1,
                       help="prediction worker threads (default: 1)")
        if name == "eval":
            p.add_argument("--split", default="test", choices=["train", "val", "test", "all"],
                           help="(default: test)")
            p.add_argument("--out", default="eval.csv", help="report CSV (default: eval.csv)")
        else:
            p.add_argument("--slide", help="slide id (default: first slide)")
            p.add_argument("--gene", help="gene name to map (default: first principal component)")
            p.add_argument("--out", default="map", help="output prefix (default: map)")
        with_configs(p, train=False)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="component and input-level ablations")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--grid", default="all", choices=["components", "levels", "all"], help="(default: all)")
    p.add_argument("--split", default="test", choices=["val", "test"], help="(default: test)")
    p.add_argument("--out", default="ablation.csv", help="output CSV (default: ablation.csv)")
    with_configs(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--threshold", type=float, default=1e-4, help="max relative error (default: 0.0001)")
    p.add_argument("--entries", type=int, default=6,
                   help="entries probed per tensor, 0 for all (default: 6)")
    p.add_argument("--verbose", action="store_true", help="per-parameter errors")
    with_configs(p, GRADCHECK_MODEL, train_skip=("lr", "batch_size", "epochs", "missing_level_fraction",
                                                 "eval_every", "max_steps", "eval_batch_size", "threads"))
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"m2ost {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
