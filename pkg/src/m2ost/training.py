"""MSE training with Adam, validation-PCC model selection and missing-level training."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import ConfigError, ModelConfig, TrainConfig, dump_config_text
from .data.dataset import StDataset
from .embedding import standardize
from .encoder import check_config_matches, init_parameters, m2ost_forward
from .evaluation.metrics import mean_spot_pcc, spot_rmses

log = logging.getLogger(__name__)

LOG_HEADER = "step,train_mse,val_pcc,val_rmse"


class TrainingDivergedError(dc.NumericError):
    pass


def mse_loss(pred, target) -> dc.DiffArray:
    """Mean of squared differences over every entry (genes, and the batch if present)."""
    target = np.asarray(target.data if isinstance(target, dc.DiffArray) else target)
    if tuple(pred.shape) != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    return dc.mean(dc.square(dc.sub(pred, target.astype(pred.dtype))))


def missing_level_plan(n: int, num_levels: int, levels: tuple[int, ...], fraction: float,
                       seed: int, salt: str) -> np.ndarray:
    """``[n, num_levels]`` presence flags: round(fraction * n) samples lose exactly one enabled level."""
    present = np.ones((n, num_levels), dtype=bool)
    if fraction <= 0 or len(levels) < 2:
        return present
    rng = dc.generator(seed, "missing-levels", salt)
    chosen = rng.permutation(n)[: int(round(fraction * n))]
    drop = rng.integers(len(levels), size=len(chosen))
    present[chosen, np.asarray(levels)[drop]] = False
    return present


def batch_inputs(ds: StDataset, idx: np.ndarray, present: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Standardized images with absent levels blacked out, and the presence flags."""
    imgs = ds.images[idx]
    flags = ds.level_present[idx] if present is None else present
    if not flags.all():
        imgs = imgs.copy()
        imgs[~flags] = 0
    return standardize(imgs), flags


def predict(params: dc.ParamStore, cfg: ModelConfig, ds: StDataset, idx=None,
            present: np.ndarray | None = None, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Eval-mode predictions ``[n, k]``; chunking is fixed so results do not depend on ``threads``."""
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    chunks = [np.arange(s, min(s + batch_size, len(idx))) for s in range(0, len(idx), batch_size)]

    def run(chunk):
        x, flags = batch_inputs(ds, idx[chunk], None if present is None else present[chunk])
        return m2ost_forward(x, params, cfg, training=False, level_present=flags).data

    with dc.no_grad():
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                outs = list(pool.map(run, chunks))
        else:
            outs = [run(c) for c in chunks]
    if not outs:
        return np.zeros((0, cfg.num_genes))
    return np.concatenate(outs).astype(np.float64)


def evaluate_split(params, cfg, ds, idx, present=None, batch_size=64, threads=1) -> tuple[float, float]:
    pred = predict(params, cfg, ds, idx, present, batch_size, threads)
    truth = ds.values[idx].astype(np.float64)
    return mean_spot_pcc(truth, pred), float(spot_rmses(truth, pred).mean())


@dataclass
class FitResult:
    params: dc.ParamStore
    best_params: dc.ParamStore
    best_val_pcc: float
    best_step: int
    log_rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    steps: int = 0

    def log_text(self) -> str:
        return LOG_HEADER + "\n" + "".join(f"{s},{m!r},{p!r},{r!r}\n" for s, m, p, r in self.log_rows)


def fit(params: dc.ParamStore, dataset: StDataset, cfg: ModelConfig, train_cfg: TrainConfig,
        log_path=None, checkpoint_path=None, train_idx=None, val_idx=None) -> FitResult:
    """Train ``params`` in place on the train split; keep the best-validation-PCC copy.

    With ``train_cfg.missing_level_fraction > 0`` a fixed random subset of
    training and validation spots each loses one enabled level (see
    :func:`fit_missing_levels`).
    """
    train_cfg.validate()
    cfg.validate()
    check_config_matches(params, cfg)
    train_idx = dataset.split_indices("train") if train_idx is None else np.asarray(train_idx)
    val_idx = dataset.split_indices("val") if val_idx is None else np.asarray(val_idx)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    if dataset.num_genes != cfg.num_genes:
        raise ConfigError(f"dataset has {dataset.num_genes} genes, model predicts {cfg.num_genes}")

    frac = train_cfg.missing_level_fraction
    train_present = missing_level_plan(len(train_idx), cfg.num_levels, cfg.levels, frac, train_cfg.seed, "train")
    val_present = missing_level_plan(len(val_idx), cfg.num_levels, cfg.levels, frac, train_cfg.seed, "val")
    train_present &= dataset.level_present[train_idx]
    val_present &= dataset.level_present[val_idx]

    bs = min(train_cfg.batch_size, len(train_idx))
    steps_per_epoch = max(len(train_idx) // bs, 1)
    total = steps_per_epoch * train_cfg.epochs
    if train_cfg.max_steps is not None:
        total = min(total, train_cfg.max_steps)
    eval_every = train_cfg.eval_every or steps_per_epoch
    state = dc.AdamState(lr=train_cfg.lr)

    result = FitResult(params=params, best_params=params.copy(), best_val_pcc=-np.inf, best_step=0)
    if log_path is not None:
        Path(log_path).write_text(LOG_HEADER + "\n", encoding="utf-8")
    running: list[float] = []
    step = 0
    order = np.empty(0, dtype=np.int64)
    while step < total:
        epoch, pos = divmod(step, steps_per_epoch)
        if pos == 0:
            order = dc.generator(train_cfg.seed, "shuffle", epoch).permutation(len(train_idx))
        local = order[pos * bs:(pos + 1) * bs]
        x, flags = batch_inputs(dataset, train_idx[local], train_present[local])
        y = dataset.values[train_idx[local]]
        params.zero_grad()
        try:
            pred = m2ost_forward(x, params, cfg, training=True, level_present=flags,
                                 rng_key=(train_cfg.seed, step))
            loss = mse_loss(pred, y)
            dc.reverse_gradients(loss, params)
        except dc.NumericError as exc:
            ids = [dataset.spot_ids[i] for i in train_idx[local][:5]]
            raise TrainingDivergedError(f"step {step} (epoch {epoch}, batch {pos}, spots {ids}...): {exc}") from exc
        dc.adam_step(params, state)
        running.append(float(loss.data))
        step += 1
        if step % eval_every == 0 or step == total:
            vp, vr = evaluate_split(params, cfg, dataset, val_idx, val_present,
                                    train_cfg.eval_batch_size, train_cfg.threads)
            row = (step, float(np.mean(running)), vp, vr)
            running = []
            result.log_rows.append(row)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")
            log.info("step %d train_mse %.4f val_pcc %.4f val_rmse %.4f", *row)
            if vp > result.best_val_pcc:
                result.best_val_pcc, result.best_step = vp, step
                result.best_params = params.copy()
                if checkpoint_path is not None:
                    save_checkpoint(result.best_params, cfg, checkpoint_path)
    params.zero_grad()
    result.steps = step
    return result


def fit_missing_levels(params, dataset, cfg: ModelConfig, train_cfg: TrainConfig, **kwargs) -> FitResult:
    """Training where a fraction of spots lose one random level.

    The absent level is fed as a black image, its stream is cut from the
    gradient of every other stream, and the prediction averages the present
    levels' heads, during training and evaluation alike.
    """
    if cfg.head_mode != "per-level-average":
        raise ConfigError("missing-level training needs head_mode='per-level-average'")
    return fit(params, dataset, cfg, train_cfg, **kwargs)


def save_checkpoint(params: dc.ParamStore, cfg: ModelConfig, path) -> None:
    """Checkpoint bytes plus a ``.cfg`` sidecar with the model config and its fingerprint."""
    path = Path(path)
    params.save(path)
    sidecar = dump_config_text(cfg) + f"fingerprint={cfg.fingerprint()}\nparam_count={params.num_scalars()}\n"
    path.with_suffix(path.suffix + ".cfg").write_text(sidecar, encoding="utf-8")


def model_gradcheck(cfg: ModelConfig, seed: int = 0, batch: int = 1, max_entries: int | None = 6,
                    perturb: float = 0.3, training: bool = True) -> tuple[float, dict[str, float]]:
    """Finite-difference check of the full model + MSE at float64 with the attention masks frozen.

    Parameters are moved off their initial values by N(0, ``perturb``) noise
    so that zero-initialized biases and heads do not hide gradient paths.
    """
    cfg.validate()
    rng = dc.generator(seed, "gradcheck-data")
    with dc.precision("float64"):
        params = init_parameters(cfg, seed).astype(np.float64)
        for name, p in params.items():
            p.data = p.data + perturb * dc.generator(seed, "gradcheck-perturb", name).standard_normal(p.shape)
        x = rng.uniform(-1.0, 1.0, (batch, cfg.num_levels, 3, cfg.image_size, cfg.image_size))
        y = rng.standard_normal((batch, cfg.num_genes))

        def objective(ps):
            return mse_loss(m2ost_forward(x, ps, cfg, training=training, rng_key=(seed, "gradcheck")), y)

        return dc.finite_difference_check(objective, params, max_entries=max_entries, seed=seed, details=True)
