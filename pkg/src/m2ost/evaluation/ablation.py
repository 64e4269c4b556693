"""Runnable counterparts of the component-substitution and input-combination ablations."""
from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass

import numpy as np

from ..config import ConfigError, ModelConfig, TrainConfig
from ..data.dataset import StDataset
from ..encoder import init_parameters
from ..training import fit, predict
from .report import build_report

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ["config", "dpe", "itmm", "ctmm", "ccmm", "lvl0", "lvl1", "lvl2",
                    "pcc", "rmse", "params", "macs", "note"]

# (name, overrides) in report order: each row substitutes one more component
COMPONENT_GRID: list[tuple[str, dict]] = [
    ("full", {}),
    ("no-dpe", {"use_dpe": False}),
    ("no-itmm", {"use_dpe": False, "decoupled_itmm": False}),
    ("no-ctmm", {"use_dpe": False, "decoupled_itmm": False, "use_ctmm": "concat"}),
    ("no-ccmm", {"use_dpe": False, "decoupled_itmm": False, "use_ctmm": "concat", "use_ccmm": False}),
]


def level_subset_grid(num_levels: int = 3) -> list[tuple[str, dict]]:
    """Every non-empty subset of levels, singletons first, full set last."""
    grid = []
    for r in range(1, num_levels + 1):
        for subset in itertools.combinations(range(num_levels), r):
            grid.append(("lvl" + "".join(map(str, subset)), {"levels_enabled": subset}))
    return grid


@dataclass
class AblationRow:
    config: str
    cfg: ModelConfig | None
    pcc: float = float("nan")
    rmse: float = float("nan")
    params: int = 0
    macs: int = 0
    note: str = ""

    def cells(self) -> list:
        c = self.cfg
        if c is None:
            return [self.config, "", "", "", "", "", "", "", "", "", "", "", self.note]
        lv = set(c.levels)
        flags = [int(c.use_dpe), int(c.decoupled_itmm), c.use_ctmm, int(c.use_ccmm)]
        return [self.config, *flags, *(int(i in lv) for i in range(3)),
                repr(self.pcc), repr(self.rmse), self.params, self.macs, self.note]


def run_ablation(dataset: StDataset, base_cfg: ModelConfig, grid, train_cfg: TrainConfig,
                 eval_split: str = "test", init_seed: int = 0) -> list[AblationRow]:
    """Train every configuration of ``grid`` with the same seeds and budget, report on ``eval_split``."""
    rows = []
    eval_idx = dataset.split_indices(eval_split)
    for name, overrides in grid:
        if "levels_enabled" in overrides and not overrides["levels_enabled"]:
            rows.append(AblationRow(name, None, note="skipped: no levels enabled"))
            continue
        try:
            cfg = base_cfg.replace(**overrides).validate()
        except ConfigError as exc:
            rows.append(AblationRow(name, None, note=f"skipped: {exc}"))
            continue
        params = init_parameters(cfg, init_seed)
        result = fit(params, dataset, cfg, train_cfg)
        pred = predict(result.best_params, cfg, dataset, eval_idx, batch_size=train_cfg.eval_batch_size,
                       threads=train_cfg.threads)
        rep = build_report([dataset.spot_ids[i] for i in eval_idx], dataset.values[eval_idx].astype(np.float64),
                           pred, cfg, result.best_params)
        rows.append(AblationRow(name, cfg, rep.mean_pcc, rep.mean_rmse, rep.param_count, rep.mac_count))
        log.info("ablation %s: pcc %.4f rmse %.4f", name, rep.mean_pcc, rep.mean_rmse)
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue()
