from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..config import ModelConfig
from .accounting import count_macs, count_parameters
from .metrics import gene_pccs, spot_pccs, spot_rmses


@dataclass
class EvalReport:
    spot_ids: list[str]
    spot_pcc: np.ndarray
    spot_pcc_defined: np.ndarray
    spot_rmse: np.ndarray
    mean_pcc: float
    mean_rmse: float
    param_count: int
    mac_count: int
    fingerprint: str
    gene_pcc: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        """``spot_id,pcc,rmse`` rows sorted by spot id; undefined PCCs are written empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["spot_id", "pcc", "rmse"])
        for i in np.argsort(np.asarray(self.spot_ids, dtype=object), kind="stable"):
            p = repr(float(self.spot_pcc[i])) if self.spot_pcc_defined[i] else ""
            w.writerow([self.spot_ids[i], p, repr(float(self.spot_rmse[i]))])
        return buf.getvalue()


def build_report(spot_ids, truth: np.ndarray, pred: np.ndarray, cfg: ModelConfig,
                 params=None, per_gene: bool = False) -> EvalReport:
    r, ok = spot_pccs(truth, pred)
    e = spot_rmses(truth, pred)
    return EvalReport(
        spot_ids=list(spot_ids), spot_pcc=r, spot_pcc_defined=ok, spot_rmse=e,
        mean_pcc=float(r[ok].mean()) if ok.any() else 0.0,
        mean_rmse=float(e.mean()) if len(e) else 0.0,
        param_count=count_parameters(params if params is not None else cfg),
        mac_count=count_macs(cfg), fingerprint=cfg.fingerprint(),
        gene_pcc=gene_pccs(truth, pred)[0] if per_gene else None,
    )
