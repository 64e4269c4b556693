"""Metrics, parameter/MAC accounting, ablations and map export.

Only the metrics are imported eagerly; :mod:`.ablation` and :mod:`.export`
pull in the training stack and are imported on demand.
"""
from .metrics import gene_pccs, mean_spot_pcc, pcc, pcc_checked, rmse, spot_pccs, spot_rmses

__all__ = ["gene_pccs", "mean_spot_pcc", "pcc", "pcc_checked", "rmse", "spot_pccs", "spot_rmses"]
