"""Exact parameter counts and closed-form multiply-accumulate counts.

MAC formulas per forward pass of one sample, with T_l = tokens of level l
including cls, C channels, r the MLP ratio, k genes, M enabled levels:

    embedding   sum_l sum_{patch s of l} L * 3 s^2 * C
    ITMM        per level: 4 T C^2 (q, k, v, proj) + 2 T^2 C (scores, weighted sum) + 2 r T C^2 (MLP)
                (unified variant: same with T = sum_l T_l)
    CTMM        per level: 4 T_i C^2; per ordered pair (i, j): 2 T_i T_j C
    concat      4 T C^2 + 2 T^2 C with T = sum_l T_l
    sum         0
    CCMM        2 * (M C) * (M C / se_ratio)
    head        M * C * k

Softmax, layer norm, GELU, sigmoid, biases and other elementwise work are not counted.
"""
from __future__ import annotations

from ..config import ModelConfig
from ..diffcore import ParamStore
from ..embedding import granularities, sequence_length
from ..encoder import parameter_shapes


def count_parameters(params: ParamStore | ModelConfig) -> int:
    if isinstance(params, ModelConfig):
        total = 0
        for shape, _ in parameter_shapes(params).values():
            n = 1
            for d in shape:
                n *= d
            total += n
        return total
    return params.num_scalars()


def _block_macs(t: int, c: int, ratio: int) -> int:
    return 4 * t * c * c + 2 * t * t * c + 2 * ratio * t * c * c


def count_macs(cfg: ModelConfig) -> int:
    cfg.validate()
    c, L = cfg.channels, cfg.tokens_per_unit
    lengths = [sequence_length(lv, cfg) + 1 for lv in cfg.levels]
    total = 0
    for lv in cfg.levels:
        total += sum(L * 3 * s * s * c for s, _ in granularities(lv, cfg))
    m = len(lengths)
    per_repeat = 0
    if cfg.decoupled_itmm:
        per_repeat += sum(_block_macs(t, c, cfg.mlp_ratio) for t in lengths)
    else:
        per_repeat += _block_macs(sum(lengths), c, cfg.mlp_ratio)
    if m >= 2 and cfg.use_ctmm == "ctmm":
        per_repeat += sum(4 * t * c * c for t in lengths)
        per_repeat += sum(2 * ti * tj * c for i, ti in enumerate(lengths) for j, tj in enumerate(lengths) if i != j)
    elif m >= 2 and cfg.use_ctmm == "concat":
        t = sum(lengths)
        per_repeat += 4 * t * c * c + 2 * t * t * c
    if cfg.use_ccmm:
        mc = m * c
        per_repeat += 2 * mc * (mc // cfg.se_ratio)
    total += cfg.depth * per_repeat
    total += m * c * cfg.num_genes
    return total
