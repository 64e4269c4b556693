"""The multi-level encoder: per-level token mixing, cross-level attention, channel gating, heads.

Parameter layout. Everything that belongs to one pyramid level lives under
``level{l}.``; anything used by several levels lives under ``shared.``::

    level{l}.cls / level{l}.pos                        cls token, positional table
    level{l}.encoder.{n}.itmm.*                        per-level transformer block
    level{l}.encoder.{n}.ctmm.{norm,q,k,v,proj,omega}  cross-level attention
    level{l}.norm.* / level{l}.head.*                  final norm, per-level head
    shared.embed.p{size}.*                             one projection per patch size
    shared.encoder.{n}.ccmm.{squeeze,excite}.*         cross-level channel gating
    shared.head.*                                      head on concatenated cls tokens

Key projections carry no bias: a bias on keys shifts every logit of a row
by the same amount, which softmax ignores.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .config import ConfigError, ModelConfig
from .embedding import (
    MultiScaleSample,
    add_cls_and_positions,
    dpe_embed,
    embedding_param_shapes,
    standardize,
)

ParamSpecs = dict[str, tuple[tuple[int, ...], str]]


def _lin(x, params, name, bias: bool = True):
    return dc.linear(x, params[name + ".weight"], params[name + ".bias"] if bias else None)


def _ln(x, params, name, eps):
    return dc.layer_norm(x, params[name + ".gamma"], params[name + ".beta"], eps)


def _guard(x: dc.DiffArray, keep: np.ndarray | None) -> dc.DiffArray:
    """Block gradients of the batch entries whose ``keep`` flag is 0."""
    if keep is None:
        return x
    return dc.grad_mask(x, keep.reshape((-1,) + (1,) * (x.ndim - 1)))


def attention_keep_mask(shape, drop_prob: float, key: tuple | None) -> np.ndarray | None:
    """Keep-mask for post-softmax attention weights, with the all-dropped-row fallback to self."""
    if key is None or drop_prob <= 0.0:
        return None
    keep = dc.bernoulli_mask(shape, drop_prob, *key)
    dead = ~keep.any(axis=-1)
    if dead.any():
        t = shape[-1]
        diag = np.eye(shape[-2], t, dtype=bool)
        keep = np.where(dead[..., None] & diag, True, keep)
    return keep


# -- ITMM -----------------------------------------------------------------------

def multi_head_attention(x: dc.DiffArray, params, prefix: str, heads: int,
                         drop_prob: float = 0.0, mask_key: tuple | None = None) -> dc.DiffArray:
    b, t, c = x.shape
    d = c // heads

    def split_heads(y):
        return dc.transpose(dc.reshape(y, (b, t, heads, d)), (0, 2, 1, 3))

    q = split_heads(_lin(x, params, prefix + "q"))
    k = split_heads(_lin(x, params, prefix + "k", bias=False))
    v = split_heads(_lin(x, params, prefix + "v"))
    scores = dc.mul(dc.matmul(q, dc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    attn = dc.softmax_rows(scores)
    keep = attention_keep_mask((b, heads, t, t), drop_prob, mask_key)
    if keep is not None:
        kept = dc.mul(attn, keep.astype(attn.dtype))
        attn = dc.div(kept, dc.sum_(kept, axis=-1, keepdims=True))
    ctx = dc.reshape(dc.transpose(dc.matmul(attn, v), (0, 2, 1, 3)), (b, t, c))
    return _lin(ctx, params, prefix + "proj")


def itmm_forward(seq: dc.DiffArray, params, prefix: str, heads: int, mask_prob: float,
                 training: bool, mask_key: tuple | None = None, eps: float = 1e-6) -> dc.DiffArray:
    """Pre-norm transformer block with random post-softmax attention masking while training."""
    key = mask_key if training else None
    h = dc.add(seq, multi_head_attention(_ln(seq, params, prefix + "ln1", eps), params,
                                         prefix + "attn.", heads, mask_prob, key))
    y = _lin(_ln(h, params, prefix + "ln2", eps), params, prefix + "mlp.fc1")
    return dc.add(h, _lin(dc.gelu(y), params, prefix + "mlp.fc2"))


def itmm_param_shapes(prefix: str, c: int, mlp_ratio: int) -> ParamSpecs:
    specs: ParamSpecs = {}
    for ln in ("ln1", "ln2"):
        specs[f"{prefix}{ln}.gamma"] = ((c,), "one")
        specs[f"{prefix}{ln}.beta"] = ((c,), "zero")
    specs.update(_attn_shapes(prefix + "attn.", c))
    specs[prefix + "mlp.fc1.weight"] = ((c, mlp_ratio * c), "trunc")
    specs[prefix + "mlp.fc1.bias"] = ((mlp_ratio * c,), "zero")
    specs[prefix + "mlp.fc2.weight"] = ((mlp_ratio * c, c), "trunc")
    specs[prefix + "mlp.fc2.bias"] = ((c,), "zero")
    return specs


def _attn_shapes(prefix: str, c: int) -> ParamSpecs:
    specs: ParamSpecs = {}
    for name in ("q", "k", "v", "proj"):
        specs[f"{prefix}{name}.weight"] = ((c, c), "trunc")
        if name != "k":
            specs[f"{prefix}{name}.bias"] = ((c,), "zero")
    return specs


# -- CTMM -----------------------------------------------------------------------

def cross_level_attention(queries: Sequence[dc.DiffArray], keys: Sequence[dc.DiffArray],
                          values: Sequence[dc.DiffArray], omegas: Sequence[dc.DiffArray]) -> list[dc.DiffArray]:
    """out_i = sum_{j != i} omega_j^i * softmax(Q_i K_j^T / sqrt(C)) V_j.

    ``omegas[i]`` holds the M-1 mixing weights of level i, ordered by j with i skipped.
    """
    m = len(queries)
    outs = []
    for i in range(m):
        c = queries[i].shape[-1]
        total = None
        slot = 0
        for j in range(m):
            if j == i:
                continue
            scores = dc.mul(dc.matmul(queries[i], dc.swapaxes(keys[j], -1, -2)), 1.0 / math.sqrt(c))
            mixed = dc.matmul(dc.softmax_rows(scores), values[j])
            term = dc.mul(mixed, omegas[i][slot])
            total = term if total is None else dc.add(total, term)
            slot += 1
        outs.append(total)
    return outs


def ctmm_forward(seqs: list[dc.DiffArray], params, prefixes: Sequence[str],
                 keep: Sequence[np.ndarray | None] | None = None, eps: float = 1e-6) -> list[dc.DiffArray]:
    """Cross-level attention with per-level norm, projections and residual; shapes unchanged."""
    m = len(seqs)
    if m < 2:
        return list(seqs)
    keep = keep or [None] * m
    normed = [_ln(s, params, p + "norm", eps) for s, p in zip(seqs, prefixes)]
    q = [_lin(x, params, p + "q") for x, p in zip(normed, prefixes)]
    k = [_guard(_lin(x, params, p + "k", bias=False), kp) for x, p, kp in zip(normed, prefixes, keep)]
    v = [_guard(_lin(x, params, p + "v"), kp) for x, p, kp in zip(normed, prefixes, keep)]
    omegas = [params[p + "omega"] for p in prefixes]
    mixed = cross_level_attention(q, k, v, omegas)
    return [dc.add(s, _lin(o, params, p + "proj")) for s, o, p in zip(seqs, mixed, prefixes)]


def ctmm_param_shapes(prefix: str, c: int, m: int) -> ParamSpecs:
    specs: ParamSpecs = {
        prefix + "norm.gamma": ((c,), "one"),
        prefix + "norm.beta": ((c,), "zero"),
        prefix + "omega": ((m - 1,), "omega"),
    }
    specs.update(_attn_shapes(prefix, c))
    return specs


# -- CCMM -----------------------------------------------------------------------

def ccmm_gates(seqs: list[dc.DiffArray], params, prefix: str,
               keep: Sequence[np.ndarray | None] | None = None) -> list[dc.DiffArray]:
    keep = keep or [None] * len(seqs)
    pooled = [_guard(dc.mean(s, axis=1), kp) for s, kp in zip(seqs, keep)]
    z = dc.concat(pooled, axis=-1)
    hidden = dc.gelu(_lin(z, params, prefix + "squeeze"))
    gates = dc.sigmoid(_lin(hidden, params, prefix + "excite"))
    return dc.split(gates, [s.shape[-1] for s in seqs], axis=-1)


def ccmm_forward(seqs: list[dc.DiffArray], params, prefix: str,
                 keep: Sequence[np.ndarray | None] | None = None) -> list[dc.DiffArray]:
    """Squeeze-and-excitation over the concatenated per-level token means; gates scale each level."""
    gates = ccmm_gates(seqs, params, prefix, keep)
    return [dc.channel_gate(s, g) for s, g in zip(seqs, gates)]


def ccmm_param_shapes(prefix: str, c: int, m: int, ratio: int) -> ParamSpecs:
    mc = m * c
    hid = mc // ratio
    return {
        prefix + "squeeze.weight": ((mc, hid), "trunc"),
        prefix + "squeeze.bias": ((hid,), "zero"),
        prefix + "excite.weight": ((hid, mc), "trunc"),
        prefix + "excite.bias": ((mc,), "zero"),
    }


# -- ablation substitutes ---------------------------------------------------------

def _fused_attention(seqs, params, prefix, heads, eps, keep):
    sizes = [s.shape[1] for s in seqs]
    fused = dc.concat([_guard(s, kp) for s, kp in zip(seqs, keep)], axis=1)
    fused = dc.add(fused, multi_head_attention(_ln(fused, params, prefix + "ln", eps),
                                               params, prefix + "attn.", heads))
    return dc.split(fused, sizes, axis=1)


def _summed_summaries(seqs, keep):
    pooled = [_guard(dc.mean(s, axis=1, keepdims=True), kp) for s, kp in zip(seqs, keep)]
    out = []
    for i, s in enumerate(seqs):
        others = [p for j, p in enumerate(pooled) if j != i]
        if not others:
            out.append(s)
            continue
        total = others[0]
        for p in others[1:]:
            total = dc.add(total, p)
        out.append(dc.add(s, total))
    return out


# -- full model -----------------------------------------------------------------

def _level_prefix(level: int, n: int, block: str) -> str:
    return f"level{level}.encoder.{n}.{block}."


def parameter_shapes(cfg: ModelConfig) -> ParamSpecs:
    """Every parameter's name, shape and init rule for ``cfg``."""
    cfg.validate()
    c, m = cfg.channels, cfg.num_streams
    specs = embedding_param_shapes(cfg)
    for n in range(cfg.depth):
        if cfg.decoupled_itmm:
            for level in cfg.levels:
                specs.update(itmm_param_shapes(_level_prefix(level, n, "itmm"), c, cfg.mlp_ratio))
        else:
            specs.update(itmm_param_shapes(f"shared.encoder.{n}.itmm.", c, cfg.mlp_ratio))
        if m >= 2 and cfg.use_ctmm == "ctmm":
            for level in cfg.levels:
                specs.update(ctmm_param_shapes(_level_prefix(level, n, "ctmm"), c, m))
        elif m >= 2 and cfg.use_ctmm == "concat":
            prefix = f"shared.encoder.{n}.fuse."
            specs[prefix + "ln.gamma"] = ((c,), "one")
            specs[prefix + "ln.beta"] = ((c,), "zero")
            specs.update(_attn_shapes(prefix + "attn.", c))
        if cfg.use_ccmm:
            specs.update(ccmm_param_shapes(f"shared.encoder.{n}.ccmm.", c, m, cfg.se_ratio))
    for level in cfg.levels:
        specs[f"level{level}.norm.gamma"] = ((c,), "one")
        specs[f"level{level}.norm.beta"] = ((c,), "zero")
    k = cfg.num_genes
    if cfg.head_mode == "concat-cls":
        specs["shared.head.weight"] = ((m * c, k), "trunc")
        specs["shared.head.bias"] = ((k,), "zero")
    else:
        for level in cfg.levels:
            specs[f"level{level}.head.weight"] = ((c, k), "trunc")
            specs[f"level{level}.head.bias"] = ((k,), "zero")
    return specs


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dc.ParamStore:
    """Fresh parameters; each tensor is drawn from its own stream keyed by (seed, name)."""
    specs = parameter_shapes(cfg)
    store = dc.ParamStore(rng_seed=seed)
    for name in sorted(specs):
        shape, kind = specs[name]
        rng = dc.generator(seed, "init", name)
        if kind == "trunc":
            values = _trunc_normal(rng, shape, 0.02)
        elif kind == "normal":
            values = rng.standard_normal(shape) * 0.02
        elif kind == "one":
            values = np.ones(shape)
        elif kind == "omega":
            values = np.full(shape, 1.0 / max(cfg.num_streams - 1, 1))
        else:
            values = np.zeros(shape)
        store[name] = dc.DiffArray(values)
    return store


def encode(images: np.ndarray, params, cfg: ModelConfig, training: bool = False,
           level_present: np.ndarray | None = None, rng_key: tuple | None = None,
           stage_hook=None) -> list[dc.DiffArray]:
    """Run embedding and the N encoder repeats; returns the per-level sequences.

    ``level_present`` is a ``[B, num_levels]`` boolean array; absent levels
    still flow forward (as black images) but never pass gradients to the
    other levels. ``stage_hook(name, n, seqs)`` observes every stage output.
    """
    levels = cfg.levels
    keep = None
    if level_present is not None:
        present = np.asarray(level_present, dtype=bool)
        if present.all():
            keep = None
        else:
            keep = [present[:, lv].astype(dc.get_dtype()) for lv in levels]
    keep_list = keep or [None] * len(levels)

    seqs = add_cls_and_positions(dpe_embed(images, params, cfg), params, cfg)
    if stage_hook:
        stage_hook("embed", -1, seqs)
    for n in range(cfg.depth):
        if cfg.decoupled_itmm:
            seqs = [itmm_forward(s, params, _level_prefix(lv, n, "itmm"), cfg.heads, cfg.mask_prob,
                                 training, None if rng_key is None else (*rng_key, n, lv), cfg.ln_eps)
                    for s, lv in zip(seqs, levels)]
        else:
            sizes = [s.shape[1] for s in seqs]
            fused = dc.concat([_guard(s, kp) for s, kp in zip(seqs, keep_list)], axis=1)
            fused = itmm_forward(fused, params, f"shared.encoder.{n}.itmm.", cfg.heads, cfg.mask_prob,
                                 training, None if rng_key is None else (*rng_key, n, "fused"), cfg.ln_eps)
            seqs = dc.split(fused, sizes, axis=1)
        if stage_hook:
            stage_hook("itmm", n, seqs)
        if len(seqs) >= 2:
            if cfg.use_ctmm == "ctmm":
                seqs = ctmm_forward(seqs, params, [_level_prefix(lv, n, "ctmm") for lv in levels],
                                    keep_list, cfg.ln_eps)
            elif cfg.use_ctmm == "concat":
                seqs = _fused_attention(seqs, params, f"shared.encoder.{n}.fuse.", cfg.heads,
                                        cfg.ln_eps, keep_list)
            elif cfg.use_ctmm == "sum":
                seqs = _summed_summaries(seqs, keep_list)
        if stage_hook:
            stage_hook("ctmm", n, seqs)
        if cfg.use_ccmm:
            seqs = ccmm_forward(seqs, params, f"shared.encoder.{n}.ccmm.", keep_list)
        if stage_hook:
            stage_hook("ccmm", n, seqs)
    return seqs


def m2ost_forward(images: np.ndarray, params, cfg: ModelConfig, training: bool = False,
                  level_present: np.ndarray | None = None, rng_key: tuple | None = None,
                  detach_heads: Sequence[int] = (), stage_hook=None) -> dc.DiffArray:
    """Predict ``[B, k]`` gene expressions from standardized images ``[B, M, 3, H, W]``.

    ``detach_heads`` lists levels whose cls token reaches the head without
    passing gradient back (used to probe cross-level gradient flow).
    """
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[None]
    b = images.shape[0]
    if level_present is None:
        present = np.ones((b, cfg.num_levels), dtype=bool)
    else:
        present = np.asarray(level_present, dtype=bool).reshape(b, cfg.num_levels)
    enabled = present[:, list(cfg.levels)]
    if not enabled.any(axis=1).all():
        raise ValueError("every enabled level is absent for at least one sample")

    seqs = encode(images, params, cfg, training, present, rng_key, stage_hook)
    cls_tokens = []
    for lv, s in zip(cfg.levels, seqs):
        tok = _ln(s[:, 0, :], params, f"level{lv}.norm", cfg.ln_eps)
        if lv in detach_heads:
            tok = dc.detach(tok)
        cls_tokens.append(tok)

    if cfg.head_mode == "concat-cls":
        return _lin(dc.concat(cls_tokens, axis=-1), params, "shared.head")
    weights = enabled / enabled.sum(axis=1, keepdims=True)
    total = None
    for i, (lv, tok) in enumerate(zip(cfg.levels, cls_tokens)):
        pred = _lin(tok, params, f"level{lv}.head")
        term = dc.mul(pred, weights[:, i:i + 1].astype(pred.dtype))
        total = term if total is None else dc.add(total, term)
    return total


def predict_sample(sample: MultiScaleSample, params, cfg: ModelConfig) -> np.ndarray:
    """Eval-mode prediction ``[k]`` for one sample; absent levels are blacked out."""
    imgs = np.stack([np.asarray(im) if present else np.zeros_like(im)
                     for im, present in zip(sample.images, sample.level_present)])
    with dc.no_grad():
        out = m2ost_forward(standardize(imgs)[None], params, cfg, training=False,
                            level_present=np.asarray(sample.level_present)[None])
    return out.data[0]


def check_config_matches(params: dc.ParamStore, cfg: ModelConfig) -> None:
    specs = parameter_shapes(cfg)
    if set(specs) != set(params.names()):
        diff = sorted(set(specs) ^ set(params.names()))
        raise ConfigError(f"parameters do not match config; differing names: {diff[:5]}")
    for name, (shape, _) in specs.items():
        if params[name].shape != tuple(shape):
            raise ConfigError(f"{name}: stored shape {params[name].shape} vs config {shape}")
