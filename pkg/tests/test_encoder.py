import math

import numpy as np
import pytest
from scipy.special import erf, expit

from m2ost import diffcore as dc
from m2ost.config import ModelConfig
from m2ost.encoder import (
    attention_keep_mask,
    ccmm_forward,
    ccmm_gates,
    ccmm_param_shapes,
    check_config_matches,
    cross_level_attention,
    ctmm_forward,
    ctmm_param_shapes,
    encode,
    init_parameters,
    itmm_forward,
    itmm_param_shapes,
    m2ost_forward,
    parameter_shapes,
)

from conftest import TINY, random_images


def block_params(specs, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    store = dc.ParamStore()
    for name, (shape, kind) in specs.items():
        base = np.ones(shape) if kind == "one" else np.zeros(shape)
        store[name] = base + scale * rng.standard_normal(shape)
    return store


def seqs_of(lengths, c, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((batch, t, c)) for t in lengths]


# -- ITMM ----------------------------------------------------------------------

class TestItmm:
    def test_identity_with_zero_output_layers(self, f64):
        params = block_params(itmm_param_shapes("b.", 8, 4))
        for name in ("b.attn.proj.weight", "b.attn.proj.bias", "b.mlp.fc2.weight", "b.mlp.fc2.bias"):
            params[name] = np.zeros(params[name].shape)
        x = np.random.default_rng(1).standard_normal((2, 5, 8))
        out = itmm_forward(dc.DiffArray(x), params, "b.", 2, 0.5, training=True, mask_key=(0,))
        np.testing.assert_array_equal(out.data, x)

    def test_eval_deterministic(self, f64):
        params = block_params(itmm_param_shapes("b.", 8, 4))
        x = dc.DiffArray(np.random.default_rng(1).standard_normal((1, 5, 8)))
        a = itmm_forward(x, params, "b.", 2, 0.5, training=False, mask_key=(0,))
        b = itmm_forward(x, params, "b.", 2, 0.5, training=False, mask_key=(1,))
        np.testing.assert_array_equal(a.data, b.data)
        c = itmm_forward(x, params, "b.", 2, 0.5, training=True, mask_key=(0,))
        d = itmm_forward(x, params, "b.", 2, 0.5, training=True, mask_key=(0,))
        e = itmm_forward(x, params, "b.", 2, 0.5, training=True, mask_key=(1,))
        np.testing.assert_array_equal(c.data, d.data)
        assert not np.array_equal(c.data, a.data) and not np.array_equal(c.data, e.data)

    def test_shape(self, f64):
        params = block_params(itmm_param_shapes("b.", 6, 4))
        out = itmm_forward(dc.DiffArray(np.ones((3, 7, 6))), params, "b.", 3, 0.1, training=True, mask_key=(0,))
        assert out.shape == (3, 7, 6)

    @pytest.mark.parametrize("mask_prob", [0.0, 0.3])
    def test_gradient(self, mask_prob, f64):
        params = block_params(itmm_param_shapes("b.", 6, 4))
        params["x"] = np.random.default_rng(2).standard_normal((1, 5, 6))
        r = np.random.default_rng(3).standard_normal((1, 5, 6))
        f = lambda p: dc.sum_(dc.mul(itmm_forward(p["x"], p, "b.", 2, mask_prob, True, (7,)), r))
        assert dc.finite_difference_check(f, params) < 1e-5


def test_all_dropped_rows_fall_back_to_self():
    keep = attention_keep_mask((2, 3, 6, 6), 0.95, (0, "fallback"))
    assert keep.any(axis=-1).all()
    raw = dc.bernoulli_mask((2, 3, 6, 6), 0.95, 0, "fallback")
    dead = ~raw.any(axis=-1)
    assert dead.any()
    np.testing.assert_array_equal(keep[dead], np.broadcast_to(np.eye(6, dtype=bool), (2, 3, 6, 6))[dead])


def test_masked_attention_rows_renormalized(f64):
    # with value = identity, the attention rows appear directly in the output
    c = 4
    params = dc.ParamStore({"q.weight": np.random.default_rng(0).standard_normal((c, c)), "q.bias": np.zeros(c),
                            "k.weight": np.random.default_rng(1).standard_normal((c, c)),
                            "v.weight": np.eye(c), "v.bias": np.zeros(c),
                            "proj.weight": np.eye(c), "proj.bias": np.zeros(c)})
    from m2ost.encoder import multi_head_attention
    x = dc.DiffArray(np.eye(c)[None])
    out = multi_head_attention(x, params, "", 1, 0.4, (3,))
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    keep = attention_keep_mask((1, 1, c, c), 0.4, (3,))
    assert not (out.data[0][~keep[0, 0]]).any()


# -- CTMM ----------------------------------------------------------------------

class TestCtmm:
    def test_hand_example(self, f64):
        a, b = np.array([[[2.0]]]), np.array([[[-3.0]]])
        omegas = [dc.DiffArray([0.25]), dc.DiffArray([4.0])]
        out0, out1 = cross_level_attention([a, b], [a, b], [a, b], omegas)
        assert out0.data.item() == 0.25 * -3.0
        assert out1.data.item() == 4.0 * 2.0

    def test_residual_identity(self, f64):
        prefixes = ["l0.", "l1."]
        params = dc.ParamStore()
        for p in prefixes:
            for name, (shape, kind) in ctmm_param_shapes(p, 1, 2).items():
                params[name] = np.ones(shape) if kind in ("one", "omega") else np.zeros(shape)
            for w in ("q", "k", "v"):
                params[p + w + ".weight"] = np.eye(1)
        seqs = [dc.DiffArray([[[2.0]]]), dc.DiffArray([[[-3.0]]])]
        out = ctmm_forward(seqs, params, prefixes)
        assert [o.data.item() for o in out] == [2.0, -3.0]

    def test_rows_stochastic(self, f64):
        rng = np.random.default_rng(0)
        q = [rng.standard_normal((1, t, 4)) * 5 for t in (5, 9, 13)]
        ones = [np.ones((1, t, 4)) for t in (5, 9, 13)]
        omegas = [dc.DiffArray([1.0, 0.0]), dc.DiffArray([0.0, 1.0]), dc.DiffArray([1.0, 0.0])]
        for out in cross_level_attention(q, q, ones, omegas):
            assert np.abs(out.data - 1.0).max() < 1e-10

    def test_shapes_preserved(self, f64):
        prefixes = ["a.", "b.", "c."]
        specs = {}
        for p in prefixes:
            specs.update(ctmm_param_shapes(p, 8, 3))
        params = block_params(specs)
        seqs = [dc.DiffArray(s) for s in seqs_of((5, 9, 13), 8, batch=2)]
        assert [o.shape for o in ctmm_forward(seqs, params, prefixes)] == [(2, 5, 8), (2, 9, 8), (2, 13, 8)]

    def test_single_level_identity(self, f64):
        s = dc.DiffArray(np.ones((1, 3, 4)))
        assert ctmm_forward([s], dc.ParamStore(), ["a."])[0] is s

    def test_gradient(self, f64):
        prefixes = ["a.", "b.", "c."]
        specs = {}
        for p in prefixes:
            specs.update(ctmm_param_shapes(p, 4, 3))
        params = block_params(specs)
        for i, s in enumerate(seqs_of((2, 3, 4), 4)):
            params[f"x{i}"] = s
        rs = seqs_of((2, 3, 4), 4, seed=9)

        def f(p):
            outs = ctmm_forward([p["x0"], p["x1"], p["x2"]], p, prefixes)
            return dc.sum_(dc.concat([dc.reshape(dc.mul(o, r), (-1,)) for o, r in zip(outs, rs)], axis=0))

        assert dc.finite_difference_check(f, params) < 1e-5


# -- CCMM ----------------------------------------------------------------------

class TestCcmm:
    def test_zero_weights_half_gates(self, f64):
        params = dc.ParamStore({n: np.zeros(s) for n, (s, _) in ccmm_param_shapes("g.", 4, 3, 4).items()})
        seqs = [dc.DiffArray(s) for s in seqs_of((5, 9, 13), 4)]
        for out, inp in zip(ccmm_forward(seqs, params, "g."), seqs):
            np.testing.assert_array_equal(out.data, 0.5 * inp.data)

    def test_hand_sigmoid_chain(self, f64):
        # M=2, one token, C=1, se_ratio=2 -> hidden width 1
        params = dc.ParamStore({"g.squeeze.weight": [[0.5], [-1.0]], "g.squeeze.bias": [0.25],
                                "g.excite.weight": [[2.0, -3.0]], "g.excite.bias": [0.1, 0.2]})
        a, b = 1.5, 0.5
        gates = ccmm_gates([dc.DiffArray([[[a]]]), dc.DiffArray([[[b]]])], params, "g.")
        z = 0.5 * a - 1.0 * b + 0.25
        h = 0.5 * z * (1 + erf(z / math.sqrt(2)))
        expected = [expit(2.0 * h + 0.1), expit(-3.0 * h + 0.2)]
        np.testing.assert_allclose([g.data.item() for g in gates], expected, rtol=1e-14)

    def test_constant_sequence_pools_to_constant(self, f64):
        # identity squeeze/excite with C=1, M=2, ratio 1: gate = sigmoid(gelu(pooled))
        params = dc.ParamStore({"g.squeeze.weight": np.eye(2), "g.squeeze.bias": np.zeros(2),
                                "g.excite.weight": np.eye(2), "g.excite.bias": np.zeros(2)})
        seqs = [dc.DiffArray(np.full((1, 7, 1), 0.8)), dc.DiffArray(np.full((1, 3, 1), -0.4))]
        gates = ccmm_gates(seqs, params, "g.")
        gelu = lambda v: 0.5 * v * (1 + erf(v / math.sqrt(2)))
        np.testing.assert_allclose([g.data.item() for g in gates], [expit(gelu(0.8)), expit(gelu(-0.4))],
                                   rtol=1e-14)

    def test_gradient(self, f64):
        params = block_params(ccmm_param_shapes("g.", 4, 3, 4))
        for i, s in enumerate(seqs_of((2, 3, 4), 4)):
            params[f"x{i}"] = s
        rs = seqs_of((2, 3, 4), 4, seed=9)

        def f(p):
            outs = ccmm_forward([p["x0"], p["x1"], p["x2"]], p, "g.")
            return dc.sum_(dc.concat([dc.reshape(dc.mul(o, r), (-1,)) for o, r in zip(outs, rs)], axis=0))

        assert dc.finite_difference_check(f, params) < 1e-5


# -- full model ------------------------------------------------------------------

def test_init_deterministic():
    a, b = init_parameters(TINY, 3), init_parameters(TINY, 3)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != init_parameters(TINY, 4).to_bytes()


def test_init_rules():
    params = init_parameters(TINY, 0)
    assert not params["level0.encoder.0.itmm.attn.q.bias"].data.any()
    assert (params["level1.norm.gamma"].data == 1).all()
    w = params["shared.embed.p16.weight"].data
    assert np.abs(w).max() <= 0.04 and abs(w.std() - 0.02) < 0.003
    np.testing.assert_array_equal(params["level2.encoder.0.ctmm.omega"].data, [0.5, 0.5])


def test_omega_count():
    params = init_parameters(TINY.replace(depth=1), 0)
    omegas = [n for n in params.names() if n.endswith("omega")]
    assert sum(params[n].size for n in omegas) == 6
    assert all(n.startswith(f"level{n[5]}.") for n in omegas)


def test_stage_shapes_preserved(f64):
    cfg = TINY.replace(depth=2, heads=2)
    params = init_parameters(cfg, 0).astype(np.float64)
    seen = []

    def hook(stage, n, seqs):
        seen.append((stage, n))
        assert [s.shape for s in seqs] == [(2, 5, 8), (2, 9, 8), (2, 13, 8)]

    encode(random_images(cfg, 2), params, cfg, training=True, rng_key=(0,), stage_hook=hook)
    assert len(seen) == 1 + 3 * 2


def test_forward_shape_and_determinism(f64):
    params = init_parameters(TINY, 0).astype(np.float64)
    x = random_images(TINY, 3)
    a = m2ost_forward(x, params, TINY)
    assert a.shape == (3, 4)
    np.testing.assert_array_equal(a.data, m2ost_forward(x, params, TINY).data)


def test_permutation_invariance(f64):
    cfg = TINY.replace(heads=2)
    params = init_parameters(cfg, 1).astype(np.float64)
    rng = np.random.default_rng(0)
    for name, p in params.items():
        params[name] = p.data + 0.2 * rng.standard_normal(p.shape)
    x = random_images(cfg)
    before = m2ost_forward(x, params, cfg).data
    # swap the top-left and bottom-right 16x16 patches of the level-0 image: tokens 0 and 3
    y = x.copy()
    y[0, 0, :, :16, :16], y[0, 0, :, 16:, 16:] = x[0, 0, :, 16:, 16:], x[0, 0, :, :16, :16]
    pos = params["level0.pos"].data.copy()
    pos[[1, 4]] = pos[[4, 1]]
    params["level0.pos"] = pos
    after = m2ost_forward(y, params, cfg).data
    np.testing.assert_allclose(after, before, rtol=0, atol=1e-12)


def _level_grads(cfg, detach, seed=0):
    params = init_parameters(cfg, seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        params[name] = p.data + 0.2 * rng.standard_normal(p.shape)
    pred = m2ost_forward(random_images(cfg, 2), params, cfg, detach_heads=detach)
    dc.reverse_gradients(dc.mean(dc.square(pred)), params)
    return params


@pytest.mark.parametrize("level", [0, 2])
def test_decoupled_streams(level, f64):
    cfg = TINY.replace(use_ctmm="none", use_ccmm=False)
    params = _level_grads(cfg, detach=(level,))
    mine = params.with_prefix(f"level{level}.")
    assert all(not params[n].grad.any() for n in mine)
    other = params.with_prefix(f"level{(level + 1) % 3}.encoder")
    assert any(params[n].grad.any() for n in other)


@pytest.mark.parametrize("mode,ccmm", [("ctmm", False), ("none", True), ("concat", False), ("sum", False)])
def test_cross_level_flow(mode, ccmm, f64):
    cfg = TINY.replace(use_ctmm=mode, use_ccmm=ccmm)
    params = _level_grads(cfg, detach=(0,))
    assert any(params[n].grad.any() for n in params.with_prefix("level0.encoder.0.itmm"))


def test_missing_level_average_ignores_absent_head(f64):
    cfg = TINY.replace(head_mode="per-level-average")
    params = init_parameters(cfg, 0).astype(np.float64)
    x = random_images(cfg, 2)
    present = np.array([[True, False, True], [True, True, True]])
    a = m2ost_forward(x, params, cfg, level_present=present).data
    params["level1.head.weight"] = params["level1.head.weight"].data + 1.0
    b = m2ost_forward(x, params, cfg, level_present=present).data
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[1], b[1])


def test_all_levels_absent_rejected():
    params = init_parameters(TINY, 0)
    with pytest.raises(ValueError):
        m2ost_forward(random_images(TINY), params, TINY, level_present=np.zeros((1, 3), bool))


def test_level_subset_model(f64):
    cfg = TINY.replace(levels_enabled=(2,))
    params = init_parameters(cfg, 0).astype(np.float64)
    assert not params.with_prefix("level0") and not params.with_prefix("level1")
    assert m2ost_forward(random_images(cfg), params, cfg).shape == (1, 4)


def test_config_mismatch_detected():
    with pytest.raises(ValueError):
        check_config_matches(init_parameters(TINY, 0), TINY.replace(channels=16))


def test_default_config_predicts_250_genes():
    cfg = ModelConfig()
    specs = parameter_shapes(cfg)
    assert specs["shared.head.weight"][0] == (3 * 192, 250)
    assert specs["level2.pos"][0] == (589, 192)
