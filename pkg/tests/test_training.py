from dataclasses import replace

import numpy as np
import pytest

from m2ost import diffcore as dc
from m2ost.config import ConfigError, ModelConfig, TrainConfig
from m2ost.data import SynthConfig, synth_generate
from m2ost.embedding import standardize
from m2ost.encoder import init_parameters, m2ost_forward
from m2ost.training import (
    LOG_HEADER,
    TrainingDivergedError,
    batch_inputs,
    fit,
    fit_missing_levels,
    missing_level_plan,
    mse_loss,
    save_checkpoint,
)

CFG = ModelConfig(image_size=16, patch_size=8, channels=8, depth=1, heads=2, num_genes=6)
FAST = TrainConfig(lr=1e-3, batch_size=8, epochs=1, seed=0, eval_every=3)


@pytest.fixture(scope="module")
def ds():
    return synth_generate(SynthConfig(n_slides=10, spots_per_slide=4, image_size=16, num_genes=6), 0)


class TestMse:
    def test_examples(self):
        t = np.array([1.0, 2.0, 3.0])
        assert mse_loss(dc.DiffArray(t), t).data == 0.0
        assert mse_loss(dc.DiffArray(t + 1), t).data == 1.0
        assert mse_loss(dc.DiffArray([1.0, 2.0]), np.array([3.0, 5.0])).data == 6.5

    def test_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(dc.DiffArray([1.0, 2.0]), np.array([1.0]))


def test_lr_zero_keeps_params(ds):
    params = init_parameters(CFG, 0)
    before = params.to_bytes()
    fit(params, ds, CFG, replace(FAST, lr=0.0))
    assert params.to_bytes() == before


def test_identical_seeds_identical_runs(ds, tmp_path):
    outs = []
    for run in ("a", "b"):
        params = init_parameters(CFG, 0)
        res = fit(params, ds, CFG, FAST, log_path=tmp_path / f"{run}.csv", checkpoint_path=tmp_path / f"{run}.m2o")
        outs.append((res.log_text(), (tmp_path / f"{run}.csv").read_bytes(), (tmp_path / f"{run}.m2o").read_bytes()))
    assert outs[0] == outs[1]
    assert outs[0][0] == outs[0][1].decode()
    assert outs[0][0].startswith(LOG_HEADER + "\n")


def test_different_seed_different_run(ds):
    a = fit(init_parameters(CFG, 0), ds, CFG, FAST)
    b = fit(init_parameters(CFG, 0), ds, CFG, replace(FAST, seed=1))
    assert a.log_rows != b.log_rows


def test_best_checkpoint_tracks_val_pcc(ds):
    res = fit(init_parameters(CFG, 0), ds, CFG, TrainConfig(lr=1e-3, batch_size=4, epochs=2, eval_every=2))
    assert res.best_val_pcc == max(r[2] for r in res.log_rows)
    assert res.best_step == max(res.log_rows, key=lambda r: r[2])[0]


def test_loss_decreases_on_fixed_batch():
    cfg = ModelConfig(image_size=32, patch_size=8, channels=32, depth=2, heads=2, num_genes=50)
    ds = synth_generate(SynthConfig(n_slides=1, spots_per_slide=32), 0)
    params = init_parameters(cfg, 0)
    state = dc.AdamState(lr=1e-3)
    x = standardize(ds.images)
    losses = []
    for step in range(10):
        params.zero_grad()
        loss = mse_loss(m2ost_forward(x, params, cfg, training=True, rng_key=(0, step)), ds.values)
        dc.reverse_gradients(loss, params)
        dc.adam_step(params, state)
        losses.append(float(loss.data))
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_batch_gradient_is_mean_of_sample_gradients(f64):
    params = init_parameters(CFG, 0).astype(np.float64)
    rng = np.random.default_rng(0)
    for name, p in params.items():
        params[name] = p.data + 0.1 * rng.standard_normal(p.shape)
    x = rng.uniform(-1, 1, (2, 3, 3, 16, 16))
    y = rng.standard_normal((2, 6))

    def grads(xb, yb):
        params.zero_grad()
        dc.reverse_gradients(mse_loss(m2ost_forward(xb, params, CFG), yb), params)
        return {n: p.grad.copy() for n, p in params.items()}

    both = grads(x, y)
    one, two = grads(x[:1], y[:1]), grads(x[1:], y[1:])
    for name in both:
        np.testing.assert_allclose(both[name], (one[name] + two[name]) / 2, rtol=1e-10, atol=1e-15)


class TestMissingLevels:
    def test_plan(self):
        plan = missing_level_plan(40, 3, (0, 1, 2), 0.75, 0, "train")
        assert ((~plan).sum(axis=1) == 1).sum() == 30
        assert (~plan).sum(axis=1).max() == 1
        np.testing.assert_array_equal(plan, missing_level_plan(40, 3, (0, 1, 2), 0.75, 0, "train"))
        assert missing_level_plan(5, 3, (0, 1, 2), 0.0, 0, "x").all()

    def test_absent_stream_gets_zero_grad(self, f64):
        cfg = CFG.replace(head_mode="per-level-average")
        params = init_parameters(cfg, 0).astype(np.float64)
        rng = np.random.default_rng(0)
        for name, p in params.items():
            params[name] = p.data + 0.1 * rng.standard_normal(p.shape)
        imgs = rng.integers(0, 256, (1, 3, 3, 16, 16), dtype=np.uint8)
        present = np.array([[True, False, True]])
        from m2ost.data import StDataset
        one = StDataset(images=imgs, values=np.zeros((1, 6)), gene_names=[f"g{i}" for i in range(6)],
                        spot_ids=["s"], slide_ids=["slide0"], centers=[[0, 0]])
        x, flags = batch_inputs(one, np.array([0]), present)
        assert not x[0, 1].any() or np.all(x[0, 1] == -1.0)  # black image
        pred = m2ost_forward(x, params, cfg, training=True, level_present=flags, rng_key=(0,))
        dc.reverse_gradients(mse_loss(pred, rng.standard_normal((1, 6))), params)
        level1 = params.with_prefix("level1.")
        assert level1 and all(not params[n].grad.any() for n in level1)
        assert params["shared.embed.p4.weight"].grad.any()  # level 2 only
        assert params["level0.encoder.0.itmm.attn.q.weight"].grad.any()

    def test_fraction_zero_equals_fit(self, ds):
        cfg = CFG.replace(head_mode="per-level-average")
        a = fit(init_parameters(cfg, 0), ds, cfg, FAST)
        b = fit_missing_levels(init_parameters(cfg, 0), ds, cfg, FAST)
        assert a.log_text() == b.log_text()

    def test_requires_average_head(self, ds):
        with pytest.raises(ConfigError):
            fit_missing_levels(init_parameters(CFG, 0), ds, CFG, FAST)

    def test_training_with_masking_runs(self, ds):
        cfg = CFG.replace(head_mode="per-level-average")
        res = fit_missing_levels(init_parameters(cfg, 0), ds, cfg,
                                 replace(FAST, missing_level_fraction=0.75))
        assert res.steps > 0 and np.isfinite(res.best_val_pcc)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_batch(ds):
    params = init_parameters(CFG, 0)
    params["shared.head.bias"] = np.full(6, 1e30, dtype=np.float32)
    with pytest.raises(TrainingDivergedError, match=r"step 0 .*batch 0"):
        fit(params, ds, CFG, FAST)


def test_checkpoint_sidecar(tmp_path):
    params = init_parameters(CFG, 0)
    save_checkpoint(params, CFG, tmp_path / "m.m2o")
    text = (tmp_path / "m.m2o.cfg").read_text()
    assert f"fingerprint={CFG.fingerprint()}" in text and "channels=8" in text
    assert dc.ParamStore.load(tmp_path / "m.m2o").to_bytes() == params.to_bytes()


def test_gene_count_mismatch(ds):
    with pytest.raises(ConfigError):
        fit(init_parameters(CFG.replace(num_genes=5), 0), ds, CFG.replace(num_genes=5), FAST)
