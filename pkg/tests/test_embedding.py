import numpy as np
import pytest

from m2ost import diffcore as dc
from m2ost.config import ConfigError, ModelConfig
from m2ost.embedding import add_cls_and_positions, dpe_embed, granularities, sequence_length, standardize
from m2ost.encoder import init_parameters

from conftest import TINY, random_images


@pytest.mark.parametrize("size,patch,expected", [(224, 16, (196, 392, 588)), (32, 16, (4, 8, 12)),
                                                 (64, 8, (64, 128, 192))])
def test_sequence_lengths(size, patch, expected):
    cfg = ModelConfig(image_size=size, patch_size=patch, channels=8, heads=1)
    assert tuple(sequence_length(lv, cfg) for lv in range(3)) == expected
    # (l + 1) * L
    unit = (size // patch) ** 2
    assert expected == tuple((lv + 1) * unit for lv in range(3))


def test_fine_regions_are_central():
    plan = granularities(2, ModelConfig(image_size=224, patch_size=16))
    assert plan == [(16, (0, 0, 224, 224)), (8, (56, 56, 112, 112)), (4, (84, 84, 56, 56))]


def test_misaligned_configs_rejected():
    with pytest.raises(ConfigError):
        granularities(0, ModelConfig(image_size=30, patch_size=16))
    with pytest.raises(ConfigError):
        ModelConfig(image_size=32, patch_size=6).validate()


def test_embedded_shapes(f64):
    params = init_parameters(TINY, 0).astype(np.float64)
    seqs = dpe_embed(random_images(TINY, batch=2), params, TINY)
    assert [s.shape for s in seqs] == [(2, 4, 8), (2, 8, 8), (2, 12, 8)]
    full = add_cls_and_positions(seqs, params, TINY)
    assert [s.shape for s in full] == [(2, 5, 8), (2, 9, 8), (2, 13, 8)]


def test_zero_images_zero_tokens(f64):
    params = init_parameters(TINY, 0).astype(np.float64)
    seqs = dpe_embed(np.zeros((1, 3, 3, 32, 32)), params, TINY)
    assert all(not s.data.any() for s in seqs)


def test_zero_tokens_give_positions(f64):
    params = init_parameters(TINY, 0).astype(np.float64)
    for lv in range(3):
        params[f"level{lv}.cls"] = np.zeros(8)
    zeros = [dc.DiffArray(np.zeros((1, n, 8))) for n in (4, 8, 12)]
    out = add_cls_and_positions(zeros, params, TINY)
    for lv, s in enumerate(out):
        np.testing.assert_array_equal(s.data[0], params[f"level{lv}.pos"].data)


def test_positional_tables_not_shared():
    names = init_parameters(TINY, 0).names()
    pos = [n for n in names if n.endswith(".pos")]
    assert pos == ["level0.pos", "level1.pos", "level2.pos"]


def test_positional_mismatch_rejected(f64):
    params = init_parameters(TINY, 0).astype(np.float64)
    params["level1.pos"] = np.zeros((5, 8))
    with pytest.raises(ConfigError):
        add_cls_and_positions(dpe_embed(random_images(TINY), params, TINY), params, TINY)


@pytest.mark.parametrize("embedder,changed", [("p16", {0, 1, 2}), ("p8", {1, 2}), ("p4", {2})])
def test_weight_sharing(embedder, changed, f64):
    params = init_parameters(TINY, 0).astype(np.float64)
    x = random_images(TINY)
    before = dpe_embed(x, params, TINY)
    w = params[f"shared.embed.{embedder}.weight"]
    params[f"shared.embed.{embedder}.weight"] = w.data + 0.1
    after = dpe_embed(x, params, TINY)
    differs = {lv for lv in range(3) if not np.array_equal(before[lv].data, after[lv].data)}
    assert differs == changed
    # base tokens (first L) move for every level when the p embedder moves
    if embedder == "p16":
        assert all(not np.array_equal(b.data[:, :4], a.data[:, :4]) for b, a in zip(before, after))


def test_fine_tokens_local(f64):
    params = init_parameters(TINY, 0).astype(np.float64)
    x = random_images(TINY)
    before = dpe_embed(x, params, TINY)[1].data
    y = x.copy()
    y[0, 1, :, 2, 3] += 1.0  # outside the central 16x16 of the level-1 image
    after = dpe_embed(y, params, TINY)[1].data
    np.testing.assert_array_equal(after[:, 4:], before[:, 4:])
    assert not np.array_equal(after[:, :4], before[:, :4])
    z = x.copy()
    z[0, 1, :, 16, 16] += 1.0  # inside
    assert not np.array_equal(dpe_embed(z, params, TINY)[1].data[:, 4:], before[:, 4:])


def test_token_order_row_major(f64):
    cfg = ModelConfig(image_size=32, patch_size=16, channels=3 * 16 * 16, heads=1, num_levels=1)
    params = init_parameters(cfg, 0).astype(np.float64)
    params["shared.embed.p16.weight"] = np.eye(3 * 256)
    params["shared.embed.p16.bias"] = np.zeros(3 * 256)
    x = np.zeros((1, 1, 3, 32, 32))
    x[0, 0, 0, 0, 16] = 1.0  # top-right patch, channel 0, first pixel
    tokens = dpe_embed(x, params, cfg)[0].data[0]
    assert tokens[1, 0] == 1.0 and tokens.sum() == 1.0


def test_non_dpe_uses_per_level_embedders():
    cfg = TINY.replace(use_dpe=False)
    names = init_parameters(cfg, 0).names()
    assert [n for n in names if ".embed." in n] == [f"level{lv}.embed.{k}" for lv in range(3)
                                                     for k in ("bias", "weight")]
    assert all(sequence_length(lv, cfg) == 4 for lv in range(3))


def test_standardize():
    x = np.array([0, 255], dtype=np.uint8)
    np.testing.assert_allclose(standardize(x), [-1.0, 1.0])
    np.testing.assert_allclose(standardize(np.array([0.5])), [0.0])
