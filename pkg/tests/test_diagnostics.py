import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sptlsa.attention import AttentionRecord
from sptlsa.autograd import DomainError
from sptlsa.diagnostics import (NotApplicableError, class_attention_grid, depth_kld_profile, diagnose,
                                export_class_attention, fixed_temperature_profile, kld_from_uniform, layer_klds,
                                read_pgm, temperature_profile, to_pgm_bytes, write_attention_map)
from sptlsa.model import ViTConfig, build_model, variant_config

MICRO = ViTConfig(depth=2)


def test_kld_examples():
    assert kld_from_uniform([0.25] * 4) == 0.0
    assert kld_from_uniform([1.0, 0.0, 0.0, 0.0]) == pytest.approx(math.log(4), abs=1e-15)
    assert kld_from_uniform([0.5, 0.5, 0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(DomainError):
        kld_from_uniform([0.5, 0.6])
    with pytest.raises(DomainError):
        kld_from_uniform([])


def test_kld_row_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(9))
        assert kld_from_uniform(p) == pytest.approx(float(np.sum(p * np.log(p / (1 / 9)))), rel=1e-12)


def test_masked_layers_use_feasible_support():
    scores = np.array([[[[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]]])
    rec = AttentionRecord(0, scores)
    assert layer_klds([rec], [True])[0] == pytest.approx(0.0, abs=1e-15)
    assert layer_klds([rec], [False])[0] == pytest.approx(math.log(3 / 2), abs=1e-15)


def test_depth_profile_shape_and_sign():
    model = build_model(variant_config(MICRO, "SL-ViT"), 0)
    images = np.random.default_rng(0).normal(size=(5, 32, 32, 3))
    prof = depth_kld_profile(model, images, batch_size=2)
    assert prof.shape == (2,) and np.all(prof >= 0)
    _, records = model.forward(images, capture_attention=True)
    np.testing.assert_allclose(prof, layer_klds(records, [True, True]), rtol=1e-12)


def test_temperature_profiles():
    learned = build_model(variant_config(MICRO, "L-ViT"), 0)
    learned.blocks[1].attn.tau.data[:] = [1.0, 2.0, 3.0, 6.0]
    prof = temperature_profile(learned)
    np.testing.assert_array_equal(prof.mean_tau, [4.0, 3.0])
    np.testing.assert_array_equal(prof.reference, [4.0, 4.0])
    np.testing.assert_array_equal(prof.ratio, [1.0, 0.75])
    fixed = build_model(MICRO, 0)
    with pytest.raises(NotApplicableError):
        temperature_profile(fixed)
    assert not fixed_temperature_profile(fixed).learnable


def test_diagnose_rows():
    model = build_model(variant_config(MICRO, "SL-ViT"), 0)
    report = diagnose(model, np.random.default_rng(1).normal(size=(3, 32, 32, 3)))
    rows = report.rows()
    assert [r["layer"] for r in rows] == [0, 1]
    assert all(r["learnable"] == 1 and r["sqrt_dk"] == 4.0 for r in rows)


def test_class_attention_one_hot():
    scores = np.zeros((1, 2, 5, 5))
    scores[0, :, 0, 3] = 1.0
    grid = class_attention_grid(AttentionRecord(0, scores))
    expected = np.zeros((2, 2))
    expected[1, 0] = 1.0
    np.testing.assert_array_equal(grid, expected)
    pgm = read_pgm(to_pgm_bytes(grid))
    np.testing.assert_array_equal(pgm, expected * 255)


def test_class_attention_renormalised_and_head_mean():
    rng = np.random.default_rng(2)
    scores = rng.dirichlet(np.ones(5), size=(1, 3, 5))
    grid = class_attention_grid(AttentionRecord(0, scores))
    row = scores[0, :, 0, 1:].mean(0)
    np.testing.assert_allclose(grid.ravel(), row / row.sum(), rtol=1e-12)
    assert grid.sum() == pytest.approx(1.0)


def test_class_attention_errors():
    with pytest.raises(NotApplicableError):
        class_attention_grid(AttentionRecord(0, np.full((1, 1, 4, 4), 0.25)))
    with pytest.raises(NotApplicableError):
        export_class_attention(build_model(MICRO.replace(use_class_token=False)), np.zeros((32, 32, 3)))


def test_export_and_write(tmp_path):
    model = build_model(variant_config(MICRO, "SL-ViT"), 0)
    grid = export_class_attention(model, np.random.default_rng(3).normal(size=(32, 32, 3)))
    assert grid.shape == (4, 4)
    csv_path, pgm_path = write_attention_map(grid, tmp_path / "map")
    np.testing.assert_array_equal(np.loadtxt(csv_path, delimiter=","), grid)
    raw = pgm_path.read_bytes()
    assert raw.startswith(b"P5\n4 4\n255\n") and len(raw) == len(b"P5\n4 4\n255\n") + 16
    px = read_pgm(raw)
    assert px.min() == 0 and px.max() == 255


def test_constant_map_pgm_is_zero():
    assert set(read_pgm(to_pgm_bytes(np.full((3, 3), 0.2))).ravel()) == {0}


def test_zero_projections_give_flat_profile():
    model = build_model(MICRO, 0)
    for attn in model.attention_params():
        attn.w_q.data[:] = 0.0
        attn.w_k.data[:] = 0.0
    prof = depth_kld_profile(model, np.random.default_rng(4).normal(size=(2, 32, 32, 3)))
    np.testing.assert_allclose(prof, 0.0, atol=1e-12)


def test_fresh_and_fixed_temperature_profiles_are_sqrt_dk():
    prof = temperature_profile(build_model(variant_config(MICRO, "SL-ViT"), 0))
    np.testing.assert_array_equal(prof.mean_tau, [4.0, 4.0])
    report = diagnose(build_model(MICRO, 0), np.random.default_rng(5).normal(size=(2, 32, 32, 3)))
    assert [r["mean_tau"] for r in report.rows()] == [4.0, 4.0]
    assert [r["learnable"] for r in report.rows()] == [0, 0]


def test_uniform_attention_constant_grid():
    grid = class_attention_grid(AttentionRecord(0, np.full((1, 2, 17, 17), 1 / 17)))
    assert abs(grid.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(grid, 1 / 16, rtol=1e-12)
    assert len(set(read_pgm(to_pgm_bytes(grid)).ravel())) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_kld_zero_iff_uniform_max_iff_one_hot(length, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(length, 0.5))
    value = kld_from_uniform(p)
    assert 0.0 <= value <= math.log(length) + 1e-12
    if value < 1e-12:  # Pinsker: total variation <= sqrt(KL / 2)
        assert np.abs(p - 1 / length).sum() / 2 <= 1e-6
    if value > math.log(length) - 1e-12:
        assert p.max() > 1 - 1e-9
    one_hot = np.eye(length)[rng.integers(length)]
    assert kld_from_uniform(one_hot) == pytest.approx(math.log(length), abs=1e-12)
    assert kld_from_uniform(np.full(length, 1 / length)) <= 1e-15


def test_report_csv_round_trip(tmp_path):
    from sptlsa.experiments import read_csv, write_csv
    report = diagnose(build_model(variant_config(MICRO, "L-ViT"), 0), np.random.default_rng(6).normal(size=(2, 32, 32, 3)))
    header = ["layer", "mean_kld", "mean_tau", "sqrt_dk", "tau_ratio", "learnable"]
    rows = read_csv(write_csv(tmp_path / "d.csv", header, report.rows()))
    assert [float(r["mean_kld"]) for r in rows] == [r["mean_kld"] for r in report.rows()]
