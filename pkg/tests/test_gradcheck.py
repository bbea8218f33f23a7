import numpy as np
import pytest

from pafs.gradcheck import (ABS_TOL, STEP, check_composition, check_input_gradient, compare,
                            estimate_noise, fs_instance)


@pytest.mark.parametrize("sigma", [1e-10, 1e-12, 1e-14])
def test_noise_estimate_recovers_injected_noise(sigma):
    rng, noise = np.random.default_rng(1), np.random.default_rng(2)

    def f(x):
        return float(1.6 * np.sin(x).sum() + sigma * noise.standard_normal())

    est = estimate_noise(f, rng.standard_normal(50), rng)
    assert sigma / 3 < est < 3 * sigma


def test_noise_estimate_of_smooth_function_is_rounding_level():
    rng = np.random.default_rng(0)
    assert estimate_noise(lambda x: float(np.exp(x).sum()), rng.standard_normal(10), rng) < 1e-14


def test_noise_estimate_redraws_kinked_directions():
    calls = iter([False, True])
    rng = np.random.default_rng(0)
    estimate_noise(lambda x: float(x.sum()), np.zeros(3), rng, smooth=lambda: next(calls))
    with pytest.raises(RuntimeError):
        estimate_noise(lambda x: 0.0, np.zeros(3), rng, smooth=lambda: False, tries=2)


def test_compare_relative_and_absolute_regimes():
    ok = np.ones(3, dtype=bool)
    a = np.array([1.0, 1e-8, 0.0])
    assert compare("x", a, a * (1 + 5e-5), ok).passed
    assert not compare("x", a, a * (1 + 2e-4), ok).passed
    # below resolution: absolute agreement only
    assert compare("x", a, a + np.array([0, ABS_TOL / 2, 0]), ok).passed
    assert not compare("x", a, a + np.array([0, 10 * ABS_TOL, 0]), ok).passed
    # a kinked coordinate is excluded from both
    mask = np.array([True, True, False])
    assert compare("x", a, np.array([1.0, 1e-8, 5.0]), mask).passed


def test_compare_noise_floor_scales_with_step():
    a, f = np.array([1e-5]), np.array([1e-5 + 2e-9])
    ok = np.ones(1, dtype=bool)
    assert not compare("x", a, f, ok).passed  # rel err 2e-4 with no noise allowance
    # 1e-14 of evaluation noise puts up to 4e-9 of error on a 1e-5 step difference
    assert compare("x", a, f, ok, STEP, noise=1e-14).passed
    assert not compare("x", a, a + 1e-7, ok, STEP, noise=1e-14).passed


def test_fs_input_gradient_passes():
    rep = check_input_gradient("fs", *fs_instance(np.random.default_rng(3)))
    assert rep.passed and rep.checked > 0


@pytest.mark.parametrize("kind", ["fs", "fs+cpl", "fs+apl"])
def test_composition_gradient_passes(kind):
    reps = check_composition(np.random.default_rng(7), kind, anchor_mode="all")
    assert [r.name for r in reps] == [f"compose[{kind}] params", f"compose[{kind}] inputs"]
    for r in reps:
        assert r.passed, r.row()
        assert r.checked > 0.9 * (r.checked + r.skipped)
