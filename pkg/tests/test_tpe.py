import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emfisim.tpe import (ObservationHistory, ParamSpace, TPESampler, UniformSampler,
                         uniform_suggest)

SPACE = ParamSpace()
TARGET = {"x_mm": 120.0, "y_mm": 154.0, "z_mm": 0.3, "voltage_v": 400.0}
SCALE = {"x_mm": 1.5, "y_mm": 1.5, "z_mm": 0.3, "voltage_v": 40.0}


def gaussian_objective(p):
    return math.exp(-0.5 * sum(((p[k] - TARGET[k]) / SCALE[k]) ** 2 for k in TARGET))


def test_startup_is_uniform():
    tpe, hist = TPESampler(n_startup=5), ObservationHistory()
    for i in range(4):
        hist.append(uniform_suggest(SPACE, np.random.default_rng(i)), float(i))
    a = tpe.suggest(SPACE, hist, np.random.default_rng(9))
    b = UniformSampler().suggest(SPACE, hist, np.random.default_rng(9))
    assert a == b


def test_empty_and_degenerate_history_fall_back():
    tpe = TPESampler(n_startup=0)
    ref = uniform_suggest(SPACE, np.random.default_rng(1))
    assert tpe.suggest(SPACE, ObservationHistory(), np.random.default_rng(1)) == ref
    flat = ObservationHistory()
    for i in range(30):
        flat.append(uniform_suggest(SPACE, np.random.default_rng(100 + i)), 0.0)
    assert tpe.suggest(SPACE, flat, np.random.default_rng(1)) == ref


def test_history_rejects_non_finite():
    with pytest.raises(ValueError):
        ObservationHistory().append(TARGET, float("nan"))


def test_history_snapshot_is_immutable():
    h = ObservationHistory()
    h.append(TARGET, 1.0)
    snap = h.snapshot()
    h.append(TARGET, 2.0)
    assert len(snap) == 1 and len(h) == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(21, 60))
def test_suggestions_stay_in_bounds(seed, n):
    rng = np.random.default_rng(seed)
    hist = ObservationHistory()
    for _ in range(n):
        p = uniform_suggest(SPACE, rng)
        hist.append(p, float(rng.random() < 0.3) * rng.random())
    for _ in range(3):
        p = TPESampler().suggest(SPACE, hist, rng)
        assert SPACE.contains(p)
        hist.append(p, 0.0)


def test_seed_determinism():
    hist = ObservationHistory()
    rng = np.random.default_rng(5)
    for _ in range(40):
        p = uniform_suggest(SPACE, rng)
        hist.append(p, gaussian_objective(p))
    a = TPESampler().suggest(SPACE, hist, np.random.default_rng(77))
    b = TPESampler().suggest(SPACE, hist, np.random.default_rng(77))
    assert a == b


def test_uniform_marginal_means():
    rng = np.random.default_rng(2024)
    draws = np.array([[p[n] for n in SPACE.names]
                      for p in (uniform_suggest(SPACE, rng) for _ in range(10_000))])
    mid = (SPACE.lows + SPACE.highs) / 2
    width = SPACE.highs - SPACE.lows
    assert np.all(np.abs(draws.mean(axis=0) - mid) <= 0.01 * width)


@pytest.mark.parametrize("dims", [(("x_mm", 1.0, 1.0),), (("x_mm", 2.0, 1.0),),
                                  (("x_mm", 0.0, float("inf")),), ()])
def test_invalid_space(dims):
    with pytest.raises(ValueError):
        ParamSpace(dims)


def test_invalid_sampler_settings():
    with pytest.raises(ValueError):
        TPESampler(gamma=1.5)
    with pytest.raises(ValueError):
        TPESampler(n_candidates=0)


def test_converges_on_synthetic_gaussian():
    rng = np.random.default_rng(0)
    tpe, hist = TPESampler(), ObservationHistory()
    for _ in range(200):
        p = tpe.suggest(SPACE, hist, rng)
        hist.append(p, gaussian_objective(p))
    late = []
    for _ in range(100):
        p = tpe.suggest(SPACE, hist, rng)
        hist.append(p, gaussian_objective(p))
        late.append([p[n] for n in SPACE.names])
    mean = np.mean(late, axis=0)
    assert abs(mean[0] - 120.0) <= 1.5 and abs(mean[1] - 154.0) <= 1.5
    assert abs(mean[3] - 400.0) <= 30.0
