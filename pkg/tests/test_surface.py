import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emfisim.surface import (BOUNDS, PROBES, BoundsError, CalibrationError, PhysicalOutcome,
                             PulseConfig, default_calibration_path, get_probe, parse_calibration)
from emfisim.taxonomy import Mode, OutcomeKind, Subregime, Timing

RIGHT = (123.4, 155.1, 0.25)
LEFT = (116.3, 154.9)
MODELS = ("resnet18", "resnet50", "vgg11")

ANCHOR_COUNTS = {
    ("resnet18", Timing.DURING): (146, 1, 61, 48),
    ("resnet50", Timing.DURING): (122, 7, 79, 48),
    ("vgg11", Timing.DURING): (64, 41, 48, 103),
    ("resnet18", Timing.BEFORE): (175, 0, 47, 34),
    ("resnet50", Timing.BEFORE): (138, 0, 68, 50),
    ("vgg11", Timing.BEFORE): (91, 60, 75, 30),
}


def anchor_pulse(timing):
    return PulseConfig(*RIGHT, 348.0, delay_s=1.0 if timing is Timing.DURING else -1.0)


def test_probe_offsets():
    assert PROBES["1mm-CCW"].z_offset_mm == -1.05
    assert PROBES["1mm-CW"].z_offset_mm == -0.85
    assert PROBES["4mm-CCW"].z_offset_mm == -1.75
    p = get_probe("4mm-ccw")
    assert p.standoff(p.stage_z(0.4)) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        get_probe("9mm")


@pytest.mark.parametrize("kw", [dict(x_mm=112.9), dict(y_mm=160.5), dict(z_mm=-0.1),
                                dict(voltage_v=501), dict(voltage_v=float("nan"))])
def test_out_of_bounds_rejected(kw):
    args = dict(x_mm=120, y_mm=154, z_mm=0.5, voltage_v=300) | kw
    with pytest.raises(BoundsError):
        PulseConfig(**args)


def test_delay_sign_selects_timing():
    assert PulseConfig(120, 154, 0.5, 300, delay_s=1).timing is Timing.DURING
    assert PulseConfig(120, 154, 0.5, 300, delay_s=-1).timing is Timing.BEFORE
    with pytest.raises(BoundsError):
        PulseConfig(120, 154, 0.5, 300, delay_s=0)


def test_physical_outcome_invariants():
    with pytest.raises(ValueError):
        PhysicalOutcome(OutcomeKind.TRANSIENT_FLIP, flip_count=0)
    with pytest.raises(ValueError):
        PhysicalOutcome(OutcomeKind.PERSISTENT)
    assert PhysicalOutcome.transient(3).flip_count == 3


@pytest.mark.parametrize("key,counts", ANCHOR_COUNTS.items())
def test_table_iii_anchors_exact(surface, key, counts):
    model, timing = key
    p = surface.class_probabilities(anchor_pulse(timing), model, timing, Mode.SYNC)
    assert tuple(p) == tuple(c / 256 for c in counts)


def test_anchor_tolerance(surface):
    near = PulseConfig(123.44, 155.06, 0.29, 348.9)
    far = PulseConfig(123.5, 155.1, 0.25, 348.0)
    exact = (122 / 256, 7 / 256, 79 / 256, 48 / 256)
    assert tuple(surface.class_probabilities(near, "resnet50", Timing.DURING)) == exact
    assert tuple(surface.class_probabilities(far, "resnet50", Timing.DURING)) != exact


def test_every_anchor_reproduces_bit_exactly(surface):
    for a in surface.anchors:
        p = surface.class_probabilities(a.pulse(), a.model, a.timing, a.mode)
        assert tuple(p) == tuple(a.probabilities)


def test_fig8_and_async_anchors(surface):
    cw = PulseConfig(122.0, 156.0, 0.15, 300, probe=get_probe("1mm-CW"))
    assert tuple(surface.class_probabilities(cw, "resnet50", Timing.DURING)) == (
        52.5 / 64, 0.5 / 64, 10 / 64, 1 / 64)
    pulse = PulseConfig(*RIGHT, 350)
    sync = surface.class_probabilities(pulse, "resnet50", Timing.DURING, Mode.SYNC)
    asyn = surface.class_probabilities(pulse, "resnet50", Timing.DURING, Mode.ASYNC)
    assert sync[3] == 0.25 and asyn[3] == 0.48 and asyn[0] == 0.0


def test_low_voltage_and_far_standoff(surface):
    p = surface.class_probabilities(PulseConfig(*RIGHT[:2], 0.25, 150), "resnet50", Timing.DURING)
    assert p[0] > 0.95
    rng = np.random.default_rng(3)
    for _ in range(200):
        x, y = rng.uniform(113, 127), rng.uniform(148, 160)
        for model in MODELS:
            for t in Timing:
                for probe in (PROBES["1mm-CCW"], PROBES["1mm-CW"]):
                    for mode in Mode:
                        pulse = PulseConfig(x, y, 2.0, rng.uniform(150, 500), probe)
                        assert surface.class_probabilities(pulse, model, t, mode)[0] > 0.99
                # the large coil reaches further but stays mostly quiet
                big = PulseConfig(x, y, 2.0, 500, PROBES["4mm-CCW"])
                assert surface.class_probabilities(big, model, t, Mode.SYNC)[0] > 0.98


pulses = st.builds(
    PulseConfig,
    x_mm=st.floats(*BOUNDS["x_mm"]), y_mm=st.floats(*BOUNDS["y_mm"]),
    z_mm=st.floats(*BOUNDS["z_mm"]), voltage_v=st.floats(*BOUNDS["voltage_v"]),
    probe=st.sampled_from(list(PROBES.values())))


@settings(max_examples=300, deadline=None)
@given(pulse=pulses, model=st.sampled_from(MODELS), timing=st.sampled_from(list(Timing)),
       mode=st.sampled_from(list(Mode)))
def test_probabilities_are_distributions(surface, pulse, model, timing, mode):
    p = surface.class_probabilities(pulse, model, timing, mode)
    assert p.shape == (4,)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


@settings(max_examples=120, deadline=None)
@given(x=st.floats(113, 127), y=st.floats(148, 160), v=st.floats(150, 500), z=st.floats(0, 2),
       probe=st.sampled_from(list(PROBES.values())), model=st.sampled_from(MODELS),
       timing=st.sampled_from(list(Timing)), mode=st.sampled_from(list(Mode)))
def test_nofault_monotone(surface, x, y, v, z, probe, model, timing, mode):
    if math.dist((x, y), RIGHT[:2]) < 0.2:
        return  # anchors override the smooth surface there
    zs = [surface.class_probabilities(PulseConfig(x, y, zz, v, probe), model, timing, mode)[0]
          for zz in np.linspace(0, 2, 21)]
    assert np.all(np.diff(zs) >= -1e-12)
    vs = [surface.class_probabilities(PulseConfig(x, y, z, vv, probe), model, timing, mode)[0]
          for vv in np.linspace(150, 500, 36)]
    assert np.all(np.diff(vs) <= 1e-12)


def test_spatial_separation(surface):
    dominant = {}
    for x in np.arange(113, 127.01, 1.0):
        for y in np.arange(148, 160.01, 1.0):
            p = surface.class_probabilities(PulseConfig(x, y, 0.25, 348), "resnet50", Timing.DURING)
            if p[1:].max() > 0.02:
                dominant[(x, y)] = "TPH"[int(np.argmax(p[1:]))]
    for cx, cy in (LEFT, RIGHT[:2]):
        assert any(c == "P" and math.dist(k, (cx, cy)) <= 2 for k, c in dominant.items())
    band = [c for (x, y), c in dominant.items() if 119 <= x <= 121 and 153 <= y <= 157]
    assert band and all(c == "H" for c in band)


def test_sample_outcome_matches_anchor(surface):
    rng = np.random.default_rng(42)
    pulse = anchor_pulse(Timing.DURING)
    kinds = Counter(surface.sample_outcome(pulse, "resnet50", Timing.DURING, Mode.SYNC, rng).kind
                    for _ in range(256))
    target = np.array((122, 7, 79, 48)) / 256
    for kind, p in zip(OutcomeKind, target):
        sigma = math.sqrt(256 * p * (1 - p))
        assert abs(kinds[kind] - 256 * p) <= 3 * sigma + 1


def test_subregime_split(surface):
    rng = np.random.default_rng(0)
    pulse = PulseConfig(*RIGHT, 348)
    subs = []
    while len(subs) < 10_000:
        out = surface.sample_outcome(pulse, "resnet50", Timing.DURING, Mode.SYNC, rng)
        if out.kind is OutcomeKind.PERSISTENT:
            subs.append(out.subregime)
    frac = subs.count(Subregime.SATURATED) / len(subs)
    assert abs(frac - 12 / 22) <= 0.02


def test_zero_probability_kind_never_drawn(surface):
    rng = np.random.default_rng(1)
    pulse = anchor_pulse(Timing.BEFORE)
    for _ in range(2000):
        out = surface.sample_outcome(pulse, "resnet18", Timing.BEFORE, Mode.SYNC, rng)
        assert out.kind is not OutcomeKind.TRANSIENT_FLIP


def test_sampling_deterministic(surface):
    pulse = PulseConfig(122.0, 155.0, 0.3, 360)
    a = [surface.sample_outcome(pulse, "vgg11", Timing.DURING, Mode.SYNC, np.random.default_rng(9))
         for _ in range(3)]
    assert a[0] == a[1] == a[2]


def _default_text():
    return default_calibration_path().read_text()


def test_missing_anchor_listed():
    text = "\n".join(l for l in _default_text().splitlines() if not l.startswith("vgg11,before,sync"))
    with pytest.raises(CalibrationError, match="vgg11/before/sync"):
        parse_calibration(text)


def test_negative_weight_rejected():
    text = _default_text().replace("right,123.4,155.1,1.5,350,25,0.25,0.2193",
                                   "right,123.4,155.1,1.5,350,25,0.25,-0.2193")
    with pytest.raises(CalibrationError, match="weights"):
        parse_calibration(text)


def test_anchor_sum_validated():
    text = _default_text().replace("146/256,1/256,61/256,48/256", "146/256,2/256,61/256,48/256")
    with pytest.raises(CalibrationError, match="sum"):
        parse_calibration(text)


def test_version_mismatch_rejected():
    with pytest.raises(CalibrationError, match="version"):
        parse_calibration(_default_text().replace("emfi-surface v1", "emfi-surface v2", 1))


def test_source_hash_recorded(surface):
    assert len(surface.source_sha256) == 64
