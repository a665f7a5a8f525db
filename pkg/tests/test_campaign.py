import math

import numpy as np
import pytest

from emfisim.analysis import classify_trial
from emfisim.campaign import (CampaignConfig, CampaignError, TrialError, TrialRecord, baseline_top1,
                              format_trial_log, parse_campaign_config, parse_trial_log,
                              run_exploration, run_spot, run_trial, trial_seed)
from emfisim.devices import (DeviceInterface, PulserInterface, SimulatedBench, StageInterface)
from emfisim.fileformat import FormatError, SchemaVersionError
from emfisim.surface import PhysicalOutcome, PulseConfig, get_probe
from emfisim.taxonomy import Mode, OutcomeClass, OutcomeKind, Subregime, Timing
from emfisim.tpe import ParamSpace, UniformSampler
from emfisim.workload import Persistent, golden_check

ANCHOR = PulseConfig(123.4, 155.1, 0.25, 348.0)


class ForcedSurface:
    """Stand-in surface that always yields one scripted outcome."""

    def __init__(self, base, outcome):
        self.base, self.outcome = base, outcome
        self.profiles = base.profiles

    def sample_outcome(self, pulse, model, timing, mode, rng):
        return self.outcome


def spot_config(**kw):
    args = dict(phase="spot", model="resnet50", pulse=ANCHOR, n_trials=16, master_seed=3)
    args.update(kw)
    return CampaignConfig(**args)


def forced_bench(surface, outcome):
    return SimulatedBench(ForcedSurface(surface, outcome), get_probe("1mm-CCW"))


def test_sim_components_satisfy_protocols(surface):
    bench = SimulatedBench(surface, get_probe("1mm-CCW"))
    assert isinstance(bench.device, DeviceInterface)
    assert isinstance(bench.stage, StageInterface)
    assert isinstance(bench.pulser, PulserInterface)


def test_hang_trial(surface):
    cfg = spot_config()
    bench = forced_bench(surface, PhysicalOutcome.hang())
    rec = run_trial(cfg, ANCHOR, bench, np.random.default_rng(0))
    assert rec.device_failed and rec.top1 is None and rec.recovered_by_power_cycle
    assert rec.outcome_class is OutcomeClass.C3
    assert 0 < rec.watchdog_latency_s <= cfg.watchdog_timeout_s
    assert not bench.device.state.hung and golden_check(bench.device.state, surface.profiles["resnet50"])


def test_nofault_trial(surface):
    cfg = spot_config()
    rec = run_trial(cfg, ANCHOR, forced_bench(surface, PhysicalOutcome.no_fault()),
                    np.random.default_rng(0))
    sigma = math.sqrt(0.7813 * 0.2187 / 512)
    assert abs(rec.top1 - 0.7813) <= 3 * sigma
    assert rec.followup_top1 == rec.top1
    assert classify_trial(rec, baseline_top1("resnet50", 512)) is OutcomeClass.C0


def test_persistent_trial_then_isolation(surface):
    cfg = spot_config()
    bench = forced_bench(surface, PhysicalOutcome.persistent(Subregime.SATURATED))
    rec = run_trial(cfg, ANCHOR, bench, np.random.default_rng(0))
    assert rec.followup_top1 == rec.top1 and 0.02 <= rec.top1 <= 0.03
    assert classify_trial(rec, baseline_top1("resnet50", 512)) is OutcomeClass.C2
    # reload after the trial restores the golden output for the next trial
    assert golden_check(bench.device.state, surface.profiles["resnet50"])
    bench.surface = ForcedSurface(surface, PhysicalOutcome.no_fault())
    nxt = run_trial(cfg, ANCHOR, bench, np.random.default_rng(1))
    assert nxt.top1 == baseline_top1("resnet50", 512)


def test_transient_trial_is_minor(surface):
    bench = forced_bench(surface, PhysicalOutcome.transient(8))
    rec = run_trial(spot_config(), ANCHOR, bench, np.random.default_rng(0))
    assert rec.top1 == pytest.approx(baseline_top1("resnet50", 512) - 8 / 512)
    assert rec.followup_top1 == baseline_top1("resnet50", 512)


def test_before_timing_fires_before_workload(surface):
    bench = SimulatedBench(surface, get_probe("1mm-CCW"))
    pulse = PulseConfig(123.4, 155.1, 0.25, 348.0, delay_s=-1.0)
    run_trial(spot_config(delay_s=-1.0, pulse=pulse), pulse, bench, np.random.default_rng(0))
    assert bench.last_timing is Timing.BEFORE


def test_golden_failure_exhausts_retries(surface):
    bench = SimulatedBench(surface, get_probe("1mm-CCW"))
    bench.device.golden_check = lambda: False
    with pytest.raises(CampaignError, match="golden"):
        run_trial(spot_config(), ANCHOR, bench, np.random.default_rng(0))


def test_stage_fault_is_trial_error(surface):
    bench = SimulatedBench(surface, get_probe("1mm-CCW"))

    def broken(*a):
        from emfisim.devices import StageError
        raise StageError("limit switch")
    bench.stage.move_to = broken
    with pytest.raises(TrialError, match="trial 5"):
        run_trial(spot_config(), ANCHOR, bench, np.random.default_rng(0), trial_id=5)


def test_spot_determinism_and_invariants(surface):
    cfg = spot_config(n_trials=64)
    a, b = run_spot(cfg, surface=surface), run_spot(cfg, surface=surface)
    assert a == b
    assert format_trial_log(a) == format_trial_log(b)
    assert sum(r.top1 is None for r in a) == sum(r.outcome_class is OutcomeClass.C3 for r in a)
    for r in a:
        assert (r.top1 is None) == r.device_failed
        if r.watchdog_latency_s is not None:
            assert r.watchdog_latency_s <= cfg.watchdog_timeout_s
    assert run_spot(spot_config(n_trials=0), surface=surface) == []


def test_distinct_trial_seeds():
    seeds = {trial_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert trial_seed(7, 3) != trial_seed(8, 3)


def test_async_transients_and_jitter(surface):
    cfg = spot_config(mode="async", n_images=128, n_trials=64,
                      pulse=PulseConfig(123.0, 155.0, 0.3, 350.0))
    recs = run_spot(cfg, surface=surface)
    kinds = [r.physical.kind for r in recs]
    assert OutcomeKind.NO_FAULT not in kinds or kinds.count(OutcomeKind.NO_FAULT) < 10


def test_record_invariants():
    kw = dict(trial_id=0, timestamp=0.0, pulse=ANCHOR, model="resnet50", timing=Timing.DURING,
              mode=Mode.SYNC, n_images=8, top5=None, followup_top1=None,
              recovered_by_power_cycle=True, elapsed_s=1.0, seed=0)
    with pytest.raises(ValueError):
        TrialRecord(top1=0.5, device_failed=True, outcome_class=None, **kw)
    with pytest.raises(ValueError):
        TrialRecord(top1=None, device_failed=False, outcome_class=None, **kw)
    with pytest.raises(ValueError):
        TrialRecord(top1=0.5, device_failed=False, outcome_class=OutcomeClass.C3, **kw)


def test_exploration_budget_one_is_uniform(surface):
    cfg = CampaignConfig(phase="explore", model="resnet50", space=ParamSpace(), n_trials=1,
                         master_seed=11)
    tpe = run_exploration(cfg, surface=surface)
    uni = run_exploration(cfg, sampler=UniformSampler(), surface=surface)
    assert len(tpe) == 1 and tpe[0].pulse == uni[0].pulse


def test_exploration_fixed_voltage(surface):
    space = ParamSpace((("x_mm", 113, 127), ("y_mm", 148, 160), ("z_mm", 0, 2)))
    cfg = CampaignConfig(phase="explore", model="resnet50", space=space, n_trials=30,
                         fixed={"voltage_v": 348.0}, master_seed=1)
    recs = run_exploration(cfg, surface=surface)
    assert all(r.pulse.voltage_v == 348.0 for r in recs)
    assert all(r.outcome_class is not None for r in recs)


def test_config_validation():
    with pytest.raises(ValueError, match="fixed pulse"):
        CampaignConfig(phase="spot", model="resnet50")
    with pytest.raises(ValueError, match="bounds"):
        CampaignConfig(phase="explore", model="resnet50")
    with pytest.raises(ValueError):
        spot_config(watchdog_timeout_s=0)


def test_trial_log_round_trip(surface):
    recs = run_spot(spot_config(n_trials=40), surface=surface)
    text = format_trial_log(recs, "abc123")
    back, manifest = parse_trial_log(text)
    assert manifest == "abc123"
    assert back == recs
    assert format_trial_log(back, "abc123") == text
    header = text.splitlines()[1]
    assert header == ("trial_id,timestamp,model,timing,mode,probe,x_mm,y_mm,z_mm,voltage_v,"
                      "width_ns,delay_s,n_images,top1,top5,followup_top1,device_failed,"
                      "recovered,outcome_class,elapsed_s,seed")


def test_trial_log_errors(surface):
    text = format_trial_log(run_spot(spot_config(n_trials=3), surface=surface))
    lines = text.splitlines()
    bad = "\n".join(lines[:3] + [lines[3].replace("resnet50", "resnet50,extra")] + lines[4:])
    with pytest.raises(FormatError) as err:
        parse_trial_log(bad)
    assert err.value.line == 4
    bad = "\n".join(lines[:2] + [lines[2].replace(",during,", ",sideways,")])
    with pytest.raises(FormatError, match="line 3"):
        parse_trial_log(bad)
    with pytest.raises(SchemaVersionError):
        parse_trial_log(text.replace("v1", "v9", 1))


def test_campaign_config_file():
    text = """emfi-campaign v1
[campaign]
phase = explore
model = VGG-11
n_trials = 12
delay_s = -1
seed = 4
[bounds]
x_mm = 115, 125
[fixed]
voltage_v = 348
[tpe]
gamma = 0.3
n_startup = 5
"""
    cfg = parse_campaign_config(text)
    assert cfg.model == "vgg11" and cfg.timing is Timing.BEFORE and cfg.master_seed == 4
    assert cfg.space.names == ("x_mm", "y_mm", "z_mm")
    assert cfg.space.dims[0] == ("x_mm", 115.0, 125.0)
    assert cfg.tpe_gamma == 0.3 and cfg.tpe_n_startup == 5 and cfg.tpe_n_candidates == 24
    with pytest.raises(FormatError, match="unknown"):
        parse_campaign_config(text.replace("gamma", "tpe.alpha"))
    with pytest.raises(FormatError, match="version"):
        parse_campaign_config(text.replace("v1", "v3", 1))
