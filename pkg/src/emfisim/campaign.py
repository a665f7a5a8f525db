"""Trial state machine, spot and exploration campaigns, trial-log persistence."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .devices import (LivenessError, PulserError, SimulatedBench, StageError,
                      WatchdogTimeout)
from .fileformat import FormatError, atomic_write, parse_number, parse_sectioned
from .surface import (FaultSurface, PhysicalOutcome, ProbeGeometry, PulseConfig,
                      get_probe, load_calibration)
from .taxonomy import Mode, OutcomeClass, Timing, canonical_model, parse_enum
from .tpe import ObservationHistory, ParamSpace, TPESampler, UniformSampler
from .workload import DATASET_SEED, DeviceState, get_profile, run_workload

TRIAL_LOG_MAGIC = "emfi-trial-log"
TRIAL_LOG_VERSION = 1
TRIAL_COLUMNS = ("trial_id", "timestamp", "model", "timing", "mode", "probe", "x_mm", "y_mm",
                 "z_mm", "voltage_v", "width_ns", "delay_s", "n_images", "top1", "top5",
                 "followup_top1", "device_failed", "recovered", "outcome_class", "elapsed_s", "seed")
CAMPAIGN_MAGIC = "emfi-campaign"
CAMPAIGN_VERSION = 1


class CampaignError(RuntimeError):
    """A campaign could not continue (e.g. golden check kept failing)."""


class TrialError(RuntimeError):
    def __init__(self, message: str, trial_id: int | None = None):
        self.trial_id = trial_id
        if trial_id is not None:
            message = f"trial {trial_id}: {message}"
        super().__init__(message)


class Phase(str, Enum):
    EXPLORE = "explore"
    SPOT = "spot"


@dataclass
class TrialRecord:
    trial_id: int
    timestamp: float
    pulse: PulseConfig
    model: str
    timing: Timing
    mode: Mode
    n_images: int
    top1: float | None
    top5: float | None
    followup_top1: float | None
    device_failed: bool
    recovered_by_power_cycle: bool
    outcome_class: OutcomeClass | None
    elapsed_s: float
    seed: int
    # simulation ground truth; not part of the trial log
    physical: PhysicalOutcome | None = field(default=None, compare=False)
    watchdog_latency_s: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.device_failed:
            if self.top1 is not None:
                raise ValueError("device-failure record cannot carry top1")
            if self.outcome_class not in (None, OutcomeClass.C3):
                raise ValueError("device-failure record must be class C3")
        elif self.top1 is None:
            raise ValueError("completed record needs top1")
        elif self.outcome_class is OutcomeClass.C3:
            raise ValueError("C3 requires device_failed")


@dataclass(frozen=True)
class CampaignConfig:
    phase: Phase
    model: str
    mode: Mode = Mode.SYNC
    probe: ProbeGeometry = get_probe("1mm-CCW")
    n_images: int = 512
    n_trials: int = 256
    watchdog_timeout_s: float = 5.0
    delay_s: float = 1.0
    master_seed: int = 0
    width_ns: float = 160.0
    pulse: PulseConfig | None = None
    space: ParamSpace | None = None
    fixed: Mapping[str, float] = field(default_factory=dict)
    sampler: str = "tpe"
    tpe_gamma: float = 0.25
    tpe_n_startup: int = 20
    tpe_n_candidates: int = 24
    golden_retries: int = 3
    failure_objective: float = 0.0
    models: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "phase", parse_enum(Phase, self.phase))
        object.__setattr__(self, "mode", parse_enum(Mode, self.mode))
        object.__setattr__(self, "model", canonical_model(self.model))
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.n_trials < 0:
            raise ValueError("n_trials must be >= 0")
        if self.watchdog_timeout_s <= 0:
            raise ValueError("watchdog_timeout_s must be > 0")
        if self.delay_s == 0:
            raise ValueError("delay_s must be non-zero")
        if self.golden_retries < 1:
            raise ValueError("golden_retries must be >= 1")
        if self.sampler not in ("tpe", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r} (tpe or uniform)")
        if self.phase is Phase.SPOT and self.pulse is None:
            raise ValueError("spot phase requires a fixed pulse")
        if self.phase is Phase.EXPLORE and self.space is None:
            raise ValueError("explore phase requires parameter bounds")

    @property
    def timing(self) -> Timing:
        return Timing.from_delay(self.delay_s)

    def make_sampler(self):
        if self.sampler == "uniform":
            return UniformSampler()
        return TPESampler(gamma=self.tpe_gamma, n_startup=self.tpe_n_startup,
                          n_candidates=self.tpe_n_candidates)


def trial_seed(master_seed: int, trial_id: int) -> int:
    return int(np.random.SeedSequence([master_seed, trial_id]).generate_state(1, np.uint64)[0])


def baseline_top1(model: str, n_images: int, profiles=None, dataset_seed: int = DATASET_SEED) -> float:
    """Clean-device accuracy on the first ``n_images`` images of the fixed subset."""
    profile = get_profile(model, profiles)
    state = DeviceState()
    state.reload(profile.name)
    return run_workload(state, profile, n_images, np.random.default_rng(0), dataset_seed).top1


def baseline_result(model: str, n_images: int, profiles=None, dataset_seed: int = DATASET_SEED):
    profile = get_profile(model, profiles)
    state = DeviceState()
    state.reload(profile.name)
    return run_workload(state, profile, n_images, np.random.default_rng(0), dataset_seed)


def make_bench(config: CampaignConfig, surface: FaultSurface | None = None) -> SimulatedBench:
    return SimulatedBench(surface or load_calibration(), config.probe)


def run_trial(config: CampaignConfig, pulse: PulseConfig, bench, rng: np.random.Generator,
              trial_id: int = 0, seed: int = 0) -> TrialRecord:
    """One pass through the trial protocol.

    load -> golden check (power-cycle and retry on mismatch) -> position ->
    arm -> timed fire/workload -> result or watchdog -> persistence probe ->
    reload.  The returned record is unclassified unless the device failed.
    """
    if hasattr(bench, "begin_trial"):
        bench.begin_trial(rng)
    device, stage, pulser, clock = bench.device, bench.stage, bench.pulser, bench.clock
    t_start = clock.now()
    timeout = config.watchdog_timeout_s

    for attempt in range(config.golden_retries + 1):
        if attempt == config.golden_retries:
            raise CampaignError(f"trial {trial_id}: golden check failed "
                                f"{config.golden_retries} times after power-cycling")
        device.load_model(config.model)
        if device.golden_check():
            break
        device.power_cycle()

    try:
        stage.move_to(pulse.x_mm, pulse.y_mm, pulse.probe.stage_z(pulse.z_mm))
        pulser.arm(pulse.voltage_v, pulse.width_ns)
        d = pulse.delay_s
        if d > 0:
            device.start_workload(config.n_images, config.mode)
            clock.sleep(d)
            pulser.fire()
        else:
            pulser.fire()
            clock.sleep(-d)
            device.start_workload(config.n_images, config.mode)
    except (StageError, PulserError) as exc:
        raise TrialError(str(exc), trial_id) from exc

    result = followup = None
    failed = recovered = False
    latency = None
    try:
        result = device.wait_result(timeout)
        # persistence probe: a second pass without reloading
        device.start_workload(config.n_images, config.mode)
        followup = device.wait_result(timeout)
    except WatchdogTimeout as exc:
        failed = result is None
        latency = exc.latency_s
        device.power_cycle()
        recovered = True
    except LivenessError as exc:
        raise TrialError(f"device unreachable: {exc}", trial_id) from exc

    device.load_model(config.model)
    return TrialRecord(
        trial_id=trial_id, timestamp=t_start, pulse=pulse, model=config.model,
        timing=pulse.timing, mode=config.mode, n_images=config.n_images,
        top1=None if failed else result.top1, top5=None if failed else result.top5,
        followup_top1=None if followup is None else followup.top1,
        device_failed=failed, recovered_by_power_cycle=recovered,
        outcome_class=OutcomeClass.C3 if failed else None,
        elapsed_s=clock.now() - t_start, seed=seed,
        physical=getattr(bench, "last_outcome", None), watchdog_latency_s=latency)


def _classify_in_place(records: list[TrialRecord], baseline: float, thresholds=None):
    from .analysis import DEFAULT_THRESHOLDS, classify_trial
    for r in records:
        r.outcome_class = classify_trial(r, baseline, thresholds or DEFAULT_THRESHOLDS)


def run_spot(config: CampaignConfig, bench=None, surface: FaultSurface | None = None,
             classify: bool = True) -> list[TrialRecord]:
    if config.phase is not Phase.SPOT:
        raise ValueError("run_spot needs a spot-phase config")
    bench = bench or make_bench(config, surface)
    pulse = replace(config.pulse, probe=config.probe, width_ns=config.width_ns,
                    delay_s=config.delay_s)
    records = []
    for i in range(config.n_trials):
        seed = trial_seed(config.master_seed, i)
        records.append(run_trial(config, pulse, bench, np.random.default_rng(seed), i, seed))
    if classify:
        profiles = getattr(getattr(bench, "surface", None), "profiles", None) or None
        _classify_in_place(records, baseline_top1(config.model, config.n_images, profiles))
    return records


def run_exploration(config: CampaignConfig, sampler=None, bench=None,
                    surface: FaultSurface | None = None,
                    on_trial: Callable[[TrialRecord], None] | None = None) -> list[TrialRecord]:
    """Sequential search; the objective is the absolute top-1 deviation from baseline."""
    from .analysis import DEFAULT_THRESHOLDS, classify_trial

    if config.phase is not Phase.EXPLORE:
        raise ValueError("run_exploration needs an explore-phase config")
    bench = bench or make_bench(config, surface)
    sampler = sampler or config.make_sampler()
    profiles = getattr(getattr(bench, "surface", None), "profiles", None) or None
    baseline = baseline_top1(config.model, config.n_images, profiles)
    space = config.space
    history = ObservationHistory()
    sampler_rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, 2 ** 32]))
    records = []
    for i in range(config.n_trials):
        params = sampler.suggest(space, history, sampler_rng)
        values = {**config.fixed, **params}
        pulse = PulseConfig(values["x_mm"], values["y_mm"], values["z_mm"], values["voltage_v"],
                            config.probe, config.width_ns, config.delay_s)
        seed = trial_seed(config.master_seed, i)
        rec = run_trial(config, pulse, bench, np.random.default_rng(seed), i, seed)
        rec.outcome_class = classify_trial(rec, baseline, DEFAULT_THRESHOLDS)
        objective = config.failure_objective if rec.device_failed else abs(rec.top1 - baseline)
        history.append(params, objective, failed=rec.device_failed)
        records.append(rec)
        if on_trial is not None:
            on_trial(rec)
    return records


# -- trial log -------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def record_row(r: TrialRecord) -> list[str]:
    p = r.pulse
    values = (r.trial_id, r.timestamp, r.model, r.timing, r.mode, p.probe.name, p.x_mm, p.y_mm,
              p.z_mm, p.voltage_v, p.width_ns, p.delay_s, r.n_images, r.top1, r.top5,
              r.followup_top1, r.device_failed, r.recovered_by_power_cycle, r.outcome_class,
              r.elapsed_s, r.seed)
    return [_fmt(v) for v in values]


def format_trial_log(records: Iterable[TrialRecord], manifest_id: str = "none") -> str:
    buf = io.StringIO()
    buf.write(f"# {TRIAL_LOG_MAGIC} v{TRIAL_LOG_VERSION} manifest={manifest_id}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRIAL_COLUMNS)
    for r in records:
        writer.writerow(record_row(r))
    return buf.getvalue()


def write_trial_log(path, records: Iterable[TrialRecord], manifest_id: str = "none") -> Path:
    return atomic_write(path, format_trial_log(records, manifest_id))


def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


def _bool(text: str) -> bool:
    if text in ("1", "true", "True"):
        return True
    if text in ("0", "false", "False"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_trial_log(text: str) -> tuple[list[TrialRecord], str | None]:
    """Return (records, manifest id).  Errors carry the 1-based file line."""
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty trial log", 1)
    head = lines[0].lstrip("#").split()
    if len(head) < 2 or head[0] != TRIAL_LOG_MAGIC:
        raise FormatError(f"missing '# {TRIAL_LOG_MAGIC} v{TRIAL_LOG_VERSION}' header", 1)
    if head[1] != f"v{TRIAL_LOG_VERSION}":
        from .fileformat import SchemaVersionError
        raise SchemaVersionError(f"unsupported trial-log version {head[1]!r}", 1)
    manifest = next((h.split("=", 1)[1] for h in head[2:] if h.startswith("manifest=")), None)
    if len(lines) < 2 or [c.strip() for c in next(csv.reader([lines[1]]))] != list(TRIAL_COLUMNS):
        raise FormatError("unexpected column header", 2)
    records = []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != len(TRIAL_COLUMNS):
            raise FormatError(f"expected {len(TRIAL_COLUMNS)} fields, got {len(row)}", lineno)
        f = dict(zip(TRIAL_COLUMNS, row))
        try:
            pulse = PulseConfig(float(f["x_mm"]), float(f["y_mm"]), float(f["z_mm"]),
                                float(f["voltage_v"]), get_probe(f["probe"]),
                                float(f["width_ns"]), float(f["delay_s"]))
            records.append(TrialRecord(
                trial_id=int(f["trial_id"]), timestamp=float(f["timestamp"]),
                pulse=pulse, model=canonical_model(f["model"]),
                timing=parse_enum(Timing, f["timing"]), mode=parse_enum(Mode, f["mode"]),
                n_images=int(f["n_images"]), top1=_opt_float(f["top1"]),
                top5=_opt_float(f["top5"]), followup_top1=_opt_float(f["followup_top1"]),
                device_failed=_bool(f["device_failed"]),
                recovered_by_power_cycle=_bool(f["recovered"]),
                outcome_class=(None if f["outcome_class"] == ""
                               else parse_enum(OutcomeClass, f["outcome_class"])),
                elapsed_s=float(f["elapsed_s"]), seed=int(f["seed"])))
        except (ValueError, KeyError) as exc:
            raise FormatError(str(exc), lineno) from exc
    return records, manifest


def read_trial_log(path) -> list[TrialRecord]:
    return parse_trial_log(Path(path).read_text())[0]


# -- campaign config file --------------------------------------------------

def parse_campaign_config(text: str, overrides: Mapping[str, object] | None = None) -> CampaignConfig:
    """Parse an ``emfi-campaign v1`` file.

    Sections: ``[campaign]`` (phase, model, mode, probe, n_images, n_trials,
    delay_s, watchdog_timeout_s, seed, width_ns, sampler, models), ``[pulse]``
    (spot point), ``[bounds]`` (``name = lo, hi``), ``[fixed]`` and ``[tpe]``.
    """
    sec = parse_sectioned(text, CAMPAIGN_MAGIC, CAMPAIGN_VERSION, tables=set())
    unknown = set(sec) - {"campaign", "pulse", "bounds", "fixed", "tpe"}
    if unknown:
        raise FormatError(f"unknown section(s): {', '.join(sorted(unknown))}")
    c = dict(sec.get("campaign", {}))
    for k, v in (overrides or {}).items():
        if v is not None:
            c[k] = str(v)
    known = {"phase", "model", "mode", "probe", "n_images", "n_trials", "delay_s",
             "watchdog_timeout_s", "seed", "width_ns", "sampler", "models", "failure_objective",
             "golden_retries"}
    bad = set(c) - known
    if bad:
        raise FormatError(f"unknown [campaign] key(s): {', '.join(sorted(bad))}")
    models = tuple(canonical_model(m) for m in c.get("models", "").split(",") if m.strip())
    model = c.get("model") or (models[0] if models else None)
    if model is None:
        raise FormatError("[campaign] needs 'model' or 'models'")

    pulse_sec = sec.get("pulse")
    probe = get_probe(c.get("probe", "1mm-CCW"))
    delay = parse_number(c.get("delay_s", "1"))
    width = parse_number(c.get("width_ns", "160"))
    pulse = None
    if pulse_sec:
        pulse = PulseConfig(parse_number(pulse_sec["x_mm"]), parse_number(pulse_sec["y_mm"]),
                            parse_number(pulse_sec["z_mm"]), parse_number(pulse_sec["voltage_v"]),
                            probe, width, delay)
    fixed = {k: parse_number(v) for k, v in sec.get("fixed", {}).items()}
    space = None
    if "bounds" in sec or c.get("phase", "spot") == "explore":
        dims = []
        from .tpe import DEFAULT_DIMS
        given = sec.get("bounds", {})
        for name, lo, hi in DEFAULT_DIMS:
            if name in fixed:
                continue
            if name in given:
                parts = given[name].split(",")
                if len(parts) != 2:
                    raise FormatError(f"[bounds] {name}: expected 'lo, hi'")
                lo, hi = parse_number(parts[0]), parse_number(parts[1])
            dims.append((name, lo, hi))
        space = ParamSpace(tuple(dims))
    tpe = {k.removeprefix("tpe."): v for k, v in sec.get("tpe", {}).items()}
    for k, v in c.items():
        if k.startswith("tpe."):
            tpe[k[4:]] = v
    bad = set(tpe) - {"gamma", "n_startup", "n_candidates"}
    if bad:
        raise FormatError(f"unknown tpe key(s): {', '.join(sorted(bad))}")
    return CampaignConfig(
        phase=c.get("phase", "spot"), model=model, mode=c.get("mode", "sync"), probe=probe,
        n_images=int(c.get("n_images", 512)), n_trials=int(c.get("n_trials", 256)),
        watchdog_timeout_s=parse_number(c.get("watchdog_timeout_s", "5")),
        delay_s=delay, master_seed=int(c.get("seed", 0)), width_ns=width, pulse=pulse,
        space=space, fixed=fixed, sampler=c.get("sampler", "tpe"),
        tpe_gamma=float(tpe.get("gamma", 0.25)), tpe_n_startup=int(tpe.get("n_startup", 20)),
        tpe_n_candidates=int(tpe.get("n_candidates", 24)),
        golden_retries=int(c.get("golden_retries", 3)),
        failure_objective=parse_number(c.get("failure_objective", "0")),
        models=models or (canonical_model(model),))


def load_campaign_config(path, overrides: Mapping[str, object] | None = None) -> CampaignConfig:
    return parse_campaign_config(Path(path).read_text(), overrides)


def config_snapshot(config: CampaignConfig) -> dict:
    """JSON-friendly view of a config, for run manifests."""
    snap = {
        "phase": config.phase.value, "model": config.model, "models": list(config.models),
        "mode": config.mode.value, "probe": config.probe.name, "n_images": config.n_images,
        "n_trials": config.n_trials, "watchdog_timeout_s": config.watchdog_timeout_s,
        "delay_s": config.delay_s, "master_seed": config.master_seed,
        "width_ns": config.width_ns, "sampler": config.sampler,
        "tpe": {"gamma": config.tpe_gamma, "n_startup": config.tpe_n_startup,
                "n_candidates": config.tpe_n_candidates},
        "fixed": dict(sorted(config.fixed.items())),
        "golden_retries": config.golden_retries, "failure_objective": config.failure_objective,
    }
    if config.pulse is not None:
        p = config.pulse
        snap["pulse"] = {"x_mm": p.x_mm, "y_mm": p.y_mm, "z_mm": p.z_mm, "voltage_v": p.voltage_v}
    if config.space is not None:
        snap["bounds"] = {n: [lo, hi] for n, lo, hi in config.space.dims}
    return snap
