"""Hardware abstraction boundary and the simulated bench behind it.

The campaign engine only talks to the three protocols below.  Real drivers
(USB-serial pulser, G-code stage, inference server with USB power control)
would implement the same methods; the simulated versions share a virtual
clock so that timing, watchdog latency and elapsed time are deterministic.
"""

from __future__ import annotations

import math
from typing import Protocol, runtime_checkable

import numpy as np

from .surface import FaultSurface, PhysicalOutcome, ProbeGeometry, PulseConfig, BoundsError
from .taxonomy import Mode, OutcomeKind, Timing, parse_enum
from .workload import (DATASET_SEED, DeviceState, LivenessError, Persistent, Transient,
                       WorkloadResult, get_profile, golden_check, run_workload)


class StageError(RuntimeError):
    pass


class PulserError(RuntimeError):
    pass


class WatchdogTimeout(LivenessError):
    """No response within the watchdog timeout."""

    def __init__(self, message: str, latency_s: float):
        super().__init__(message)
        self.latency_s = latency_s


@runtime_checkable
class DeviceInterface(Protocol):
    def load_model(self, model: str) -> None: ...
    def golden_check(self) -> bool: ...
    def start_workload(self, n_images: int, mode: Mode) -> None: ...
    def wait_result(self, timeout_s: float) -> WorkloadResult: ...
    def power_cycle(self) -> None: ...


@runtime_checkable
class StageInterface(Protocol):
    def move_to(self, x_mm: float, y_mm: float, z_mm: float) -> None:
        """Absolute move in encoder coordinates; returns once motion completed."""


@runtime_checkable
class PulserInterface(Protocol):
    def arm(self, voltage_v: float, width_ns: float) -> None: ...
    def fire(self) -> None: ...


class SimClock:
    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot sleep a negative duration")
        self._now += seconds

    def advance_to(self, t: float) -> None:
        self._now = max(self._now, t)


class SimulatedDevice:
    def __init__(self, bench: "SimulatedBench"):
        self._bench = bench
        self.state = DeviceState()
        self.job: tuple[float, int, Mode] | None = None
        self.hang_time: float | None = None
        self.load_time_s = 1.5
        self.power_cycle_s = 3.0

    @property
    def _clock(self):
        return self._bench.clock

    def _profile(self):
        return get_profile(self.state.model_loaded, self._bench.surface.profiles or None)

    def load_model(self, model: str) -> None:
        if self.state.hung:
            raise LivenessError("device not responding; power-cycle first")
        get_profile(model, self._bench.surface.profiles or None)
        self.state.reload(model)
        self.job = None
        self._clock.sleep(self.load_time_s)

    def golden_check(self) -> bool:
        self._clock.sleep(self._bench.latency_s)
        return golden_check(self.state, self._profile(), dataset_seed=self._bench.dataset_seed)

    def start_workload(self, n_images: int, mode: Mode = Mode.SYNC) -> None:
        if n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not self.state.hung:
            self.state.require_ready()
        self.job = (self._clock.now(), int(n_images), parse_enum(Mode, mode))

    def busy_at(self, t: float) -> bool:
        if self.job is None:
            return False
        t0, n, _ = self.job
        return t0 <= t < t0 + n * self._bench.latency_s

    def image_at(self, t: float) -> int:
        t0, n, _ = self.job
        return min(n - 1, int((t - t0) / self._bench.latency_s))

    def wait_result(self, timeout_s: float) -> WorkloadResult:
        if self.job is None:
            raise RuntimeError("no workload started")
        t0, n, _ = self.job
        lat = self._bench.latency_s
        self.job = None
        if self.state.hung:
            hang = self.hang_time if self.hang_time is not None else t0
            if hang <= t0:
                last_response = t0
            else:
                last_response = t0 + math.floor((hang - t0) / lat) * lat
            detect = last_response + timeout_s
            self._clock.advance_to(detect)
            raise WatchdogTimeout(f"no response within {timeout_s} s",
                                  latency_s=detect - max(hang, last_response))
        if lat > timeout_s:
            self._clock.advance_to(t0 + timeout_s)
            raise WatchdogTimeout("inference latency exceeds watchdog timeout", latency_s=timeout_s)
        self._clock.advance_to(t0 + n * lat)
        return run_workload(self.state, self._profile(), n, self._bench.rng,
                            dataset_seed=self._bench.dataset_seed)

    def power_cycle(self) -> None:
        self.state.power_cycle()
        self.job = None
        self.hang_time = None
        self._clock.sleep(self.power_cycle_s)


class SimulatedStage:
    def __init__(self, bench: "SimulatedBench", speed_mm_s: float = 20.0):
        self._bench = bench
        self.position: tuple[float, float, float] | None = None
        self.speed_mm_s = speed_mm_s

    def move_to(self, x_mm: float, y_mm: float, z_mm: float) -> None:
        target = (float(x_mm), float(y_mm), float(z_mm))
        if any(math.isnan(v) for v in target):
            raise StageError("NaN coordinate")
        dist = 0.0 if self.position is None else math.dist(self.position, target)
        self._bench.clock.sleep(dist / self.speed_mm_s)
        self.position = target


class SimulatedPulser:
    def __init__(self, bench: "SimulatedBench"):
        self._bench = bench
        self.armed: tuple[float, float] | None = None

    def arm(self, voltage_v: float, width_ns: float) -> None:
        if voltage_v <= 0 or width_ns <= 0:
            raise PulserError("voltage and width must be positive")
        self.armed = (float(voltage_v), float(width_ns))

    def fire(self) -> None:
        if self.armed is None:
            raise PulserError("fire() before arm()")
        voltage, width = self.armed
        self.armed = None
        self._bench.deliver_pulse(voltage, width)


class SimulatedBench:
    """Stage, pulser and device sharing one virtual clock and fault surface.

    Call :meth:`begin_trial` with the trial's random stream before each
    trial; every stochastic draw of that trial comes from it.
    """

    def __init__(self, surface: FaultSurface, probe: ProbeGeometry,
                 latency_s: float = 0.025, jitter_s: float = 0.005,
                 dataset_seed: int = DATASET_SEED):
        self.surface = surface
        self.probe = probe
        self.latency_s = latency_s
        self.jitter_s = jitter_s
        self.dataset_seed = dataset_seed
        self.clock = SimClock()
        self.device = SimulatedDevice(self)
        self.stage = SimulatedStage(self)
        self.pulser = SimulatedPulser(self)
        self.rng = np.random.default_rng(0)
        self.last_outcome: PhysicalOutcome | None = None
        self.last_timing: Timing | None = None

    def begin_trial(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.last_outcome = None
        self.last_timing = None

    def deliver_pulse(self, voltage_v: float, width_ns: float) -> None:
        if self.stage.position is None:
            raise StageError("stage never positioned")
        dev = self.device
        mode = dev.job[2] if dev.job is not None else Mode.SYNC
        t = self.clock.now()
        if mode is Mode.ASYNC and self.jitter_s > 0:
            t += self.rng.uniform(-self.jitter_s, self.jitter_s)
        timing = Timing.DURING if dev.busy_at(t) else Timing.BEFORE
        x, y, zs = self.stage.position
        try:
            pulse = PulseConfig(x, y, round(self.probe.standoff(zs), 9), voltage_v, self.probe,
                                width_ns=width_ns, delay_s=1.0 if timing is Timing.DURING else -1.0)
        except BoundsError as exc:
            raise PulserError(f"pulse outside characterised envelope: {exc}") from exc
        model = dev.state.model_loaded
        if model is None or dev.state.hung:
            outcome = PhysicalOutcome.no_fault()
        else:
            outcome = self.surface.sample_outcome(pulse, model, timing, mode, self.rng)
        self.last_outcome, self.last_timing = outcome, timing

        if outcome.kind is OutcomeKind.TRANSIENT_FLIP:
            hit = dev.image_at(t) if (mode is Mode.ASYNC and dev.busy_at(t)) else None
            dev.state.corruption = Transient(outcome.flip_count, hit)
        elif outcome.kind is OutcomeKind.PERSISTENT:
            dev.state.corruption = Persistent.draw(outcome.subregime, self.rng)
        elif outcome.kind is OutcomeKind.HANG:
            dev.state.hung = True
            dev.hang_time = t
