"""Phenomenological fault-response surface of the target device.

Each pulse configuration is mapped to per-class hazard intensities
``r = (transient, persistent, hang)``::

    r_c = sum_k a_k(x, y) * g_V(V) * g_z(z) * w_kc  +  hang-region term
    P(no fault) = exp(-R),   P(class c) = (1 - exp(-R)) * r_c / R,   R = sum(r)

with Gaussian lateral kernels ``a_k``, a logistic voltage gate ``g_V`` and
an exponential stand-off decay ``g_z``.  Probe, model, timing and mode
modifiers scale the intensities.  Because ``R`` grows monotonically with
voltage and shrinks with stand-off, the no-fault probability is monotone
in both.  Characterised parameter points are stored as calibration anchors
and returned verbatim.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy.special import expit

from .fileformat import FormatError, parse_number, parse_sectioned
from .taxonomy import Mode, OutcomeKind, Subregime, Timing, canonical_model, parse_enum

SURFACE_MAGIC = "emfi-surface"
SURFACE_VERSION = 1

BOUNDS = MappingProxyType({
    "x_mm": (113.0, 127.0),
    "y_mm": (148.0, 160.0),
    "z_mm": (0.0, 2.0),
    "voltage_v": (150.0, 500.0),
})

ANCHOR_POS_TOL_MM = 0.05
ANCHOR_VOLT_TOL_V = 1.0

KIND_ORDER = (OutcomeKind.NO_FAULT, OutcomeKind.TRANSIENT_FLIP,
              OutcomeKind.PERSISTENT, OutcomeKind.HANG)


class BoundsError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeGeometry:
    name: str
    diameter_mm: float
    orientation: str  # "CW" or "CCW"
    z_offset_mm: float

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise ValueError("probe diameter must be positive")
        if self.orientation not in ("CW", "CCW"):
            raise ValueError(f"orientation must be CW or CCW, got {self.orientation!r}")

    def stage_z(self, standoff_mm: float) -> float:
        """Stage-encoder z for a corrected probe-tip-to-package stand-off."""
        return standoff_mm - self.z_offset_mm

    def standoff(self, stage_z_mm: float) -> float:
        return stage_z_mm + self.z_offset_mm


PROBES = MappingProxyType({
    "1mm-CCW": ProbeGeometry("1mm-CCW", 1.0, "CCW", -1.05),
    "1mm-CW": ProbeGeometry("1mm-CW", 1.0, "CW", -0.85),
    "4mm-CCW": ProbeGeometry("4mm-CCW", 4.0, "CCW", -1.75),
})


def get_probe(name: str | ProbeGeometry) -> ProbeGeometry:
    if isinstance(name, ProbeGeometry):
        return name
    for key, probe in PROBES.items():
        if key.lower() == str(name).strip().lower():
            return probe
    raise ValueError(f"unknown probe {name!r}; known probes: {', '.join(PROBES)}")


@dataclass(frozen=True)
class PulseConfig:
    x_mm: float
    y_mm: float
    z_mm: float
    voltage_v: float
    probe: ProbeGeometry = PROBES["1mm-CCW"]
    width_ns: float = 160.0
    delay_s: float = 1.0

    def __post_init__(self):
        for name, (lo, hi) in BOUNDS.items():
            value = getattr(self, name)
            if not (lo <= value <= hi) or math.isnan(value):
                raise BoundsError(f"{name}={value} outside [{lo}, {hi}]")
        if self.width_ns <= 0:
            raise BoundsError("width_ns must be positive")
        if self.delay_s == 0:
            raise BoundsError("delay_s must be non-zero (sign selects during/before)")

    @property
    def timing(self) -> Timing:
        return Timing.from_delay(self.delay_s)


@dataclass(frozen=True)
class PhysicalOutcome:
    """Ground-truth device event produced by one pulse."""

    kind: OutcomeKind
    flip_count: int | None = None
    subregime: Subregime | None = None

    def __post_init__(self):
        if self.kind is OutcomeKind.TRANSIENT_FLIP:
            if self.flip_count is None or self.flip_count < 1:
                raise ValueError("transient flip needs flip_count >= 1")
        elif self.flip_count is not None:
            raise ValueError("flip_count only applies to transient flips")
        if (self.kind is OutcomeKind.PERSISTENT) != (self.subregime is not None):
            raise ValueError("subregime is required for, and only for, persistent corruption")

    @classmethod
    def no_fault(cls):
        return cls(OutcomeKind.NO_FAULT)

    @classmethod
    def transient(cls, flip_count: int):
        return cls(OutcomeKind.TRANSIENT_FLIP, flip_count=int(flip_count))

    @classmethod
    def persistent(cls, subregime: Subregime):
        return cls(OutcomeKind.PERSISTENT, subregime=subregime)

    @classmethod
    def hang(cls):
        return cls(OutcomeKind.HANG)


@dataclass(frozen=True)
class HotspotKernel:
    name: str
    center_x_mm: float
    center_y_mm: float
    sigma_mm: float
    voltage_v50: float
    voltage_slope: float
    z_scale_mm: float
    # hazard intensities for (transient, persistent, hang) at the kernel peak
    peak_class_weights: tuple[float, float, float]

    def __post_init__(self):
        if self.sigma_mm <= 0 or self.z_scale_mm <= 0 or self.voltage_slope <= 0:
            raise CalibrationError(f"kernel {self.name}: sigma, z_scale and slope must be > 0")
        if any(w < 0 for w in self.peak_class_weights):
            raise CalibrationError(f"kernel {self.name}: class weights must be >= 0")


@dataclass(frozen=True)
class HangRegion:
    """Soft-edged rectangle between the hotspots where pulses mostly hang the device."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    edge_mm: float
    intensity: float
    voltage_v50: float
    voltage_slope: float
    z_scale_mm: float

    def __post_init__(self):
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise CalibrationError("hang region must have x_min < x_max and y_min < y_max")
        if min(self.edge_mm, self.voltage_slope, self.z_scale_mm) <= 0 or self.intensity < 0:
            raise CalibrationError("hang region edge, slope, z_scale must be > 0 and intensity >= 0")


@dataclass(frozen=True)
class ProbeModifier:
    v50_shift: float = 0.0
    sigma_scale: float = 1.0
    mults: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # transient/persistent intensities are windowed around this voltage when set
    window_v: float | None = None
    window_width_v: float | None = None

    def __post_init__(self):
        if self.sigma_scale <= 0 or any(m < 0 for m in self.mults):
            raise CalibrationError("probe modifier scales must be positive")
        if (self.window_v is None) != (self.window_width_v is None):
            raise CalibrationError("probe voltage window needs both centre and width")
        if self.window_width_v is not None and self.window_width_v <= 0:
            raise CalibrationError("probe voltage window width must be > 0")


@dataclass(frozen=True)
class Modifier:
    """Multiplicative adjustment; '*' in model/timing/mode matches anything."""

    model: str
    timing: str
    mode: str
    mults: tuple[float, float, float]
    to_transient: float = 0.0

    def __post_init__(self):
        if any(m < 0 for m in self.mults):
            raise CalibrationError(f"modifier {self.model}/{self.timing}/{self.mode}: negative multiplier")
        if not 0.0 <= self.to_transient <= 1.0:
            raise CalibrationError("to_transient must lie in [0, 1]")

    def matches(self, model: str, timing: Timing, mode: Mode) -> bool:
        return (self.model in ("*", model) and self.timing in ("*", timing.value)
                and self.mode in ("*", mode.value))


@dataclass(frozen=True)
class Anchor:
    model: str
    timing: Timing
    mode: Mode
    probe: str
    x_mm: float
    y_mm: float
    z_mm: float
    voltage_v: float
    probabilities: tuple[float, float, float, float]

    def key(self):
        return (self.model, self.timing, self.mode, self.probe,
                round(self.x_mm, 2), round(self.y_mm, 2), round(self.z_mm, 2),
                round(self.voltage_v, 1))

    def matches(self, pulse: PulseConfig, model: str, timing: Timing, mode: Mode) -> bool:
        return (self.model == model and self.timing is timing and self.mode is mode
                and self.probe == pulse.probe.name
                and abs(pulse.x_mm - self.x_mm) <= ANCHOR_POS_TOL_MM + 1e-9
                and abs(pulse.y_mm - self.y_mm) <= ANCHOR_POS_TOL_MM + 1e-9
                and abs(pulse.z_mm - self.z_mm) <= ANCHOR_POS_TOL_MM + 1e-9
                and abs(pulse.voltage_v - self.voltage_v) <= ANCHOR_VOLT_TOL_V + 1e-9)

    def pulse(self, **overrides) -> PulseConfig:
        fields = dict(x_mm=self.x_mm, y_mm=self.y_mm, z_mm=self.z_mm,
                      voltage_v=self.voltage_v, probe=PROBES[self.probe],
                      delay_s=1.0 if self.timing is Timing.DURING else -1.0)
        fields.update(overrides)
        return PulseConfig(**fields)


# Anchors every calibration must carry: the six right-hotspot spot tests,
# the CW-probe repeatability point and the matched sync/async pair.
_RIGHT = (123.4, 155.1, 0.25)
REQUIRED_ANCHORS = tuple(
    [(m, t, Mode.SYNC, "1mm-CCW", *_RIGHT, 348.0)
     for t in (Timing.DURING, Timing.BEFORE) for m in ("resnet18", "resnet50", "vgg11")]
    + [("resnet50", Timing.DURING, Mode.SYNC, "1mm-CW", 122.0, 156.0, 0.15, 300.0),
       ("resnet50", Timing.DURING, Mode.SYNC, "1mm-CCW", *_RIGHT, 350.0),
       ("resnet50", Timing.DURING, Mode.ASYNC, "1mm-CCW", *_RIGHT, 350.0)]
)


@dataclass(frozen=True)
class FaultSurface:
    kernels: tuple[HotspotKernel, ...]
    hang_region: HangRegion | None
    probe_modifiers: Mapping[str, ProbeModifier]
    modifiers: tuple[Modifier, ...]
    anchors: tuple[Anchor, ...]
    p_saturated: float = 12 / 22
    before_sigma_scale: float = 0.4
    transfer_scale: float = 0.2
    transient_min_flips: int = 6
    transient_extra_mean: float = 24.0
    profiles: Mapping = field(default_factory=dict)
    source_sha256: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_saturated <= 1.0:
            raise CalibrationError("p_saturated must lie in [0, 1]")
        if self.before_sigma_scale <= 0 or self.transfer_scale <= 0:
            raise CalibrationError("before_sigma_scale and transfer_scale must be > 0")
        if self.transient_min_flips < 1 or self.transient_extra_mean < 0:
            raise CalibrationError("transient flip parameters out of range")
        for a in self.anchors:
            p = np.asarray(a.probabilities)
            if np.any(p < 0):
                raise CalibrationError(f"anchor {a.key()}: negative probability")
            if abs(p.sum() - 1.0) > 1e-9:
                raise CalibrationError(f"anchor {a.key()}: probabilities sum to {p.sum()!r}, not 1")

    # -- queries ---------------------------------------------------------

    def find_anchor(self, pulse: PulseConfig, model: str, timing: Timing, mode: Mode) -> Anchor | None:
        model = canonical_model(model)
        hits = [a for a in self.anchors if a.matches(pulse, model, timing, mode)]
        if not hits:
            return None
        return min(hits, key=lambda a: (abs(pulse.voltage_v - a.voltage_v),
                                        abs(pulse.x_mm - a.x_mm) + abs(pulse.y_mm - a.y_mm)
                                        + abs(pulse.z_mm - a.z_mm)))

    def intensities(self, pulse: PulseConfig, model: str, timing: Timing, mode: Mode):
        """Per-class hazard intensities and the no-fault->transient transfer share."""
        model = canonical_model(model)
        pm = self.probe_modifiers.get(pulse.probe.name, ProbeModifier())
        shrink = self.before_sigma_scale if timing is Timing.BEFORE else 1.0
        x, y, z, v = pulse.x_mm, pulse.y_mm, pulse.z_mm, pulse.voltage_v

        r = np.zeros(3)
        for k in self.kernels:
            sigma = k.sigma_mm * pm.sigma_scale * shrink
            d2 = (x - k.center_x_mm) ** 2 + (y - k.center_y_mm) ** 2
            lateral = math.exp(-d2 / (2.0 * sigma * sigma))
            gate = expit((v - k.voltage_v50 - pm.v50_shift) / k.voltage_slope)
            decay = math.exp(-z / k.z_scale_mm)
            r += lateral * gate * decay * np.asarray(k.peak_class_weights)

        h = self.hang_region
        if h is not None:
            edge = h.edge_mm * pm.sigma_scale
            box = (expit((x - h.x_min) / edge) * expit((h.x_max - x) / edge)
                   * expit((y - h.y_min) / edge) * expit((h.y_max - y) / edge))
            gate = expit((v - h.voltage_v50 - pm.v50_shift) / h.voltage_slope)
            r[2] += box * h.intensity * gate * math.exp(-z / h.z_scale_mm)

        r *= np.asarray(pm.mults)
        if pm.window_v is not None:
            # outside the window corruption turns into hangs; total hazard is kept
            w = math.exp(-0.5 * ((v - pm.window_v) / pm.window_width_v) ** 2)
            r[2] += r[:2].sum() * (1.0 - w)
            r[:2] *= w

        keep = 1.0
        for mod in self.modifiers:
            if mod.matches(model, timing, mode):
                r *= np.asarray(mod.mults)
                keep *= 1.0 - mod.to_transient
        return r, 1.0 - keep

    def class_probabilities(self, pulse: PulseConfig, model: str,
                            timing: Timing | None = None, mode: Mode = Mode.SYNC) -> np.ndarray:
        """Probability vector over (NoFault, TransientFlip, Persistent, Hang)."""
        if not isinstance(pulse, PulseConfig):
            raise TypeError("pulse must be a PulseConfig")
        timing = pulse.timing if timing is None else parse_enum(Timing, timing)
        mode = parse_enum(Mode, mode)
        anchor = self.find_anchor(pulse, model, timing, mode)
        if anchor is not None:
            return np.array(anchor.probabilities, dtype=float)

        r, transfer = self.intensities(pulse, model, timing, mode)
        total = float(r.sum())
        if total <= 0.0:
            return np.array([1.0, 0.0, 0.0, 0.0])
        p_none = math.exp(-total)
        p = np.empty(4)
        p[1:] = (1.0 - p_none) * r / total
        if transfer > 0.0:
            # quadratic onset keeps weak far-field pulses from moving any mass
            moved = p_none * transfer * (1.0 - math.exp(-(total / self.transfer_scale) ** 2))
            p_none -= moved
            p[1] += moved
        p[0] = p_none
        return p / p.sum()

    def sample_outcome(self, pulse: PulseConfig, model: str, timing: Timing | None,
                       mode: Mode, rng: np.random.Generator) -> PhysicalOutcome:
        p = self.class_probabilities(pulse, model, timing, mode)
        kind = KIND_ORDER[int(rng.choice(4, p=p))]
        if kind is OutcomeKind.TRANSIENT_FLIP:
            extra = int(rng.geometric(1.0 / (self.transient_extra_mean + 1.0))) - 1
            return PhysicalOutcome.transient(self.transient_min_flips + extra)
        if kind is OutcomeKind.PERSISTENT:
            saturated = rng.random() < self.p_saturated
            return PhysicalOutcome.persistent(
                Subregime.SATURATED if saturated else Subregime.PARTIAL_COLLAPSE)
        if kind is OutcomeKind.HANG:
            return PhysicalOutcome.hang()
        return PhysicalOutcome.no_fault()


# -- calibration file ----------------------------------------------------

_TABLES = {"kernels", "probes", "modifiers", "anchors", "profiles"}


def default_calibration_path() -> Path:
    return Path(str(resources.files("emfisim") / "data" / "default_surface.emfi"))


def _num(row: Mapping, key: str, line=None) -> float:
    try:
        return parse_number(row[key])
    except KeyError:
        raise CalibrationError(f"line {line}: missing column {key!r}") from None
    except FormatError as exc:
        raise CalibrationError(f"line {line}: column {key!r}: {exc}") from None


def _opt(row: Mapping, key: str):
    text = row.get(key, "")
    return None if text in ("", "-") else parse_number(text)


def parse_calibration(text: str, require_anchors: bool = True) -> FaultSurface:
    from .workload import DEFAULT_PROFILES, profile_from_row

    try:
        sections = parse_sectioned(text, SURFACE_MAGIC, SURFACE_VERSION, _TABLES)
    except FormatError as exc:
        raise CalibrationError(str(exc)) from exc

    params = {k: parse_number(v) for k, v in sections.get("surface", {}).items()}
    known = {"p_saturated", "before_sigma_scale", "transfer_scale",
             "transient_min_flips", "transient_extra_mean"}
    unknown = set(params) - known
    if unknown:
        raise CalibrationError(f"unknown [surface] keys: {', '.join(sorted(unknown))}")
    if "transient_min_flips" in params:
        params["transient_min_flips"] = int(params["transient_min_flips"])

    kernels = []
    for row in sections.get("kernels", []):
        ln = row["_line"]
        kernels.append(HotspotKernel(
            name=row["name"],
            center_x_mm=_num(row, "center_x_mm", ln), center_y_mm=_num(row, "center_y_mm", ln),
            sigma_mm=_num(row, "sigma_mm", ln), voltage_v50=_num(row, "voltage_v50", ln),
            voltage_slope=_num(row, "voltage_slope", ln), z_scale_mm=_num(row, "z_scale_mm", ln),
            peak_class_weights=(_num(row, "w_transient", ln), _num(row, "w_persist", ln),
                                _num(row, "w_hang", ln)),
        ))
    if not kernels:
        raise CalibrationError("calibration defines no hotspot kernels")

    hang = None
    if "hang_region" in sections:
        hr = {k: parse_number(v) for k, v in sections["hang_region"].items()}
        try:
            hang = HangRegion(**hr)
        except TypeError as exc:
            raise CalibrationError(f"[hang_region]: {exc}") from None

    probe_mods = {}
    for row in sections.get("probes", []):
        ln = row["_line"]
        name = get_probe(row["probe"]).name
        probe_mods[name] = ProbeModifier(
            v50_shift=_num(row, "v50_shift", ln), sigma_scale=_num(row, "sigma_scale", ln),
            mults=(_num(row, "mult_transient", ln), _num(row, "mult_persist", ln),
                   _num(row, "mult_hang", ln)),
            window_v=_opt(row, "window_v"), window_width_v=_opt(row, "window_width_v"),
        )

    modifiers = []
    for row in sections.get("modifiers", []):
        ln = row["_line"]
        timing = row["timing"].lower()
        mode = row["mode"].lower()
        if timing != "*":
            parse_enum(Timing, timing)
        if mode != "*":
            parse_enum(Mode, mode)
        model = row["model"] if row["model"] == "*" else canonical_model(row["model"])
        modifiers.append(Modifier(model, timing, mode,
                                  (_num(row, "mult_transient", ln), _num(row, "mult_persist", ln),
                                   _num(row, "mult_hang", ln)),
                                  _opt(row, "to_transient") or 0.0))

    anchors = []
    for row in sections.get("anchors", []):
        ln = row["_line"]
        anchors.append(Anchor(
            model=canonical_model(row["model"]), timing=parse_enum(Timing, row["timing"]),
            mode=parse_enum(Mode, row["mode"]), probe=get_probe(row["probe"]).name,
            x_mm=_num(row, "x_mm", ln), y_mm=_num(row, "y_mm", ln), z_mm=_num(row, "z_mm", ln),
            voltage_v=_num(row, "voltage_v", ln),
            probabilities=tuple(_num(row, c, ln) for c in
                                ("p_nofault", "p_transient", "p_persist", "p_hang")),
        ))

    profiles = dict(DEFAULT_PROFILES)
    for row in sections.get("profiles", []):
        prof = profile_from_row(row)
        profiles[prof.name] = prof

    surface = FaultSurface(kernels=tuple(kernels), hang_region=hang,
                           probe_modifiers=MappingProxyType(probe_mods),
                           modifiers=tuple(modifiers), anchors=tuple(anchors),
                           profiles=MappingProxyType(profiles), **params)

    if require_anchors:
        present = {a.key() for a in anchors}
        missing = []
        for m, t, mo, pr, x, y, z, v in REQUIRED_ANCHORS:
            key = (m, t, mo, pr, round(x, 2), round(y, 2), round(z, 2), round(v, 1))
            if key not in present:
                missing.append(f"{m}/{t.value}/{mo.value}/{pr}@({x}, {y}, {z}) {v:g}V")
        if missing:
            raise CalibrationError("missing required anchors: " + "; ".join(missing))
    return surface


def load_calibration(path: str | Path | None = None, require_anchors: bool = True) -> FaultSurface:
    """Load and validate a calibration file (the shipped default when ``path`` is None)."""
    path = default_calibration_path() if path is None else Path(path)
    data = path.read_bytes()
    surface = parse_calibration(data.decode("utf-8"), require_anchors=require_anchors)
    object.__setattr__(surface, "source_sha256", hashlib.sha256(data).hexdigest())
    return surface
