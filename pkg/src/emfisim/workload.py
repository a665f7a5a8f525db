"""Classification workload executed on the simulated accelerator.

Per-image ground truth is a pure function of ``(dataset_seed, model,
image_index)``, so a perturbed run and its clean twin can be compared image
by image.  Every 512-image block holds exactly ``round(top1 * 512)``
top-1-correct images; the reference baselines are themselves multiples of
1/512, so a clean 512-image run reproduces them exactly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .taxonomy import Subregime, canonical_model

DATASET_SEED = 21
BLOCK = 512
REFERENCE_BASE = 2 ** 32  # image indices at/after this are reference images


class LivenessError(RuntimeError):
    """The device did not answer: the host watchdog path takes over."""


class DeviceStateError(RuntimeError):
    """Operation not valid in the current device state (e.g. no model loaded)."""


@dataclass(frozen=True)
class ModelProfile:
    name: str
    baseline_top1: float
    baseline_top5: float
    residual_top1_range: tuple[float, float]
    display_name: str = ""
    num_classes: int = 1000
    distinct_argmax_target: float = 350.0
    top_class_share: float = 0.08
    agreement_with_clean: float = 0.23
    nominal_logit_range: tuple[float, float] = (-10.0, 30.0)
    saturation_ceiling: float = 1023.5
    pinned_count_range: tuple[int, int] = (20, 60)

    def __post_init__(self):
        if not 0.0 < self.baseline_top1 <= self.baseline_top5 <= 1.0:
            raise ValueError(f"{self.name}: need 0 < top1 <= top5 <= 1")
        lo, hi = self.residual_top1_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"{self.name}: bad residual range {self.residual_top1_range}")
        if not 0.0 <= self.agreement_with_clean <= 1.0:
            raise ValueError(f"{self.name}: agreement must be a fraction")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def model_id(self) -> int:
        return zlib.crc32(self.name.encode())


DEFAULT_PROFILES = {
    "resnet18": ModelProfile("resnet18", 0.7207, 0.9004, (0.02, 0.05), "ResNet-18"),
    "resnet50": ModelProfile("resnet50", 0.7813, 0.9355, (0.02, 0.03), "ResNet-50"),
    "vgg11": ModelProfile("vgg11", 0.7090, 0.8965, (0.01, 0.04), "VGG-11"),
}


def get_profile(name: str, profiles=None) -> ModelProfile:
    profiles = DEFAULT_PROFILES if profiles is None else profiles
    key = canonical_model(name)
    if key not in profiles:
        raise KeyError(f"unknown model {name!r}; known profiles: {', '.join(sorted(profiles))}")
    return profiles[key]


def profile_from_row(row) -> ModelProfile:
    from .fileformat import parse_number

    name = canonical_model(row["name"])
    base = DEFAULT_PROFILES.get(name)
    kw = {}
    for col, attr in (("top1", "baseline_top1"), ("top5", "baseline_top5"),
                      ("agreement", "agreement_with_clean"), ("top_class_share", "top_class_share"),
                      ("distinct_argmax", "distinct_argmax_target"),
                      ("ceiling", "saturation_ceiling")):
        if row.get(col, "") not in ("", "-"):
            kw[attr] = parse_number(row[col])
    if row.get("residual_lo", "") not in ("", "-"):
        kw["residual_top1_range"] = (parse_number(row["residual_lo"]), parse_number(row["residual_hi"]))
    if base is None:
        missing = {"baseline_top1", "baseline_top5", "residual_top1_range"} - set(kw)
        if missing:
            raise ValueError(f"profile {name}: new profiles need {', '.join(sorted(missing))}")
        return ModelProfile(name=name, display_name=row["name"], **kw)
    from dataclasses import replace
    return replace(base, **kw)


# -- device state ----------------------------------------------------------

@dataclass(frozen=True)
class Clean:
    pass


@dataclass(frozen=True)
class Transient:
    flips: int
    hit_index: int | None = None  # async: first in-flight image when the pulse landed


@dataclass(frozen=True)
class Persistent:
    """Episode-frozen corruption of loaded model state."""

    subregime: Subregime
    episode_seed: int
    residual_u: float  # position of this episode's accuracy inside the residual band

    @classmethod
    def draw(cls, subregime: Subregime, rng: np.random.Generator) -> "Persistent":
        return cls(subregime, int(rng.integers(2 ** 63)), float(rng.random()))


@dataclass
class DeviceState:
    model_loaded: str | None = None
    corruption: Clean | Transient | Persistent = field(default_factory=Clean)
    hung: bool = False

    def reload(self, model: str | None = None):
        if self.hung:
            raise LivenessError("device hung; power-cycle required before reload")
        self.model_loaded = canonical_model(model or self.model_loaded or "")
        if not self.model_loaded:
            raise DeviceStateError("no model to reload")
        self.corruption = Clean()

    def power_cycle(self):
        self.hung = False
        self.model_loaded = None
        self.corruption = Clean()

    def require_ready(self, profile: ModelProfile | None = None):
        if self.hung:
            raise LivenessError("device not responding")
        if self.model_loaded is None:
            raise DeviceStateError("no model loaded")
        if profile is not None and canonical_model(profile.name) != self.model_loaded:
            raise DeviceStateError(f"loaded model {self.model_loaded!r} != profile {profile.name!r}")


@dataclass(frozen=True)
class WorkloadResult:
    n_total: int
    n_correct_top1: int
    n_correct_top5: int
    per_image_top1_flags: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.n_correct_top1 <= self.n_correct_top5 <= self.n_total:
            raise ValueError("need 0 <= correct_top1 <= correct_top5 <= total")

    @property
    def top1(self) -> float:
        return self.n_correct_top1 / self.n_total

    @property
    def top5(self) -> float:
        return self.n_correct_top5 / self.n_total


# -- deterministic dataset ---------------------------------------------------

@lru_cache(maxsize=64)
def _block(name: str, top1: float, top5: float, num_classes: int, dataset_seed: int, b: int):
    rng = np.random.default_rng([dataset_seed, zlib.crc32(name.encode()), b])
    k1 = round(top1 * BLOCK)
    k5 = max(k1, round(top5 * BLOCK))
    order = rng.permutation(BLOCK)
    correct1 = np.zeros(BLOCK, bool)
    correct5 = np.zeros(BLOCK, bool)
    correct1[order[:k1]] = True
    correct5[order[:k5]] = True
    labels = rng.integers(num_classes, size=BLOCK)
    wrong = (labels + rng.integers(1, num_classes, size=BLOCK)) % num_classes
    preds = np.where(correct1, labels, wrong)
    for arr in (correct1, correct5, labels, preds):
        arr.setflags(write=False)
    return correct1, correct5, labels, preds


def dataset(profile: ModelProfile, n_images: int, dataset_seed: int = DATASET_SEED):
    """Arrays (correct_top1, correct_top5, true_label, clean_prediction) for images 0..n-1."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    parts = [_block(profile.name, profile.baseline_top1, profile.baseline_top5,
                    profile.num_classes, dataset_seed, b)
             for b in range(math.ceil(n_images / BLOCK))]
    return tuple(np.concatenate([p[i] for p in parts])[:n_images] for i in range(4))


def clean_prediction(profile: ModelProfile, image_index: int, dataset_seed: int = DATASET_SEED) -> int:
    if image_index >= REFERENCE_BASE:
        # reference images: their stored golden output is the clean prediction
        rng = np.random.default_rng([dataset_seed, profile.model_id, 99, image_index])
        return int(rng.integers(profile.num_classes))
    b, i = divmod(image_index, BLOCK)
    return int(_block(profile.name, profile.baseline_top1, profile.baseline_top5,
                      profile.num_classes, dataset_seed, b)[3][i])


def golden_label(profile: ModelProfile, reference: int = 0, dataset_seed: int = DATASET_SEED) -> int:
    return clean_prediction(profile, REFERENCE_BASE + reference, dataset_seed)


# -- workload ----------------------------------------------------------------

def residual_count(profile: ModelProfile, n_images: int, u: float) -> int:
    """Top-1-correct count for a collapsed episode, inside the residual band when resolvable."""
    lo, hi = profile.residual_top1_range
    first, last = math.ceil(lo * n_images - 1e-9), math.floor(hi * n_images + 1e-9)
    if first > last:
        return min(n_images, round(0.5 * (lo + hi) * n_images))
    return first + min(int(u * (last - first + 1)), last - first)


def run_workload(state: DeviceState, profile: ModelProfile, n_images: int,
                 rng: np.random.Generator, dataset_seed: int = DATASET_SEED) -> WorkloadResult:
    """Classify images 0..n-1 and report top-1/top-5 correctness.

    A pending transient corruption is consumed by this call.
    """
    state.require_ready(profile)
    correct1, correct5, _, _ = dataset(profile, n_images, dataset_seed)
    corruption = state.corruption

    if isinstance(corruption, Persistent):
        k1 = residual_count(profile, n_images, corruption.residual_u)
        k5 = min(n_images, max(k1, round(k1 * profile.baseline_top5 / profile.baseline_top1)))
        order = np.random.default_rng([corruption.episode_seed, 11, n_images]).permutation(n_images)
        flags = np.zeros(n_images, bool)
        flags[order[:k1]] = True
        return WorkloadResult(n_images, k1, k5, flags)

    flags = correct1.copy()
    if isinstance(corruption, Transient):
        correct_idx = np.flatnonzero(flags)
        k = min(corruption.flips, correct_idx.size)
        if corruption.hit_index is None:
            hit = rng.choice(correct_idx, size=k, replace=False)
        else:
            # overlapping requests: the images in flight around the pulse
            start = np.searchsorted(correct_idx, corruption.hit_index % n_images)
            hit = np.roll(correct_idx, -start)[:k]
        flags[hit] = False
        state.corruption = Clean()
    return WorkloadResult(n_images, int(flags.sum()), int(correct5.sum()), flags)


# -- logits --------------------------------------------------------------------

@lru_cache(maxsize=32)
def partial_collapse_model(profile: ModelProfile, n_images: int = BLOCK) -> np.ndarray:
    """Argmax weights (rank order) for collapsed, non-agreeing images.

    One head class carries the modal share; the remaining classes follow a
    Zipf tail whose exponent is solved so that the expected number of
    distinct argmax classes over ``n_images`` inferences hits
    ``distinct_argmax_target``.  Clean predictions are treated as uniform.
    """
    C, a = profile.num_classes, profile.agreement_with_clean
    head = (profile.top_class_share - a / C) / (1.0 - a)
    if not 0.0 < head < 1.0:
        raise ValueError(f"{profile.name}: inconsistent top_class_share/agreement")
    ranks = np.arange(1, C, dtype=float)

    def weights(s):
        tail = ranks ** -s
        return np.concatenate([[head], (1.0 - head) * tail / tail.sum()])

    def expected_distinct(s):
        q = a / C + (1.0 - a) * weights(s)
        return float(np.sum(1.0 - (1.0 - q) ** n_images))

    lo, hi = 0.0, 10.0
    if expected_distinct(lo) <= profile.distinct_argmax_target:
        return weights(lo)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if expected_distinct(mid) > profile.distinct_argmax_target else (lo, mid)
    return weights(0.5 * (lo + hi))


@lru_cache(maxsize=256)
def _saturated_sets(profile: ModelProfile, episode_seed: int):
    rng = np.random.default_rng([episode_seed, 21])
    C = profile.num_classes
    lo, hi = profile.pinned_count_range
    dominant = int(rng.integers(C))
    n_pos, n_neg = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    # ties at the ceiling resolve to the lowest index, so the rest of the
    # positive set sits above the dominant class
    above = np.arange(dominant + 1, C)
    pos = np.concatenate([[dominant], rng.choice(above, size=min(n_pos - 1, above.size), replace=False)])
    rest = np.setdiff1d(np.arange(C), pos)
    neg = rng.choice(rest, size=min(n_neg, rest.size), replace=False)
    return dominant, np.sort(pos), np.sort(neg)


@lru_cache(maxsize=256)
def _partial_episode(profile: ModelProfile, episode_seed: int):
    weights = partial_collapse_model(profile)
    rng = np.random.default_rng([episode_seed, 22])
    order = rng.permutation(profile.num_classes)
    bias = np.clip(rng.normal(0.0, 1.0, profile.num_classes), -3.0, 3.0)
    return order, weights, bias


def saturated_episode(profile: ModelProfile, episode: Persistent):
    """(dominant class, positive-pinned classes, negative-pinned classes)."""
    return _saturated_sets(profile, episode.episode_seed)


def _clean_logits(profile: ModelProfile, image_index: int, dataset_seed: int) -> np.ndarray:
    rng = np.random.default_rng([dataset_seed, profile.model_id, 7, image_index])
    lo, _ = profile.nominal_logit_range
    values = np.clip(rng.normal(0.0, 2.5, profile.num_classes), lo, 10.0)
    values[clean_prediction(profile, image_index, dataset_seed)] = rng.uniform(12.0, 20.0)
    return values


def generate_logits(state: DeviceState, profile: ModelProfile, image_index: int,
                    dataset_seed: int = DATASET_SEED) -> np.ndarray:
    """Output-layer scores for one image under the current device state.

    Deterministic in (dataset, episode, image): identical queries give
    identical vectors, which is what golden-output comparisons rely on.
    """
    state.require_ready(profile)
    corruption = state.corruption
    if not isinstance(corruption, Persistent):
        return _clean_logits(profile, image_index, dataset_seed)

    ceiling = profile.saturation_ceiling
    if corruption.subregime is Subregime.SATURATED:
        _, pos, neg = saturated_episode(profile, corruption)
        rng = np.random.default_rng([corruption.episode_seed, 23, image_index])
        values = np.clip(rng.normal(0.0, 300.0, profile.num_classes), -(ceiling - 1), ceiling - 1)
        values[pos] = ceiling
        values[neg] = -ceiling
        return values

    order, weights, bias = _partial_episode(profile, corruption.episode_seed)
    lo, hi = profile.nominal_logit_range
    values = _clean_logits(profile, image_index, dataset_seed) + bias
    clean = clean_prediction(profile, image_index, dataset_seed)
    rng = np.random.default_rng([corruption.episode_seed, 24, image_index])
    agree = rng.random() < profile.agreement_with_clean
    target = clean if agree else int(order[rng.choice(order.size, p=weights)])
    others = np.delete(values, target)
    values[target] = others.max() + rng.uniform(0.5, 5.0)
    return np.clip(values, lo, hi)


def golden_check(state: DeviceState, profile: ModelProfile, reference: int = 0,
                 dataset_seed: int = DATASET_SEED) -> bool:
    """Classify reference image ``reference`` and compare with its stored golden label."""
    if state.hung:
        raise LivenessError("device not responding")
    if state.model_loaded is None:
        return False
    logits = generate_logits(state, profile, REFERENCE_BASE + reference, dataset_seed)
    return int(np.argmax(logits)) == golden_label(profile, reference, dataset_seed)
