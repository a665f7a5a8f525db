"""Integrator-level mitigations evaluated against labelled fault episodes.

An episode is one observed trial outcome (C0..C3) plus the ground truth
needed to replay it: the transient flip count or the persistent sub-regime,
and a seed from which the episode's frozen corruption is redrawn.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fileformat import FormatError, SchemaVersionError, atomic_write
from .taxonomy import CLASSES, OutcomeClass, OutcomeKind, Subregime, canonical_model, parse_enum
from .workload import (DATASET_SEED, REFERENCE_BASE, DeviceState, Persistent, _clean_logits,
                       clean_prediction, generate_logits, get_profile, golden_label)

EPISODE_MAGIC = "emfi-episodes"
EPISODE_VERSION = 1
EPISODE_COLUMNS = ("episode_id", "model", "n_images", "outcome_class", "subregime",
                   "flip_count", "seed")


@dataclass(frozen=True)
class Episode:
    episode_id: int
    model: str
    n_images: int
    outcome_class: OutcomeClass
    subregime: Subregime | None = None
    flip_count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.outcome_class is OutcomeClass.C2 and self.subregime is None:
            raise ValueError("C2 episodes need a sub-regime")
        if self.outcome_class is OutcomeClass.C1 and not self.flip_count:
            raise ValueError("C1 episodes need a positive flip count")

    def persistent_state(self) -> Persistent:
        return Persistent.draw(self.subregime, np.random.default_rng([self.seed, 31]))


def episodes_from_records(records: Iterable) -> list[Episode]:
    """Episodes for classified trials that carry simulation ground truth."""
    out = []
    for r in records:
        phys = r.physical
        cls = r.outcome_class
        if cls is None:
            raise ValueError(f"trial {r.trial_id} is not classified")
        sub = flips = None
        if cls is OutcomeClass.C2:
            if phys is None or phys.kind is not OutcomeKind.PERSISTENT:
                continue
            sub = phys.subregime
        elif cls is OutcomeClass.C1:
            if phys is not None and phys.kind is OutcomeKind.TRANSIENT_FLIP:
                flips = phys.flip_count
            else:
                ref = r.followup_top1 if r.followup_top1 is not None else r.top1
                flips = max(1, round(abs(ref - r.top1) * r.n_images))
        out.append(Episode(len(out), r.model, r.n_images, cls, sub, flips, r.seed))
    return out


def synthesize_episodes(outcome_class: OutcomeClass, count: int, model: str = "resnet50",
                        n_images: int = 512, seed: int = 0, subregime: Subregime | None = None,
                        flip_count: int | None = None) -> list[Episode]:
    outcome_class = parse_enum(OutcomeClass, outcome_class)
    seeds = np.random.SeedSequence(seed).generate_state(max(count, 1), np.uint64)
    if outcome_class is OutcomeClass.C1 and flip_count is None:
        flip_count = 1
    return [Episode(i, canonical_model(model), n_images, outcome_class,
                    subregime if outcome_class is OutcomeClass.C2 else None,
                    flip_count if outcome_class is OutcomeClass.C1 else None, int(seeds[i]))
            for i in range(count)]


def format_episodes(episodes: Iterable[Episode], manifest_id: str = "none") -> str:
    buf = io.StringIO()
    buf.write(f"# {EPISODE_MAGIC} v{EPISODE_VERSION} manifest={manifest_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for e in episodes:
        w.writerow([e.episode_id, e.model, e.n_images, e.outcome_class.value,
                    e.subregime.value if e.subregime else "",
                    "" if e.flip_count is None else e.flip_count, e.seed])
    return buf.getvalue()


def write_episodes(path, episodes: Iterable[Episode], manifest_id: str = "none") -> Path:
    return atomic_write(path, format_episodes(episodes, manifest_id))


def parse_episodes(text: str) -> list[Episode]:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty episode file", 1)
    head = lines[0].lstrip("#").split()
    if len(head) < 2 or head[0] != EPISODE_MAGIC:
        raise FormatError(f"missing '# {EPISODE_MAGIC} v{EPISODE_VERSION}' header", 1)
    if head[1] != f"v{EPISODE_VERSION}":
        raise SchemaVersionError(f"unsupported episode-file version {head[1]!r}", 1)
    if len(lines) < 2 or next(csv.reader([lines[1]])) != list(EPISODE_COLUMNS):
        raise FormatError("unexpected column header", 2)
    out = []
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != len(EPISODE_COLUMNS):
            raise FormatError(f"expected {len(EPISODE_COLUMNS)} fields, got {len(row)}", lineno)
        f = dict(zip(EPISODE_COLUMNS, row))
        try:
            out.append(Episode(int(f["episode_id"]), canonical_model(f["model"]),
                               int(f["n_images"]), parse_enum(OutcomeClass, f["outcome_class"]),
                               parse_enum(Subregime, f["subregime"]) if f["subregime"] else None,
                               int(f["flip_count"]) if f["flip_count"] else None, int(f["seed"])))
        except ValueError as exc:
            raise FormatError(str(exc), lineno) from exc
    return out


def read_episodes(path) -> list[Episode]:
    return parse_episodes(Path(path).read_text())


# -- policies ----------------------------------------------------------------

class RecoveryAction(str, Enum):
    POWER_CYCLE_THEN_RELOAD = "power_cycle_then_reload"


class CompareMode(str, Enum):
    TOP1_LABEL = "top1"
    LOGIT_DISTANCE = "logit"


class VoteRule(str, Enum):
    DISAGREEMENT_FLAG = "disagreement"
    MAJORITY_VOTE = "majority"


@dataclass(frozen=True)
class WatchdogPolicy:
    timeout_s: float = 5.0
    recovery_action: RecoveryAction = RecoveryAction.POWER_CYCLE_THEN_RELOAD
    inference_latency_s: float = 0.025

    def __post_init__(self):
        if self.timeout_s <= 0 or self.inference_latency_s <= 0:
            raise ValueError("timeout and inference latency must be positive")


@dataclass(frozen=True)
class ReferenceCheckPolicy:
    k_references: int = 1
    interval_inferences: int = 64
    compare_mode: CompareMode = CompareMode.TOP1_LABEL
    logit_threshold: float = 1.0
    correlation: float = 0.0  # chance that all references share one outcome

    def __post_init__(self):
        if self.k_references < 1 or self.interval_inferences < 1:
            raise ValueError("need k_references >= 1 and interval_inferences >= 1")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError("correlation must lie in [0, 1]")
        if self.logit_threshold <= 0:
            raise ValueError("logit_threshold must be positive")
        object.__setattr__(self, "compare_mode", parse_enum(CompareMode, self.compare_mode))

    @property
    def overhead(self) -> float:
        return self.k_references / self.interval_inferences


@dataclass(frozen=True)
class RedundancyPolicy:
    n_replicas: int = 2
    rule: VoteRule | None = None
    max_inferences: int | None = None  # cap per episode, for speed

    def __post_init__(self):
        if self.n_replicas < 2:
            raise ValueError("redundancy needs at least two replicas")
        rule = self.rule
        if rule is None:
            rule = VoteRule.DISAGREEMENT_FLAG if self.n_replicas == 2 else VoteRule.MAJORITY_VOTE
        rule = parse_enum(VoteRule, rule)
        if rule is VoteRule.MAJORITY_VOTE and self.n_replicas < 3:
            raise ValueError("majority voting needs n_replicas >= 3")
        object.__setattr__(self, "rule", rule)

    @property
    def overhead(self) -> float:
        return float(self.n_replicas - 1)


@dataclass
class CoverageReport:
    strategy: str
    detected: dict[OutcomeClass, int]
    episodes: dict[OutcomeClass, int]
    latencies: list[float]
    latency_unit: str
    false_alarms: int
    clean_checks: int
    overhead: float
    extra: dict[str, float] = field(default_factory=dict)

    def detection(self, cls: OutcomeClass) -> float | None:
        n = self.episodes.get(cls, 0)
        return self.detected.get(cls, 0) / n if n else None

    @property
    def false_alarm_rate(self) -> float:
        return self.false_alarms / self.clean_checks if self.clean_checks else 0.0

    def rows(self) -> list[list]:
        out = []
        for cls in CLASSES:
            d = self.detection(cls)
            out.append([self.strategy, cls.value, self.episodes.get(cls, 0),
                        self.detected.get(cls, 0), "" if d is None else repr(d)])
        return out


def _tally(episodes: Sequence[Episode]) -> dict[OutcomeClass, int]:
    c = Counter(e.outcome_class for e in episodes)
    return {cls: c[cls] for cls in CLASSES}


def _corrupt_state(e: Episode) -> DeviceState:
    state = DeviceState()
    state.reload(e.model)
    if e.outcome_class is OutcomeClass.C2:
        state.corruption = e.persistent_state()
    return state


def evaluate_watchdog(policy: WatchdogPolicy, episodes: Sequence[Episode],
                      rng: np.random.Generator | None = None) -> CoverageReport:
    rng = rng or np.random.default_rng(0)
    lat = policy.inference_latency_s
    detected = Counter()
    latencies = []
    false_alarms = clean = 0
    for e in episodes:
        if e.outcome_class is OutcomeClass.C3:
            # hang lands somewhere inside the workload; the host last heard
            # from the device at the preceding inference boundary
            t_hang = rng.uniform(0.0, e.n_images * lat)
            last = math.floor(t_hang / lat) * lat
            latencies.append(last + policy.timeout_s - t_hang)
            detected[OutcomeClass.C3] += 1
        else:
            clean += e.n_images
            if lat > policy.timeout_s:
                false_alarms += e.n_images
    return CoverageReport("watchdog", dict(detected), _tally(episodes), latencies, "s",
                          false_alarms, clean, 0.0)


def _reference_fails(policy: ReferenceCheckPolicy, state: DeviceState, profile, j: int) -> bool:
    logits = generate_logits(state, profile, REFERENCE_BASE + j)
    if policy.compare_mode is CompareMode.TOP1_LABEL:
        return int(np.argmax(logits)) != golden_label(profile, j)
    golden = _clean_logits(profile, REFERENCE_BASE + j, DATASET_SEED)
    return float(np.max(np.abs(logits - golden))) > policy.logit_threshold


def evaluate_reference_check(policy: ReferenceCheckPolicy, episodes: Sequence[Episode],
                             rng: np.random.Generator) -> CoverageReport:
    """Periodic golden-image checks interleaved with the workload.

    Each episode starts at a uniform point between two checks; latency is the
    number of inferences until the next check.  A hung device answers no
    check, which leaves it to the watchdog.
    """
    detected = Counter()
    latencies = []
    false_alarms = clean = 0
    k, interval = policy.k_references, policy.interval_inferences
    for e in episodes:
        profile = get_profile(e.model)
        onset = int(rng.integers(interval))
        latency = interval - onset
        cls = e.outcome_class
        if cls is OutcomeClass.C3:
            continue
        if cls is OutcomeClass.C1:
            # a check sees the transient only if a flipped image is a reference
            p_one = min(1.0, e.flip_count / e.n_images)
            if rng.random() < policy.correlation:
                hit = rng.random() < p_one
            else:
                hit = rng.random() < 1.0 - (1.0 - p_one) ** k
            if hit:
                detected[cls] += 1
                latencies.append(latency)
            continue
        state = _corrupt_state(e)
        if cls is OutcomeClass.C2:
            if rng.random() < policy.correlation:
                refs = [int(rng.integers(2 ** 31))] * k
            else:
                refs = [int(r) for r in rng.integers(2 ** 31, size=k)]
            # distinct reference indices per episode model independent agreement draws
            if any(_reference_fails(policy, state, profile, j) for j in refs):
                detected[cls] += 1
                latencies.append(latency)
        else:
            clean += 1
            if any(_reference_fails(policy, state, profile, j) for j in range(k)):
                false_alarms += 1
                detected[cls] += 1
    return CoverageReport("reference_check", dict(detected), _tally(episodes), latencies,
                          "inferences", false_alarms, clean, policy.overhead)


def _replica_labels(e: Episode, profile, n: int, rng: np.random.Generator) -> list[int | None]:
    """Top-1 labels of the faulted replica for images 0..n-1 (None: no answer)."""
    clean = [clean_prediction(profile, i) for i in range(n)]
    if e.outcome_class is OutcomeClass.C3:
        return [None] * n
    if e.outcome_class is OutcomeClass.C1:
        flipped = rng.choice(n, size=min(e.flip_count, n), replace=False)
        out = list(clean)
        for i in flipped:
            out[i] = (clean[i] + 1 + int(rng.integers(profile.num_classes - 1))) % profile.num_classes
        return out
    if e.outcome_class is OutcomeClass.C2:
        state = _corrupt_state(e)
        return [int(np.argmax(generate_logits(state, profile, i))) for i in range(n)]
    return clean


def evaluate_redundancy(policy: RedundancyPolicy, episodes: Sequence[Episode],
                        rng: np.random.Generator) -> CoverageReport:
    """Replica 0 carries the episode's fault; the others run clean.

    ``extra`` reports ``flag_recall`` (flagged share of inferences whose
    faulted label differs from the clean one) and, under majority voting,
    ``voted_correct`` (share of voted labels equal to the clean label).
    """
    detected = Counter()
    latencies = []
    false_alarms = clean_inf = 0
    differing = flagged_differing = voted_ok = voted_total = 0
    for e in episodes:
        profile = get_profile(e.model)
        n = e.n_images if policy.max_inferences is None else min(e.n_images, policy.max_inferences)
        clean = [clean_prediction(profile, i) for i in range(n)]
        faulty = _replica_labels(e, profile, n, rng)
        first_flag = None
        for i in range(n):
            labels = [faulty[i]] + [clean[i]] * (policy.n_replicas - 1)
            answered = [x for x in labels if x is not None]
            flag = len(set(answered)) > 1
            if faulty[i] is not None and faulty[i] != clean[i]:
                differing += 1
                flagged_differing += flag
            if policy.rule is VoteRule.MAJORITY_VOTE:
                top, votes = Counter(answered).most_common(1)[0]
                voted = top if votes * 2 > len(answered) else None
                voted_total += 1
                voted_ok += voted == clean[i]
            if flag and first_flag is None:
                first_flag = i
        if e.outcome_class is OutcomeClass.C0:
            clean_inf += n
            false_alarms += sum(1 for i in range(n) if faulty[i] != clean[i])
        if first_flag is not None:
            detected[e.outcome_class] += 1
            latencies.append(first_flag + 1)
    extra = {"flag_recall": flagged_differing / differing if differing else 1.0}
    if policy.rule is VoteRule.MAJORITY_VOTE:
        extra["voted_correct"] = voted_ok / voted_total if voted_total else 1.0
    return CoverageReport(f"redundancy_n{policy.n_replicas}", dict(detected), _tally(episodes),
                          latencies, "inferences", false_alarms, clean_inf, policy.overhead, extra)
