import numpy as np
import pytest

from emfisim.mitigation import (CompareMode, Episode, ReferenceCheckPolicy, RedundancyPolicy,
                                VoteRule, WatchdogPolicy, evaluate_redundancy,
                                evaluate_reference_check, evaluate_watchdog, format_episodes,
                                parse_episodes, synthesize_episodes)
from emfisim.fileformat import FormatError, SchemaVersionError
from emfisim.taxonomy import OutcomeClass, Subregime

C0, C1, C2, C3 = OutcomeClass


def partial(count, seed=0):
    return synthesize_episodes(C2, count, seed=seed, subregime=Subregime.PARTIAL_COLLAPSE)


def test_watchdog_catches_every_hang():
    rep = evaluate_watchdog(WatchdogPolicy(), synthesize_episodes(C3, 256, seed=1),
                            np.random.default_rng(0))
    assert rep.detection(C3) == 1.0 and rep.detected[C3] == 256
    assert max(rep.latencies) <= 5.0 and min(rep.latencies) > 0


def test_watchdog_clean_stream_has_no_alarms():
    rep = evaluate_watchdog(WatchdogPolicy(), synthesize_episodes(C0, 50))
    assert rep.false_alarm_rate == 0.0 and rep.clean_checks == 50 * 512


def test_reference_check_partial_collapse_k1():
    rep = evaluate_reference_check(ReferenceCheckPolicy(k_references=1), partial(10_000, 4),
                                   np.random.default_rng(1))
    assert rep.detection(C2) == pytest.approx(1 - 0.23, abs=0.02)
    assert max(rep.latencies) <= 64


def test_reference_check_partial_collapse_k3():
    rep = evaluate_reference_check(ReferenceCheckPolicy(k_references=3), partial(2000, 5),
                                   np.random.default_rng(2))
    assert rep.detection(C2) == pytest.approx(1 - 0.23 ** 3, abs=0.01)
    assert rep.overhead == pytest.approx(3 / 64)


def test_reference_check_saturated_and_clean():
    sat = synthesize_episodes(C2, 300, seed=6, subregime=Subregime.SATURATED)
    clean = synthesize_episodes(C0, 300, seed=7)
    for mode in CompareMode:
        pol = ReferenceCheckPolicy(compare_mode=mode)
        rep = evaluate_reference_check(pol, sat + clean, np.random.default_rng(3))
        assert rep.detection(C2) >= 0.99
        assert rep.false_alarms == 0 and rep.clean_checks == 300


def test_reference_check_correlation_lowers_recall():
    eps = partial(2000, 8)
    indep = evaluate_reference_check(ReferenceCheckPolicy(k_references=3), eps,
                                     np.random.default_rng(4))
    corr = evaluate_reference_check(ReferenceCheckPolicy(k_references=3, correlation=1.0), eps,
                                    np.random.default_rng(4))
    assert corr.detection(C2) == pytest.approx(0.77, abs=0.03)
    assert corr.detection(C2) < indep.detection(C2)


def test_reference_check_transient_is_low_recall():
    eps = synthesize_episodes(C1, 2000, seed=9, flip_count=8)
    rep = evaluate_reference_check(ReferenceCheckPolicy(), eps, np.random.default_rng(5))
    assert rep.detection(C1) == pytest.approx(8 / 512, abs=0.01)


def test_redundancy_pair_flags_saturated():
    sat = synthesize_episodes(C2, 20, seed=10, subregime=Subregime.SATURATED)
    rep = evaluate_redundancy(RedundancyPolicy(), sat, np.random.default_rng(6))
    assert rep.detection(C2) == 1.0 and rep.extra["flag_recall"] >= 0.99
    assert rep.overhead == 1.0 and rep.latencies and max(rep.latencies) <= 2


def test_redundancy_flags_every_transient_flip():
    eps = synthesize_episodes(C1, 50, seed=11, flip_count=3)
    rep = evaluate_redundancy(RedundancyPolicy(), eps, np.random.default_rng(7))
    assert rep.detection(C1) == 1.0 and rep.extra["flag_recall"] == 1.0


def test_majority_vote_masks_single_faulty_replica():
    eps = partial(10, 12)
    rep = evaluate_redundancy(RedundancyPolicy(n_replicas=3), eps, np.random.default_rng(8))
    assert rep.extra["voted_correct"] == 1.0 and rep.overhead == 2.0
    clean = evaluate_redundancy(RedundancyPolicy(n_replicas=3), synthesize_episodes(C0, 5),
                                np.random.default_rng(8))
    assert clean.false_alarms == 0


def test_policy_validation():
    with pytest.raises(ValueError):
        WatchdogPolicy(timeout_s=0)
    with pytest.raises(ValueError):
        ReferenceCheckPolicy(k_references=0)
    with pytest.raises(ValueError):
        RedundancyPolicy(n_replicas=1)
    with pytest.raises(ValueError):
        RedundancyPolicy(n_replicas=2, rule=VoteRule.MAJORITY_VOTE)
    with pytest.raises(ValueError):
        Episode(0, "resnet50", 512, C2)


def test_episode_file_round_trip():
    eps = (synthesize_episodes(C2, 3, seed=1, subregime=Subregime.SATURATED)
           + synthesize_episodes(C1, 2, flip_count=4) + synthesize_episodes(C3, 2))
    text = format_episodes(eps, "m1")
    assert parse_episodes(text) == eps
    with pytest.raises(SchemaVersionError):
        parse_episodes(text.replace("v1", "v2", 1))
    with pytest.raises(FormatError):
        parse_episodes(text.replace("saturated", "melted", 1))
