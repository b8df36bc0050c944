"""Acceptance suite: end-to-end criteria at pinned tolerances.

Each criterion prints one ``[PASS]``/``[FAIL]`` line (visible with ``pytest
-s``; captured output is shown for failures either way). Expensive scenarios
run once per module via fixtures and are shared between criteria.
"""

import dataclasses
import math
import re

import pytest

from batchsocket import harness
from batchsocket.harness import (
    ConsumerLoad,
    Fault,
    ScenarioSpec,
    Tolerances,
    check_acceptance,
    run_pair,
    run_scenario,
)

TOL = Tolerances()


def _verdict(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    assert passed, f"{criterion}: {detail}"


def _mean(xs):
    return sum(xs) / len(xs)


# -- shared scenario runs -------------------------------------------------------


@pytest.fixture(scope="module")
def pair_prep_bound():
    return run_pair(harness.builtin_scenario("prep-bound-4way")[0])


@pytest.fixture(scope="module")
def pair_consumer_bound():
    return run_pair(harness.builtin_scenario("consumer-bound-4way")[0])


@pytest.fixture(scope="module")
def scaling_results():
    return [run_scenario(s) for s in harness.builtin_scenario("scaling-1to8")]


@pytest.fixture(scope="module")
def late_joiner_result():
    return run_scenario(harness.builtin_scenario("late-joiner")[0])


@pytest.fixture(scope="module")
def kill_result():
    return run_scenario(harness.builtin_scenario("kill-consumer")[0])


@pytest.fixture(scope="module")
def mixed_results():
    spec = harness.builtin_scenario("mixed-speeds")[0]
    both = run_scenario(spec)
    solo = run_scenario(
        dataclasses.replace(
            spec, name="mixed-speeds-solo-slow", consumers=[spec.consumers[1]]
        )
    )
    return both, solo


@pytest.fixture(scope="module")
def exactly_once_results():
    results = {}
    for epoch_len in (1, 2, 100):
        spec = ScenarioSpec(
            name=f"exactly-once-L{epoch_len}",
            consumers=[ConsumerLoad(compute_us=200, pace_us=2000)] * 2,
            workers=1,
            epochs=1,
            epoch_len=epoch_len,
            batch_size=16,
            sample_bytes=256,
            prep_cost_us_per_sample=20,
            verify_checksums=True,
            oracle_check=False,
        )
        results[epoch_len] = run_scenario(spec)
    return results


# -- criteria -------------------------------------------------------------------


def test_criterion_1_sharing_doubles_prep_bound_throughput(pair_prep_bound):
    shared, nonshared = pair_prep_bound
    ratio = _mean(shared.per_consumer_samples_s) / _mean(nonshared.per_consumer_samples_s)
    runtime = shared.wall_seconds + nonshared.wall_seconds
    ok = abs(ratio - TOL.speedup_target) <= TOL.speedup_target * TOL.speedup_rel
    ok = ok and runtime < 120
    _verdict(
        "1 sharing-doubles-prep-bound-throughput",
        ok,
        f"shared/nonshared per-consumer ratio {ratio:.2f} "
        f"(target {TOL.speedup_target} +/- {TOL.speedup_rel:.0%}), "
        f"runtime {runtime:.0f}s < 120s",
    )


def test_criterion_2_parity_when_consumer_bound(pair_consumer_bound):
    shared, nonshared = pair_consumer_bound
    oracle = shared.oracle["shared"]["per_consumer_samples_s"]
    problems = []
    for i, (s, n, o) in enumerate(
        zip(shared.per_consumer_samples_s, nonshared.per_consumer_samples_s, oracle)
    ):
        if abs(s - n) / n > TOL.parity_rel:
            problems.append(f"consumer {i}: shared {s:.0f} vs nonshared {n:.0f}")
        if abs(s - o) / o > TOL.parity_rel or abs(n - o) / o > TOL.parity_rel:
            problems.append(f"consumer {i}: oracle {o:.0f}, shared {s:.0f}, nonshared {n:.0f}")
    _verdict(
        "2 parity-when-consumer-bound",
        not problems,
        "; ".join(problems)
        or f"per-consumer rates within {TOL.parity_rel:.0%} of each other and oracle "
        f"(shared mean {_mean(shared.per_consumer_samples_s):.0f} samples/s)",
    )


def test_criterion_3_cpu_work_sharing(pair_prep_bound):
    # Prep CPU is accounted as work delivered (burn iterations / calibrated
    # rate): this host's process CPU meter mis-reports identical work by up
    # to ~1.5x depending on concurrency, so raw rusage only backs a loose
    # directional check here.
    shared, nonshared = pair_prep_bound
    share = shared.producer_prep_cpu_seconds / nonshared.producer_prep_cpu_seconds
    rusage_share = shared.producer_cpu_seconds / nonshared.producer_cpu_seconds
    ok = share <= TOL.cpu_share_max and rusage_share <= 0.6
    _verdict(
        "3 cpu-work-sharing",
        ok,
        f"shared prep CPU {shared.producer_prep_cpu_seconds:.1f}s / "
        f"nonshared {nonshared.producer_prep_cpu_seconds:.1f}s = {share:.2f} "
        f"(bound {TOL.cpu_share_max}, ideal 0.25); host-metered ratio "
        f"{rusage_share:.2f} <= 0.6",
    )


def test_criterion_4_drift_bound(
    pair_prep_bound, pair_consumer_bound, scaling_results, mixed_results, exactly_once_results
):
    reports = list(pair_prep_bound) + list(pair_consumer_bound) + scaling_results
    reports += list(mixed_results) + list(exactly_once_results.values())
    worst = -1
    bad = []
    for report in reports:
        n = report.spec.buffer_depth
        for g, producer in enumerate(report.producers):
            drift = producer.get("drift_max", -1)
            worst = max(worst, drift)
            if drift > n:
                bad.append(f"{report.spec.name}/producer{g}: drift {drift} > N={n}")
    _verdict(
        "4 drift-bound",
        not bad,
        "; ".join(bad) or f"max ack-cursor gap over all clean runs = {worst} <= N=2",
    )


@pytest.mark.parametrize("epoch_len", [1, 2, 100])
def test_criterion_5_exactly_once_in_order(exactly_once_results, epoch_len):
    report = exactly_once_results[epoch_len]
    checks = {c.criterion: c for c in check_acceptance(report)}
    c = checks["exactly-once-in-order"]
    _verdict(f"5 exactly-once-in-order-L{epoch_len}", c.passed, c.detail)


def test_criterion_6_rubberband_semantics(late_joiner_result):
    report = late_joiner_result
    L = report.spec.epoch_len

    def epoch_counts(consumer):
        return {e["epoch"]: e["batches"] for e in consumer["epochs"]}

    rubber = epoch_counts(report.consumers[1])  # joined at announce 15
    waiter = epoch_counts(report.consumers[2])  # joined at announce 25
    ok = rubber.get(0) == L and rubber.get(1) == L
    ok = ok and waiter.get(0, 0) == 0 and waiter.get(1) == L
    joins = {}
    for _, kind, detail in report.producers[0].get("events", []):
        if kind == "join":
            m = re.search(r"consumer=(\d+) admitted=(\d+) progress=(\d+)", detail)
            if m:
                joins[int(m.group(1))] = (int(m.group(2)), int(m.group(3)))
    code2, at2 = joins.get(2, (None, None))
    code3, at3 = joins.get(3, (None, None))
    ok = ok and code2 == 1 and 0 < at2 < 20
    ok = ok and code3 == 0 and at3 >= 20
    _verdict(
        "6 rubberband-semantics",
        ok,
        f"join@{at2} admitted={code2} got epochs {rubber}; "
        f"join@{at3} admitted={code3} got epochs {waiter} (epoch_len {L})",
    )


def test_criterion_7_eviction_liveness(kill_result):
    checks = {c.criterion: c for c in check_acceptance(kill_result)}
    ev = checks["eviction-liveness"]
    leak = checks["zero-live-segments-at-end"]
    _verdict(
        "7 eviction-liveness",
        ev.passed and leak.passed,
        f"{ev.detail}; {leak.detail}",
    )


def test_criterion_8_memory_bound_and_zero_copy(scaling_results):
    problems = []
    volumes = set()
    for report in scaling_results:
        spec = report.spec
        checks = {c.criterion: c for c in check_acceptance(report)}
        for name in ("live-segment-bound", "write-volume-exactly-once"):
            if not checks[name].passed:
                problems.append(f"{spec.name}: {checks[name].detail}")
        volumes.add(report.producers[0]["bytes_written"])
    if len(volumes) != 1:
        problems.append(f"write volume varies with K: {sorted(volumes)}")
    _verdict(
        "8 memory-bound-and-zero-copy",
        not problems,
        "; ".join(problems)
        or f"peaks within bounds for K in {{1,2,4,8}}; write volume {volumes.pop()} "
        "bytes independent of K",
    )


def test_criterion_9_mixed_speed_pacing(mixed_results):
    both, solo = mixed_results
    fast_wall = both.consumers[0]["epochs"][0]["wall_s"]
    slow_wall = both.consumers[1]["epochs"][0]["wall_s"]
    solo_wall = solo.consumers[0]["epochs"][0]["wall_s"]
    rel_pair = abs(fast_wall - slow_wall) / slow_wall
    rel_solo = max(abs(fast_wall - solo_wall), abs(slow_wall - solo_wall)) / solo_wall
    ok = rel_pair <= TOL.pacing_rel and rel_solo <= TOL.pacing_rel
    _verdict(
        "9 mixed-speed-pacing",
        ok,
        f"epoch walls: fast {fast_wall:.2f}s, slow {slow_wall:.2f}s, "
        f"slow-solo {solo_wall:.2f}s (pair {rel_pair:.1%}, vs solo {rel_solo:.1%}, "
        f"bound {TOL.pacing_rel:.0%})",
    )


def test_criterion_10_scaling_shape(scaling_results):
    per_consumer = [_mean(r.per_consumer_samples_s) for r in scaling_results]
    aggregates = [r.aggregate_samples_s for r in scaling_results]
    ks = [len(r.spec.consumers) for r in scaling_results]
    base = per_consumer[0]
    problems = []
    for k, rate in zip(ks, per_consumer):
        if abs(rate - base) / base > TOL.flat_rel:
            problems.append(f"K={k}: per-consumer {rate:.0f} vs K=1 {base:.0f}")
    for (k1, a1), (k2, a2) in zip(zip(ks, aggregates), zip(ks[1:], aggregates[1:])):
        if a2 <= a1:
            problems.append(f"aggregate not increasing: K={k1}:{a1:.0f} -> K={k2}:{a2:.0f}")
    _verdict(
        "10 scaling-shape",
        not problems,
        "; ".join(problems)
        or (
            "per-consumer flat within "
            f"{TOL.flat_rel:.0%} ({', '.join(f'K={k}:{r:.0f}' for k, r in zip(ks, per_consumer))}); "
            f"aggregate rises {aggregates[0]:.0f} -> {aggregates[-1]:.0f} samples/s"
        ),
    )


def test_oracle_conformance_invariant(pair_consumer_bound, scaling_results):
    """Prep-bound and consumer-bound corners stay within 15% of the oracle."""
    problems = []
    for report in [pair_consumer_bound[0], pair_consumer_bound[1], scaling_results[2]]:
        checks = {c.criterion: c for c in check_acceptance(report, TOL)}
        c = checks.get("oracle-conformance")
        if c is not None and not c.passed:
            problems.append(f"{report.spec.name}: {c.detail}")
    _verdict("oracle-conformance-invariant", not problems, "; ".join(problems) or
             "corner scenarios within 15% of analytic oracle")
