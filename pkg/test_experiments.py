"""
RepStream - Experiment Tests
Full scenario runs: payoff ordering, determinism, churn recovery and flash crowds
"""

import os

import pytest

from src import config
from src.harness_cli import EQUILIBRIUM_PINS, check_equilibrium, free_rider_deviation
from src.metrics import check_forest, conservation_holds, payoff_summary
from src.scenario import load_scenario
from src.simnet import Simulator, run


def scenario(name: str):
    return load_scenario(os.path.join(config.SCENARIOS_DIR, name))


@pytest.fixture(scope='module')
def equilibrium_run():
    spec = scenario('equilibrium.json')
    return spec, run(spec)


@pytest.fixture(scope='module')
def churn_run():
    simulator = Simulator(scenario('churn.json'))
    return simulator, simulator.run()


@pytest.fixture(scope='module')
def flash_run():
    spec = scenario('flash_crowd.json')
    return spec, run(spec)


# ===========================
# Equilibrium
# ===========================
def test_payoff_ordering(equilibrium_run):
    _, log = equilibrium_run
    summary = payoff_summary(log)
    check_equilibrium(summary)
    assert summary['altruistic']['mean_reputation'] > summary['malicious']['mean_reputation']
    assert summary['malicious']['mean_reputation'] >= summary['free_rider']['mean_reputation']


def test_free_riders_sink_and_altruists_stay_attached(equilibrium_run):
    _, log = equilibrium_run
    summary = payoff_summary(log)
    assert summary['free_rider']['mean_reputation'] < EQUILIBRIUM_PINS['free_rider_mean_below']
    assert summary['altruistic']['mean_reputation'] > EQUILIBRIUM_PINS['altruistic_mean_above']
    assert summary['free_rider']['leaf_or_detached_fraction'] >= EQUILIBRIUM_PINS['free_rider_leaf_or_detached_at_least']
    assert all(log.attached(p) for p in log.peers_with_policy('altruistic'))


def test_free_riders_follow_closed_form(equilibrium_run):
    spec, log = equilibrium_run
    assert free_rider_deviation(log, spec.alpha) < 1e-9


def test_equilibrium_run_is_consistent(equilibrium_run):
    _, log = equilibrium_run
    check_forest(log.final_parents, log.source)
    assert conservation_holds(log)
    assert log.max_children_seen <= config.FANOUT


# ===========================
# Determinism
# ===========================
def test_same_seed_reproduces_trace(equilibrium_run):
    spec, log = equilibrium_run
    again = run(spec)
    assert again.trace_hash == log.trace_hash
    assert again.reputation_series == log.reputation_series


def test_seeds_change_the_trace():
    spec = scenario('equilibrium.json').with_overrides(duration_ms=20_000)
    assert run(spec.with_overrides(seed=42)).trace_hash != run(spec.with_overrides(seed=43)).trace_hash


# ===========================
# Churn
# ===========================
def test_orphans_reattach_within_bound(churn_run):
    simulator, log = churn_run
    departed_at = min(t for t, _, _ in log.departures)
    bound = 2 * simulator.scenario.join_timeout_ms + simulator.latency.max_rtt()

    orphans = [p for p in log.orphans if log.peers[p].departed_at is None]
    assert orphans
    assert all(log.attached(p) for p in orphans)
    recoveries = [r for r in log.recoveries if r.peer in log.orphans and r.lost_at >= departed_at]
    assert recoveries
    assert max(r.duration_ms for r in recoveries) <= bound


def test_interior_departures_remove_ten_percent(churn_run):
    _, log = churn_run
    assert len(log.departures) >= 1
    assert all(rule == 'interior' for _, _, rule in log.departures)
    check_forest(log.final_parents, log.source)


# ===========================
# Flash crowd
# ===========================
def test_flash_crowd_attaches_every_joiner(flash_run):
    spec, log = flash_run
    crowd_at = spec.churn.flash_crowd.at_ms
    joiners = [p for p, info in log.peers.items() if info.joined_at == crowd_at and info.role == 'subscriber']
    assert len(joiners) == spec.churn.flash_crowd.count
    for peer in joiners:
        assert peer in log.first_attached
        assert log.first_attached[peer] - crowd_at <= 30_000


def test_flash_crowd_respects_fanout(flash_run):
    spec, log = flash_run
    assert log.max_children_seen <= spec.fanout
    assert log.message_counters['join_reject'] > 0


# ===========================
# Free riders alone
# ===========================
def test_free_rider_scenario_matches_closed_form():
    spec = scenario('free_rider.json')
    log = run(spec)
    assert log.peers_with_policy('free_rider')
    assert free_rider_deviation(log, spec.alpha) < 1e-9
