"""
RepStream - Harness CLI Tests
Exit codes, output files and the equilibrium check
"""

import csv
import json

import pytest

from src import harness_cli
from src.errors import EquilibriumViolation, SimulationAbort
from src.harness_cli import (
    EXIT_ABORT, EXIT_EQUILIBRIUM, EXIT_INVALID, EXIT_OK, check_equilibrium, cmd_alpha_sweep, cmd_equilibrium,
    cmd_run, cmd_validate, main,
)
from src.metrics import MetricsLog, PeerInfo


@pytest.fixture
def tiny_scenario(tmp_path):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps({
        'name': 'tiny',
        'duration_ms': 5000,
        'seed': 2,
        'peers': {'count': 8, 'mix': {'altruistic': 0.75, 'free_rider': 0.25}},
        'join_spread_ms': 500,
    }, indent=2))
    return str(path)


def write_json(tmp_path, name, data):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return str(path)


# ===========================
# validate
# ===========================
def test_validate_accepts_valid_file(tiny_scenario):
    assert cmd_validate(tiny_scenario) == EXIT_OK
    assert main(['validate', '--scenario', tiny_scenario]) == EXIT_OK


def test_validate_rejects_zero_fanout(tmp_path):
    path = write_json(tmp_path, 'bad.json', {'fanout': 0})
    assert cmd_validate(path) == EXIT_INVALID


def test_validate_rejects_short_mix(tmp_path):
    path = write_json(tmp_path, 'bad.json', {'peers': {'count': 10, 'mix': {'altruistic': 0.9}}})
    assert main(['validate', '--scenario', path]) == EXIT_INVALID


@pytest.mark.parametrize('data', [
    {'churn': {'arrivals': [5]}},
    {'churn': {'departures': 'x'}},
    {'session': 'talk'},
    {'session': {'title': 5}},
    {'peers': {'count': 1}, 'latency': {'mode': 'coordinates', 'positions': [['0', '0'], ['3', '4']]}},
])
def test_malformed_nested_values_exit_invalid(tmp_path, data):
    path = write_json(tmp_path, 'bad.json', data)
    assert cmd_validate(path) == EXIT_INVALID
    assert cmd_run(path, str(tmp_path / 'out')) == EXIT_INVALID


# ===========================
# run
# ===========================
def test_run_writes_outputs(tiny_scenario, tmp_path):
    out = tmp_path / 'out'
    assert cmd_run(tiny_scenario, str(out)) == EXIT_OK
    summary = json.loads((out / 'summary.json').read_text())
    assert summary['scenario'] == 'tiny'
    assert len(summary['trace_hash']) == 64
    with open(out / 'metrics.csv', newline='') as f:
        header = next(csv.reader(f))
    assert header == ['time', 'peer', 'metric', 'value']
    assert (out / 'topology.csv').exists()


def test_run_overrides_seed_and_duration(tiny_scenario, tmp_path):
    out = tmp_path / 'out'
    assert main(['run', '--scenario', tiny_scenario, '--out', str(out), '--seed', '9', '--duration-ms', '2000']) == EXIT_OK
    summary = json.loads((out / 'summary.json').read_text())
    assert summary['seed'] == 9
    assert summary['duration_ms'] == 2000


def test_run_invalid_scenario_exits_2(tmp_path):
    path = write_json(tmp_path, 'bad.json', {'duration_ms': -5})
    assert cmd_run(path, str(tmp_path / 'out')) == EXIT_INVALID


def test_run_abort_exits_3(tiny_scenario, tmp_path, monkeypatch):
    def explode(spec):
        raise SimulationAbort('event', RuntimeError('boom'))
    monkeypatch.setattr(harness_cli, 'run_scenario', explode)
    assert cmd_run(tiny_scenario, str(tmp_path / 'out')) == EXIT_ABORT


# ===========================
# alpha-sweep
# ===========================
def test_alpha_sweep_writes_ordered_curves(tmp_path):
    assert cmd_alpha_sweep([1e-4, 2e-4], str(tmp_path), horizon_ms=10_000, step_ms=1000) == EXIT_OK
    with open(tmp_path / 'alpha_sweep.csv', newline='') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 22
    low = {int(r['time']): float(r['value']) for r in rows if float(r['alpha']) == 1e-4}
    high = {int(r['time']): float(r['value']) for r in rows if float(r['alpha']) == 2e-4}
    assert low[0] == high[0] == 0.5
    assert all(high[t] < low[t] for t in low if t > 0)


def test_alpha_sweep_rejects_unordered_alphas(tmp_path):
    assert cmd_alpha_sweep([2e-4, 1e-4], str(tmp_path)) == EXIT_INVALID
    assert cmd_alpha_sweep([0.0], str(tmp_path)) == EXIT_INVALID


def test_alpha_sweep_compares_free_riders(tiny_scenario, tmp_path):
    assert main(['alpha-sweep', '--alphas', '1e-4,2e-4', '--horizon-ms', '5000',
                 '--scenario', tiny_scenario, '--out', str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / 'summary.json').read_text())
    assert summary['free_rider_max_abs_deviation'] < 1e-9


# ===========================
# equilibrium
# ===========================
GOOD_PAYOFF = {
    'altruistic': {'mean_reputation': 0.9, 'inclusion_fraction': 1.0, 'detached_fraction': 0.0,
                   'leaf_or_detached_fraction': 0.4},
    'malicious': {'mean_reputation': 0.05, 'inclusion_fraction': 0.0, 'detached_fraction': 0.0,
                  'leaf_or_detached_fraction': 0.5},
    'free_rider': {'mean_reputation': 0.01, 'inclusion_fraction': 0.0, 'detached_fraction': 0.2,
                   'leaf_or_detached_fraction': 1.0},
}


def test_check_equilibrium_accepts_expected_ordering():
    check_equilibrium(GOOD_PAYOFF)


@pytest.mark.parametrize('policy,field,value', [
    ('malicious', 'mean_reputation', 0.95),
    ('free_rider', 'mean_reputation', 0.06),
    ('malicious', 'inclusion_fraction', 1.0),
    ('altruistic', 'mean_reputation', 0.7),
    ('altruistic', 'detached_fraction', 0.3),
    ('free_rider', 'leaf_or_detached_fraction', 0.2),
])
def test_check_equilibrium_names_the_violation(policy, field, value):
    payoff = {k: dict(v) for k, v in GOOD_PAYOFF.items()}
    payoff[policy][field] = value
    with pytest.raises(EquilibriumViolation):
        check_equilibrium(payoff)


def test_check_equilibrium_reports_detached_altruists_and_interior_free_riders():
    payoff = {k: dict(v) for k, v in GOOD_PAYOFF.items()}
    payoff['altruistic']['detached_fraction'] = 0.3
    payoff['free_rider']['leaf_or_detached_fraction'] = 0.2
    with pytest.raises(EquilibriumViolation) as excinfo:
        check_equilibrium(payoff)
    assert 'altruistic detached' in str(excinfo.value)
    assert 'leaf-or-detached' in str(excinfo.value)


def fake_log(free_rider_rep: float, free_rider_children: int = 0) -> MetricsLog:
    log = MetricsLog('fake', 1, 1000, source=1)
    log.peers = {1: PeerInfo('altruistic', 'source', 0), 2: PeerInfo('altruistic', 'subscriber', 0),
                 3: PeerInfo('free_rider', 'subscriber', 0)}
    log.final_reputation = {2: 0.9, 3: free_rider_rep}
    log.final_parents = {1: None, 2: 1, 3: 2}
    log.final_children = {1: 1, 2: 1, 3: free_rider_children}
    return log


def test_equilibrium_exit_codes(tmp_path, monkeypatch, tiny_scenario):
    monkeypatch.setattr(harness_cli, 'run_scenario', lambda spec: fake_log(0.01))
    assert cmd_equilibrium(str(tmp_path / 'ok'), tiny_scenario) == EXIT_OK
    assert (tmp_path / 'ok' / 'payoff.csv').exists()

    monkeypatch.setattr(harness_cli, 'run_scenario', lambda spec: fake_log(0.95))
    assert cmd_equilibrium(str(tmp_path / 'bad'), tiny_scenario) == EXIT_EQUILIBRIUM


def test_equilibrium_fails_when_free_riders_keep_children(tmp_path, monkeypatch, tiny_scenario):
    monkeypatch.setattr(harness_cli, 'run_scenario', lambda spec: fake_log(0.01, free_rider_children=1))
    assert cmd_equilibrium(str(tmp_path / 'interior'), tiny_scenario) == EXIT_EQUILIBRIUM
