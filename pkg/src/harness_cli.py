"""
RepStream - Experiment Harness
Command-line entry point: runs scenarios, writes metrics, and executes the
alpha-decay and equilibrium experiments
"""

import os
import sys
import logging
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from src import config
from src.errors import EquilibriumViolation, ScenarioError, SimulationAbort
from src.metrics import (
    MetricsLog, write_alpha_sweep_csv, write_payoff_csv, write_run_outputs,
    write_summary_json,
)
from src.reputation_engine import decay_curve
from src.scenario import ScenarioSpec, load_scenario
from src.simnet import Simulator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORT = 3
EXIT_EQUILIBRIUM = 4

EQUILIBRIUM_SCENARIO = os.path.join(config.SCENARIOS_DIR, 'equilibrium.json')
DEFAULT_ALPHAS = (0.5e-4, 1.0e-4, 2.0e-4, 4.0e-4)

# Bounds checked by the equilibrium experiment (regression pins from the reference run)
EQUILIBRIUM_PINS = {
    'free_rider_mean_below': 0.1,
    'altruistic_mean_above': 0.8,
    'free_rider_leaf_or_detached_at_least': 0.9,
}


def scenario_parameters(spec: ScenarioSpec) -> Dict:
    return {
        'name': spec.name,
        'seed': spec.seed,
        'duration_ms': spec.duration_ms,
        'fanout': spec.fanout,
        'alpha': spec.alpha,
        'peers': spec.peers.count,
        'mix': dict(spec.peers.mix),
        'malicious_strategy': spec.peers.malicious_strategy,
        'beacon_period_ms': spec.beacon_period_ms,
        'chunk_period_ms': spec.chunk_period_ms,
        'join_timeout_ms': spec.join_timeout_ms,
        'keepalive_timeout_ms': spec.keepalive_timeout_ms,
        'latency_mode': spec.latency.mode,
        'drop_probability': spec.drop_probability,
    }


def run_scenario(spec: ScenarioSpec) -> MetricsLog:
    return Simulator(spec).run()


# ===========================
# Free-rider closed form
# ===========================
def free_rider_deviation(log: MetricsLog, alpha: float, initial: float = config.INITIAL_REPUTATION) -> float:
    """
    Largest |simulated - initial * e^(-alpha * (t - t_join))| over every free-rider sample.

    Returns:
        Max absolute deviation; 0.0 when the run has no free rider
    """
    worst = 0.0
    for peer in log.peers_with_policy('free_rider', live_only=False):
        joined = log.peers[peer].joined_at
        series = log.series_of(peer)
        if not series:
            continue
        times = np.array([t - joined for t, _ in series], dtype=float)
        values = np.array([v for _, v in series])
        expected = decay_curve(initial, alpha, times)
        worst = max(worst, float(np.max(np.abs(values - expected))))
    return worst


# ===========================
# Equilibrium ordering
# ===========================
def check_equilibrium(summary: Mapping[str, Mapping[str, float]], pins: Mapping[str, float] = EQUILIBRIUM_PINS):
    """
    Check the payoff ordering altruistic > malicious >= free rider, every altruist
    attached, and free riders pushed to the leaves.

    Raises:
        EquilibriumViolation: lists every violated ordering or bound
    """
    violations = []
    altruistic = summary.get('altruistic')
    malicious = summary.get('malicious')
    free_rider = summary.get('free_rider')

    if altruistic and malicious and not altruistic['mean_reputation'] > malicious['mean_reputation']:
        violations.append(f"altruistic mean {altruistic['mean_reputation']:.4f} "
                          f"<= malicious mean {malicious['mean_reputation']:.4f}")
    if malicious and free_rider and not malicious['mean_reputation'] >= free_rider['mean_reputation']:
        violations.append(f"malicious mean {malicious['mean_reputation']:.4g} "
                          f"< free-rider mean {free_rider['mean_reputation']:.4g}")
    if altruistic and malicious and not altruistic['inclusion_fraction'] > malicious['inclusion_fraction']:
        violations.append(f"altruistic inclusion {altruistic['inclusion_fraction']:.3f} "
                          f"<= malicious inclusion {malicious['inclusion_fraction']:.3f}")
    if free_rider and not free_rider['mean_reputation'] < pins['free_rider_mean_below']:
        violations.append(f"free-rider mean {free_rider['mean_reputation']:.4f} "
                          f">= {pins['free_rider_mean_below']}")
    if altruistic and not altruistic['mean_reputation'] > pins['altruistic_mean_above']:
        violations.append(f"altruistic mean {altruistic['mean_reputation']:.4f} "
                          f"<= {pins['altruistic_mean_above']}")
    if altruistic and altruistic['detached_fraction'] != 0:
        violations.append(f"altruistic detached fraction {altruistic['detached_fraction']:.3f} != 0")
    if free_rider and not free_rider['leaf_or_detached_fraction'] >= pins['free_rider_leaf_or_detached_at_least']:
        violations.append(f"free-rider leaf-or-detached fraction {free_rider['leaf_or_detached_fraction']:.3f} "
                          f"< {pins['free_rider_leaf_or_detached_at_least']}")

    if violations:
        raise EquilibriumViolation("; ".join(violations))


# ===========================
# Commands
# ===========================
def cmd_run(scenario_path: str, out_dir: str, seed: Optional[int] = None,
            duration_ms: Optional[int] = None) -> int:
    """Run one scenario and write metrics.csv, topology.csv and summary.json."""
    try:
        spec = load_scenario(scenario_path).with_overrides(seed, duration_ms)
    except ScenarioError as e:
        logger.error(f"✗ {e}")
        return EXIT_INVALID
    try:
        log = run_scenario(spec)
    except SimulationAbort as e:
        logger.error(f"✗ {e}")
        return EXIT_ABORT
    write_run_outputs(log, out_dir, scenario_parameters(spec))
    return EXIT_OK


def cmd_alpha_sweep(alphas: Sequence[float], out_dir: str, horizon_ms: int = config.DEFAULT_DURATION_MS,
                    step_ms: int = config.SAMPLE_PERIOD_MS, scenario_path: Optional[str] = None,
                    seed: Optional[int] = None, duration_ms: Optional[int] = None) -> int:
    """
    Write the free-rider decay family 0.5 * e^(-alpha * t), one curve per alpha.

    With a scenario, also run it and compare its free riders with the closed form.
    """
    alphas = list(alphas)
    if not alphas or any(a <= 0 for a in alphas) or alphas != sorted(alphas) or len(set(alphas)) != len(alphas):
        logger.error(f"✗ alphas must be positive and strictly ascending, got {alphas}")
        return EXIT_INVALID
    if horizon_ms <= 0 or step_ms <= 0:
        logger.error("✗ horizon and step must be > 0")
        return EXIT_INVALID

    times = np.arange(0, horizon_ms + 1, step_ms, dtype=float)
    curves = {alpha: decay_curve(config.INITIAL_REPUTATION, alpha, times) for alpha in alphas}
    for lower, higher in zip(alphas, alphas[1:]):
        if not np.all(curves[higher][1:] < curves[lower][1:]):
            logger.error(f"✗ curve for alpha={higher} is not below alpha={lower}")
            return EXIT_ABORT

    os.makedirs(out_dir, exist_ok=True)
    write_alpha_sweep_csv(curves, times, os.path.join(out_dir, 'alpha_sweep.csv'))
    logger.info(f"✓ {len(alphas)} decay curves over {horizon_ms} ms")

    if scenario_path:
        try:
            spec = load_scenario(scenario_path).with_overrides(seed, duration_ms)
        except ScenarioError as e:
            logger.error(f"✗ {e}")
            return EXIT_INVALID
        try:
            log = run_scenario(spec)
        except SimulationAbort as e:
            logger.error(f"✗ {e}")
            return EXIT_ABORT
        deviation = free_rider_deviation(log, spec.alpha)
        summary = write_run_outputs(log, out_dir, scenario_parameters(spec),
                                    {'free_rider_max_abs_deviation_below': 1e-9})
        summary['free_rider_max_abs_deviation'] = deviation
        write_summary_json(summary, os.path.join(out_dir, 'summary.json'))
        logger.info(f"Free-rider deviation from closed form: {deviation:.3e}")
    return EXIT_OK


def cmd_equilibrium(out_dir: str, scenario_path: str = EQUILIBRIUM_SCENARIO,
                    seed: Optional[int] = None, duration_ms: Optional[int] = None) -> int:
    """Run the mixed-population scenario and check the payoff ordering."""
    try:
        spec = load_scenario(scenario_path).with_overrides(seed, duration_ms)
    except ScenarioError as e:
        logger.error(f"✗ {e}")
        return EXIT_INVALID
    try:
        log = run_scenario(spec)
    except SimulationAbort as e:
        logger.error(f"✗ {e}")
        return EXIT_ABORT

    summary = write_run_outputs(log, out_dir, scenario_parameters(spec), EQUILIBRIUM_PINS)
    payoff = summary['payoff_summary']
    write_payoff_csv(payoff, os.path.join(out_dir, 'payoff.csv'))
    _print_payoff(payoff)
    try:
        check_equilibrium(payoff)
    except EquilibriumViolation as e:
        logger.error(f"✗ Equilibrium ordering violated: {e}")
        return EXIT_EQUILIBRIUM
    logger.info("✓ altruistic > malicious >= free rider")
    return EXIT_OK


def cmd_validate(scenario_path: str) -> int:
    try:
        spec = load_scenario(scenario_path)
    except ScenarioError as e:
        logger.error(f"✗ {e}")
        return EXIT_INVALID
    logger.info(f"✓ {scenario_path} is valid ({spec.total_peers()} peers in total)")
    return EXIT_OK


def _print_payoff(payoff: Mapping[str, Mapping[str, float]]):
    logger.info("=" * 60)
    logger.info("Payoff per policy")
    for policy in sorted(payoff):
        row = payoff[policy]
        logger.info(f"  {policy:12s} n={row['count']:3d}  rep={row['mean_reputation']:.4f}  "
                    f"included={row['inclusion_fraction']:.3f}  detached={row['detached_fraction']:.3f}  "
                    f"expelled={row['expelled_fraction']:.3f}")
    logger.info("=" * 60)


# ===========================
# Entry point
# ===========================
def _parse_alphas(text: str) -> List[float]:
    return [float(part) for part in text.split(',') if part.strip()]


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(
        prog='repstream',
        description='Reputation-driven P2P live-streaming simulator'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, scenario_required: bool):
        p.add_argument('--scenario', required=scenario_required, help='Scenario JSON file')
        p.add_argument('--out', default=config.RESULTS_DIR, help='Output directory')
        p.add_argument('--seed', type=int, default=None, help='Override the scenario seed')
        p.add_argument('--duration-ms', type=int, default=None, help='Override the scenario duration')

    common(sub.add_parser('run', help='Run one scenario'), True)

    sweep = sub.add_parser('alpha-sweep', help='Free-rider decay curves per alpha')
    common(sweep, False)
    sweep.add_argument('--alphas', type=_parse_alphas,
                       default=list(DEFAULT_ALPHAS), help='Comma-separated alphas in 1/ms, ascending')
    sweep.add_argument('--horizon-ms', type=int, default=config.DEFAULT_DURATION_MS)

    common(sub.add_parser('equilibrium', help='Mixed-population payoff experiment'), False)

    validate = sub.add_parser('validate', help='Validate a scenario without running it')
    validate.add_argument('--scenario', required=True, help='Scenario JSON file')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT, stream=sys.stderr)
    args = build_parser().parse_args(argv)

    if args.command == 'run':
        return cmd_run(args.scenario, args.out, args.seed, args.duration_ms)
    if args.command == 'alpha-sweep':
        return cmd_alpha_sweep(args.alphas, args.out, args.horizon_ms,
                               scenario_path=args.scenario, seed=args.seed, duration_ms=args.duration_ms)
    if args.command == 'equilibrium':
        return cmd_equilibrium(args.out, args.scenario or EQUILIBRIUM_SCENARIO, args.seed, args.duration_ms)
    return cmd_validate(args.scenario)


if __name__ == '__main__':
    sys.exit(main())
