"""
RepStream - System Check Script
Quick installation check: packages, layout, configuration and a short run
"""

import os
import sys
import time
from typing import Tuple

# Colors for output
class Colors:
    GREEN = '\033[92m'
    RED = '\033[91m'
    YELLOW = '\033[93m'
    BLUE = '\033[94m'
    END = '\033[0m'

def print_test(name: str):
    """Print test header"""
    print(f"\n{Colors.BLUE}[TEST]{Colors.END} {name}...")

def print_success(message: str):
    print(f"  {Colors.GREEN}✓{Colors.END} {message}")

def print_error(message: str):
    print(f"  {Colors.RED}✗{Colors.END} {message}")

def print_warning(message: str):
    print(f"  {Colors.YELLOW}⚠{Colors.END} {message}")

def check_imports() -> Tuple[bool, str]:
    """Check that the required packages are installed"""
    print_test("Checking Python packages")

    required_packages = {
        'numpy': 'numpy',
        'simpy': 'simpy',
        'dotenv': 'python-dotenv',
        'pytest': 'pytest',
    }

    missing = []
    for module, package in required_packages.items():
        try:
            __import__(module)
            print_success(f"{package} installed")
        except ImportError:
            print_error(f"{package} missing")
            missing.append(package)

    if missing:
        return False, f"Missing packages: {', '.join(missing)}"
    return True, "All packages installed"

def check_directories() -> Tuple[bool, str]:
    """Check the project layout"""
    print_test("Checking directory structure")

    missing = []
    for dir_path in ['src', 'scenarios', 'docs']:
        if os.path.exists(dir_path):
            print_success(f"{dir_path}/ exists")
        else:
            print_error(f"{dir_path}/ missing")
            missing.append(dir_path)

    if missing:
        return False, f"Missing directories: {', '.join(missing)}"
    return True, "All directories present"

def check_config() -> Tuple[bool, str]:
    """Load and print the configuration"""
    print_test("Testing configuration")

    try:
        from src.config import get_config_summary

        for key, value in get_config_summary().items():
            print_success(f"{key}: {value}")
        return True, "Configuration loaded"
    except Exception as e:
        return False, f"Config error: {e}"

def check_scenarios() -> Tuple[bool, str]:
    """Validate every shipped scenario"""
    print_test("Validating scenarios")

    try:
        from src.config import SCENARIOS_DIR
        from src.scenario import load_scenario

        files = sorted(f for f in os.listdir(SCENARIOS_DIR) if f.endswith('.json'))
        for name in files:
            spec = load_scenario(os.path.join(SCENARIOS_DIR, name))
            print_success(f"{name}: {spec.total_peers()} peers, {spec.duration_ms} ms")
        if not files:
            print_warning("No scenario files found")
        return True, f"{len(files)} scenarios valid"
    except Exception as e:
        return False, f"Scenario error: {e}"

def check_quick_run() -> Tuple[bool, str]:
    """Run a short simulation end to end"""
    print_test("Running a 5 s simulation")

    try:
        from src.scenario import PeerPopulation, ScenarioSpec
        from src.simnet import run

        start = time.time()
        log = run(ScenarioSpec(name='system-check', duration_ms=5000, seed=1,
                               peers=PeerPopulation(10, {'altruistic': 1.0})))
        attached = sum(1 for p in log.peers_with_policy('altruistic') if log.attached(p))
        print_success(f"{attached}/10 peers attached in {time.time() - start:.2f}s")
        print_success(f"Trace hash: {log.trace_hash[:16]}")
        return True, "Simulator working"
    except Exception as e:
        return False, f"Simulator error: {e}"

def main():
    """Run all checks"""
    print("=" * 60)
    print(f"{Colors.BLUE}RepStream - System Check{Colors.END}")
    print("=" * 60)

    checks = [
        ("Import Check", check_imports),
        ("Directory Structure", check_directories),
        ("Configuration", check_config),
        ("Scenarios", check_scenarios),
        ("Quick Run", check_quick_run),
    ]

    results = []
    for name, check in checks:
        try:
            success, message = check()
            results.append((name, success, message))
        except Exception as e:
            results.append((name, False, str(e)))

    print("\n" + "=" * 60)
    print(f"{Colors.BLUE}Check Summary{Colors.END}")
    print("=" * 60)

    passed = sum(1 for _, success, _ in results if success)
    total = len(results)

    for name, success, message in results:
        status = f"{Colors.GREEN}PASS{Colors.END}" if success else f"{Colors.RED}FAIL{Colors.END}"
        print(f"{status} - {name}: {message}")

    print("\n" + "=" * 60)
    print(f"Results: {passed}/{total} checks passed")
    print("=" * 60)

    if passed == total:
        print(f"\n{Colors.GREEN}✓ All checks passed! System is ready.{Colors.END}")
        print("\nNext steps:")
        print("  1. Run: python repstream.py run --scenario scenarios/default_50.json")
        print("  2. Run: python repstream.py equilibrium")
        print("  3. Run: pytest")
        return 0
    else:
        print(f"\n{Colors.YELLOW}⚠ Some checks failed. See errors above.{Colors.END}")
        return 1

if __name__ == '__main__':
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print(f"\n\n{Colors.YELLOW}Checks interrupted by user{Colors.END}")
        sys.exit(1)
