"""
RepStream - Configuration Settings
Centralized defaults for the protocol engine, the simulator and the harness
"""

import os
import math
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# ===========================
# Logging Configuration
# ===========================
# Diagnostic verbosity on stderr: error, info, debug
REPSTREAM_LOG = os.getenv('REPSTREAM_LOG', 'info').lower()

_LOG_LEVELS = {
    'error': 'ERROR',
    'info': 'INFO',
    'debug': 'DEBUG',
}
LOG_LEVEL = _LOG_LEVELS.get(REPSTREAM_LOG, 'INFO')

# Log format
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# ===========================
# Run Defaults
# ===========================
DEFAULT_SEED = int(os.getenv('REPSTREAM_SEED', 42))
DEFAULT_DURATION_MS = int(os.getenv('REPSTREAM_DURATION_MS', 120000))

# Peers joining at scenario start are spread over this window
JOIN_SPREAD_MS = int(os.getenv('REPSTREAM_JOIN_SPREAD_MS', 2000))

# ===========================
# Reputation Configuration
# ===========================
# Reputation kept per second of silence (e^(-alpha * 1000))
DECAY_PER_SECOND = float(os.getenv('REPSTREAM_DECAY_PER_SECOND', 0.9))

# Decay factor in 1/ms
DEFAULT_ALPHA = -math.log(DECAY_PER_SECOND) / 1000.0

# Every peer enters the network with the same reputation
INITIAL_REPUTATION = 0.5

# The source is pinned and never decays
SOURCE_REPUTATION = 1.0

# Copies of each reputation record in the reputation layer
REPLICAS = 3

# Reporter log kept with each record
REPORTER_LOG_CAPACITY = 32

# Audit of children's reports
AUDIT_TOLERANCE = float(os.getenv('REPSTREAM_AUDIT_TOLERANCE', 0.2))
AUDIT_PENALTY = float(os.getenv('REPSTREAM_AUDIT_PENALTY', 0.1))

# Peers below this reputation count as expelled in the payoff summary
EXPULSION_THRESHOLD = float(os.getenv('REPSTREAM_EXPULSION_THRESHOLD', 0.1))

# ===========================
# Protocol Timers (milliseconds)
# ===========================
BEACON_PERIOD_MS = int(os.getenv('REPSTREAM_BEACON_PERIOD_MS', 1000))
CHUNK_PERIOD_MS = int(os.getenv('REPSTREAM_CHUNK_PERIOD_MS', 100))
JOIN_TIMEOUT_MS = int(os.getenv('REPSTREAM_JOIN_TIMEOUT_MS', 2000))
KEEPALIVE_PERIOD_MS = int(os.getenv('REPSTREAM_KEEPALIVE_PERIOD_MS', 1000))
KEEPALIVE_TIMEOUT_MS = int(os.getenv('REPSTREAM_KEEPALIVE_TIMEOUT_MS', 3000))
PARENT_TIMEOUT_MS = int(os.getenv('REPSTREAM_PARENT_TIMEOUT_MS', 2500))
CLIMB_PERIOD_MS = int(os.getenv('REPSTREAM_CLIMB_PERIOD_MS', 5000))
TABLE_EXCHANGE_PERIOD_MS = int(os.getenv('REPSTREAM_TABLE_EXCHANGE_PERIOD_MS', 5000))
AUDIT_PERIOD_MS = int(os.getenv('REPSTREAM_AUDIT_PERIOD_MS', 1000))
QUERY_TIMEOUT_MS = int(os.getenv('REPSTREAM_QUERY_TIMEOUT_MS', 500))
SAMPLE_PERIOD_MS = int(os.getenv('REPSTREAM_SAMPLE_PERIOD_MS', 1000))

# RepUpdate for the parent after this many received chunks
REPORT_EVERY_CHUNKS = int(os.getenv('REPSTREAM_REPORT_EVERY_CHUNKS', 10))

# Join attempts against one target before falling back
MAX_JOIN_ATTEMPTS = 2

# Grandparent must beat the parent by this much before a climb
CLIMB_MARGIN = float(os.getenv('REPSTREAM_CLIMB_MARGIN', 0.05))

# ===========================
# Overlay Tables
# ===========================
FANOUT = int(os.getenv('REPSTREAM_FANOUT', 4))
RT_CAPACITY = 120
NT_CAPACITY = 16

# RT entries offered per table exchange, besides the whole NT
EXCHANGE_RT_ENTRIES = 8
BRT_CAPACITY = 3
BPT_GRANDPARENTS = 4
BPT_SIBLINGS = 8

# Beacon consistency window, in beacon periods
BRT_WINDOW_BEACONS = 10

# ===========================
# Network Model
# ===========================
LATENCY_LO_MS = int(os.getenv('REPSTREAM_LATENCY_LO_MS', 10))
LATENCY_HI_MS = int(os.getenv('REPSTREAM_LATENCY_HI_MS', 50))

# Robustness experiments only; the default network is lossless
DROP_PROBABILITY = float(os.getenv('REPSTREAM_DROP_PROBABILITY', 0.0))

# ===========================
# File Paths
# ===========================
SCENARIOS_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'scenarios')
RESULTS_DIR = os.getenv('REPSTREAM_RESULTS_DIR', 'results')


# ===========================
# Validation
# ===========================
def validate_config():
    """Validate configuration settings"""
    errors = []

    if REPSTREAM_LOG not in _LOG_LEVELS:
        errors.append(f"REPSTREAM_LOG must be one of {sorted(_LOG_LEVELS)}, got {REPSTREAM_LOG}")

    if not 0 < DECAY_PER_SECOND < 1:
        errors.append(f"DECAY_PER_SECOND must be in (0, 1), got {DECAY_PER_SECOND}")

    if FANOUT < 1:
        errors.append(f"FANOUT must be >= 1, got {FANOUT}")

    if LATENCY_LO_MS < 1 or LATENCY_HI_MS < LATENCY_LO_MS:
        errors.append(f"Latency range must satisfy 1 <= lo <= hi, got [{LATENCY_LO_MS}, {LATENCY_HI_MS}]")

    if not 0 <= DROP_PROBABILITY < 1:
        errors.append(f"DROP_PROBABILITY must be in [0, 1), got {DROP_PROBABILITY}")

    if not 0 <= AUDIT_TOLERANCE <= 1:
        errors.append(f"AUDIT_TOLERANCE must be between 0 and 1, got {AUDIT_TOLERANCE}")

    for name, value in (('BEACON_PERIOD_MS', BEACON_PERIOD_MS), ('CHUNK_PERIOD_MS', CHUNK_PERIOD_MS),
                        ('JOIN_TIMEOUT_MS', JOIN_TIMEOUT_MS), ('KEEPALIVE_TIMEOUT_MS', KEEPALIVE_TIMEOUT_MS),
                        ('TABLE_EXCHANGE_PERIOD_MS', TABLE_EXCHANGE_PERIOD_MS),
                        ('REPORT_EVERY_CHUNKS', REPORT_EVERY_CHUNKS)):
        if value <= 0:
            errors.append(f"{name} must be > 0, got {value}")

    if errors:
        raise ValueError(f"Configuration errors:\n" + "\n".join(errors))

# Run validation on import
validate_config()


# ===========================
# Helper Functions
# ===========================
def get_config_summary():
    """Return a summary of current configuration"""
    return {
        'Log level': LOG_LEVEL,
        'Seed': DEFAULT_SEED,
        'Duration (ms)': DEFAULT_DURATION_MS,
        'Fan-out': FANOUT,
        'Alpha (1/ms)': f"{DEFAULT_ALPHA:.6e}",
        'Beacon period (ms)': BEACON_PERIOD_MS,
        'Chunk period (ms)': CHUNK_PERIOD_MS,
        'Join timeout (ms)': JOIN_TIMEOUT_MS,
        'Latency (ms)': f"{LATENCY_LO_MS}-{LATENCY_HI_MS}",
    }

if __name__ == '__main__':
    print("RepStream - Configuration Summary")
    print("=" * 50)
    for key, value in get_config_summary().items():
        print(f"{key:20s}: {value}")
    print("=" * 50)
    print(f"Scenarios directory: {SCENARIOS_DIR}")
    print(f"Results directory: {RESULTS_DIR}")
