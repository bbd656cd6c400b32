"""
RepStream - Launcher
Run from the repository root: python repstream.py <run|alpha-sweep|equilibrium|validate> ...
"""

import sys

from src.harness_cli import main

if __name__ == '__main__':
    sys.exit(main())
