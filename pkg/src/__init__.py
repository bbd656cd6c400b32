"""
RepStream
Reputation-driven P2P live-streaming protocol engine and deterministic simulation harness
"""

__version__ = '1.0.0'
__author__ = 'RepStream Team'
