"""Deterministic simulation harness: virtual clock, latency model, workloads and runs.

Import submodules explicitly, e.g. ``from edge_dedup.simnet.network import Network``.
"""
