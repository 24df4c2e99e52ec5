"""Deterministic mini MapReduce over a simulated replicated block store,
with sky-catalog pair workloads and Amdahl-number balance accounting."""

__version__ = "0.1.0"
