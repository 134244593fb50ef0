"""Pragma infilling for HLS kernels: corpus synthesis, program graphs,
latency-weighted sequence training, and an analytic latency oracle."""

__version__ = "0.1.0"
