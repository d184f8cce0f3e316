"""
Probe-vehicle count estimation services.
Kalman filtering, interval scheduling, simulation, sampling and evaluation.
"""
