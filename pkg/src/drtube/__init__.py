"""Data-driven distributionally robust tube MPC with Wasserstein DR-CVaR constraints."""

__version__ = "0.1.0"
