"""Cooperative multi-vehicle control with Shapley credit assignment, belief
filtering and decentralized actor-critic learning."""

__version__ = "0.1.0"
