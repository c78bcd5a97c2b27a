"""Contextual-MDP laboratory: exact task metrics, value-bound audits and the ZeUS learner."""

__version__ = "0.1.0"
