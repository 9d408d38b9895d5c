"""Membership-inference risk in pruned networks: training, pruning, attacks and defenses."""

__version__ = "0.1.0"
