"""Rank-based structured filter pruning for Siamese trackers, with a small numpy inference engine."""

__version__ = "0.1.0"
