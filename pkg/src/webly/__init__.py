"""Webly supervised learning toolkit.

Trains classifiers from noisy web-crawled bags plus a small clean corpus:
oracle-driven noise-transition estimation, a transition-modulated
class-weighted cross-entropy, and a two-stage train-on-web / fine-tune-on-clean
pipeline, with a full metrics suite.
"""

__version__ = "0.1.0"
