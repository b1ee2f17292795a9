"""Few-shot continual learning lab: two-step fast/slow weight consolidation."""

__version__ = "0.1.0"
