"""Pre-training event-based hand pose estimators from RGB images via
iterative pseudo-event construction."""

__version__ = "0.1.0"
