"""Option tracing: predicting the exact multiple-choice option a student
selects, and clustering incorrect options into shared-error groups."""

__version__ = "0.1.0"
