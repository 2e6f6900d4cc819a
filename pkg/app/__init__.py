"""Command-line entry point and the experiment matrix."""
