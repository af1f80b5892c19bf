"""Metrics, pipeline orchestration and the command-line interface."""
