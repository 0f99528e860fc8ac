"""Experiment configuration, drivers and command-line interface."""
