"""Experiment harness: desk corpus, metrics, pipelines, reports and CLI."""
