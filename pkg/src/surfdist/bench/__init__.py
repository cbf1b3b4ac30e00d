"""Benchmark harness: datasets, training, evaluation, visualizations and ablations."""
from surfdist.bench.config import RunConfig, load_config
from surfdist.bench.report import EvalReport

__all__ = ["EvalReport", "RunConfig", "load_config"]
