"""Primal-dual k-server simulation on hierarchically well-separated trees."""

from __future__ import annotations

from .errors import KServerError
from .metric import FiniteMetric, generate_metric, parse_metric, serialize_metric, validate_metric

__all__ = [
    "FiniteMetric",
    "KServerError",
    "generate_metric",
    "parse_metric",
    "serialize_metric",
    "validate_metric",
]

__version__ = "0.1.0"
