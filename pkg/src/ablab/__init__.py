"""Delayed-reaction hidden-variable model: simulation and time-tag analysis."""

__version__ = "0.1.0"

from .hvcore import DetectionModel, ModelKind, ParameterError  # noqa: E402,F401
