"""Just-in-time adaptive interventions for urban heat and noise.

Ingestion store, threshold and personalized trigger logic, notification
budgeting and dispatch, cohort simulation and hexagon density maps.
"""

from .domain import (
    LabelKind,
    Mechanism,
    MicroSurveyResponse,
    NotificationRecord,
    PhaseConfig,
    PreferenceLabel,
    SensorSample,
    TriggerConfig,
    TriggerEvent,
    WeatherObservation,
    validate,
)
from .store import StreamKey, TimeSeriesStore
from .triggers import Engine

__all__ = [
    "Engine",
    "LabelKind",
    "Mechanism",
    "MicroSurveyResponse",
    "NotificationRecord",
    "PhaseConfig",
    "PreferenceLabel",
    "SensorSample",
    "StreamKey",
    "TimeSeriesStore",
    "TriggerConfig",
    "TriggerEvent",
    "WeatherObservation",
    "validate",
]
