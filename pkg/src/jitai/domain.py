"""Core vocabulary: records, labels, configs and record validation.

Every tunable constant of the intervention protocol lives in
:class:`TriggerConfig` or :class:`PhaseConfig`; other modules read them from
there instead of hard-coding numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Union
from zoneinfo import ZoneInfo

UTC = timezone.utc


class LabelKind(str, Enum):
    THERMAL = "thermal"
    NOISE = "noise"


NO_CHANGE = "no_change"

# Fixed class order; feature vectors and probability vectors follow it.
CLASS_ORDER: dict[LabelKind, tuple[str, ...]] = {
    LabelKind.THERMAL: ("prefer_cooler", NO_CHANGE, "prefer_warmer"),
    LabelKind.NOISE: ("prefer_quieter", NO_CHANGE, "prefer_louder"),
}


class LabelError(ValueError):
    """Unknown label string for a closed label set."""


@dataclass(frozen=True)
class PreferenceLabel:
    kind: LabelKind
    value: str

    def __post_init__(self) -> None:
        kind = LabelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.value not in CLASS_ORDER[kind]:
            raise LabelError(f"unknown {kind.value} label {self.value!r}")

    @classmethod
    def parse(cls, kind: LabelKind | str, text: str) -> PreferenceLabel:
        try:
            kind = LabelKind(kind)
        except ValueError as exc:
            raise LabelError(f"unknown label kind {kind!r}") from exc
        return cls(kind, text)

    @property
    def index(self) -> int:
        return CLASS_ORDER[self.kind].index(self.value)

    @property
    def is_no_change(self) -> bool:
        return self.value == NO_CHANGE

    def __str__(self) -> str:
        return f"{self.kind.value}.{self.value}"


def thermal(value: str) -> PreferenceLabel:
    return PreferenceLabel(LabelKind.THERMAL, value)


def noise(value: str) -> PreferenceLabel:
    return PreferenceLabel(LabelKind.NOISE, value)


class SoundSource(str, Enum):
    TRAFFIC = "traffic"
    TALKING = "talking"
    WEATHER = "weather"
    OTHER = "other"


class SensorKind(str, Enum):
    SOUND_LEVEL = "sound_level"  # dBA, 30-minute LAeq
    HEART_RATE = "heart_rate"  # bpm
    RESTING_HEART_RATE = "resting_heart_rate"  # bpm
    STEP_COUNT = "step_count"
    WALKING_DISTANCE = "walking_distance"  # m
    STAND_TIME = "stand_time"  # min
    OXYGEN_SATURATION = "oxygen_saturation"  # fraction


class Mechanism(str, Enum):
    THRESHOLD = "threshold"
    PERSONALIZED = "personalized"


class CauseKind(str, Enum):
    TEMPERATURE = "temperature"
    SOUND_LEVEL = "sound_level"
    PROBABILITY = "probability"


class DeliveryStatus(str, Enum):
    SENT = "sent"
    SUPPRESSED = "suppressed"


class SuppressReason(str, Enum):
    OUTSIDE_WINDOW = "outside_window"
    WEEKEND = "weekend"
    BUDGET_EXHAUSTED = "budget_exhausted"
    DISPATCH_ERROR = "dispatch_error"


class Phase(str, Enum):
    PHASE1 = "phase1"
    PHASE2 = "phase2"


@dataclass(frozen=True)
class MicroSurveyResponse:
    participant: str
    started_at: datetime
    ended_at: datetime
    lat: float
    lon: float
    location_acquired_at: datetime
    thermal: PreferenceLabel
    noise: PreferenceLabel
    sound_source: SoundSource | None = None

    def __post_init__(self) -> None:
        if isinstance(self.sound_source, str) and not isinstance(self.sound_source, SoundSource):
            object.__setattr__(self, "sound_source", SoundSource(self.sound_source))

    @property
    def timestamp(self) -> datetime:
        return self.ended_at

    def label(self, kind: LabelKind) -> PreferenceLabel:
        return self.thermal if kind is LabelKind.THERMAL else self.noise


@dataclass(frozen=True)
class SensorSample:
    participant: str
    kind: SensorKind
    value: float
    observed_at: datetime

    @property
    def timestamp(self) -> datetime:
        return self.observed_at


@dataclass(frozen=True)
class WeatherObservation:
    station_id: str
    station_lat: float
    station_lon: float
    air_temperature: float
    observed_at: datetime
    rainfall: float | None = None

    @property
    def timestamp(self) -> datetime:
        return self.observed_at


@dataclass(frozen=True)
class TriggerConfig:
    temp_threshold_c: float = 30.0
    noise_threshold_dba: float = 70.0
    daily_budget: int = 4
    window_start_hour: int = 9
    window_end_hour: int = 19
    weekdays_only: bool = True
    weather_poll_interval: timedelta = timedelta(minutes=5)
    timezone: str = "Asia/Singapore"

    def __post_init__(self) -> None:
        if self.daily_budget < 0:
            raise ValueError("daily_budget must be >= 0")
        if not 0 <= self.window_start_hour < self.window_end_hour <= 24:
            raise ValueError("window_start_hour must precede window_end_hour")
        if self.weather_poll_interval <= timedelta(0):
            raise ValueError("weather_poll_interval must be positive")
        ZoneInfo(self.timezone)

    @property
    def tz(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)

    def local(self, t: datetime) -> datetime:
        return t.astimezone(self.tz)

    def to_dict(self) -> dict:
        return {
            "temp_threshold_c": self.temp_threshold_c,
            "noise_threshold_dba": self.noise_threshold_dba,
            "daily_budget": self.daily_budget,
            "window_start_hour": self.window_start_hour,
            "window_end_hour": self.window_end_hour,
            "weekdays_only": self.weekdays_only,
            "weather_poll_interval_s": int(self.weather_poll_interval.total_seconds()),
            "timezone": self.timezone,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TriggerConfig:
        data = dict(data)
        if "weather_poll_interval_s" in data:
            data["weather_poll_interval"] = timedelta(
                seconds=data.pop("weather_poll_interval_s")
            )
        return cls(**data)


@dataclass(frozen=True)
class PhaseConfig:
    phase: Phase = Phase.PHASE2
    personalization_switch_count: int = 50
    survey_quota: int = 100
    # Phase 1 only: hold threshold messages until the switch count is reached.
    threshold_after_switch: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase", Phase(self.phase))
        if not 0 < self.personalization_switch_count <= self.survey_quota:
            raise ValueError(
                "personalization_switch_count must be in (0, survey_quota]"
            )

    def to_dict(self) -> dict:
        return {
            "phase": self.phase.value,
            "personalization_switch_count": self.personalization_switch_count,
            "survey_quota": self.survey_quota,
            "threshold_after_switch": self.threshold_after_switch,
        }


@dataclass(frozen=True)
class TriggerEvent:
    participant: str
    kind: LabelKind
    mechanism: Mechanism
    target_label: PreferenceLabel
    fired_at: datetime
    cause_kind: CauseKind
    cause_value: float
    location: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.target_label.kind is not self.kind:
            raise ValueError("target_label kind does not match event kind")
        if self.mechanism is Mechanism.PERSONALIZED:
            if self.target_label.is_no_change:
                raise ValueError("personalized events never target no_change")
            if self.cause_kind is not CauseKind.PROBABILITY or not (
                0.0 < self.cause_value <= 1.0
            ):
                raise ValueError("personalized cause must be a probability in (0, 1]")
        elif self.cause_kind is CauseKind.PROBABILITY:
            raise ValueError("threshold cause must be a measured value")


@dataclass(frozen=True)
class NotificationRecord:
    event: TriggerEvent
    payload_text: str
    status: DeliveryStatus
    sequence_in_day: int | None = None
    reason: SuppressReason | None = None

    @property
    def participant(self) -> str:
        return self.event.participant

    @property
    def timestamp(self) -> datetime:
        return self.event.fired_at

    @property
    def sent(self) -> bool:
        return self.status is DeliveryStatus.SENT


Record = Union[MicroSurveyResponse, SensorSample, WeatherObservation]


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


class ValidationError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


_SENSOR_RANGES: dict[SensorKind, tuple[float, float, bool]] = {
    # (low, high, closed)
    SensorKind.SOUND_LEVEL: (0.0, 140.0, True),
    SensorKind.HEART_RATE: (20.0, 250.0, False),
    SensorKind.RESTING_HEART_RATE: (20.0, 250.0, False),
    SensorKind.OXYGEN_SATURATION: (0.0, 1.0, True),
}


def _check_time(name: str, value: object, out: list[Violation]) -> bool:
    if not isinstance(value, datetime):
        out.append(Violation(name, "not a timestamp"))
        return False
    if value.tzinfo is None or value.utcoffset() is None:
        out.append(Violation(name, "timestamp must be timezone-aware"))
        return False
    return True


def _finite(name: str, value: object, out: list[Violation]) -> bool:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        out.append(Violation(name, "not a number"))
        return False
    if not math.isfinite(value):
        out.append(Violation(name, "not finite"))
        return False
    return True


def _check_coords(prefix: str, lat: object, lon: object, out: list[Violation]) -> None:
    if _finite(f"{prefix}lat", lat, out) and not -90.0 <= lat <= 90.0:
        out.append(Violation(f"{prefix}lat", "lat out of range"))
    if _finite(f"{prefix}lon", lon, out) and not -180.0 <= lon <= 180.0:
        out.append(Violation(f"{prefix}lon", "lon out of range"))


def validate(record: Record) -> list[Violation]:
    """Return every violated invariant of ``record``; an empty list means valid."""
    out: list[Violation] = []
    if isinstance(record, MicroSurveyResponse):
        if not record.participant:
            out.append(Violation("participant", "empty participant id"))
        ok_start = _check_time("started_at", record.started_at, out)
        ok_end = _check_time("ended_at", record.ended_at, out)
        _check_time("location_acquired_at", record.location_acquired_at, out)
        if ok_start and ok_end and record.started_at > record.ended_at:
            out.append(Violation("ended_at", "ended before it started"))
        _check_coords("", record.lat, record.lon, out)
        if record.thermal.kind is not LabelKind.THERMAL:
            out.append(Violation("thermal", "label is not a thermal label"))
        if record.noise.kind is not LabelKind.NOISE:
            out.append(Violation("noise", "label is not a noise label"))
        if record.sound_source is not None and record.noise.is_no_change:
            out.append(Violation("sound_source", "source without distraction"))
    elif isinstance(record, SensorSample):
        if not record.participant:
            out.append(Violation("participant", "empty participant id"))
        _check_time("observed_at", record.observed_at, out)
        if _finite("value", record.value, out) and record.kind in _SENSOR_RANGES:
            lo, hi, closed = _SENSOR_RANGES[record.kind]
            inside = lo <= record.value <= hi if closed else lo < record.value < hi
            if not inside:
                out.append(Violation("value", f"{record.kind.value} out of range"))
        elif record.kind not in _SENSOR_RANGES and isinstance(record.value, (int, float)):
            if record.value < 0:
                out.append(Violation("value", f"{record.kind.value} negative"))
    elif isinstance(record, WeatherObservation):
        if not record.station_id:
            out.append(Violation("station_id", "empty station id"))
        _check_coords("station_", record.station_lat, record.station_lon, out)
        _check_time("observed_at", record.observed_at, out)
        if _finite("air_temperature", record.air_temperature, out) and not (
            -10.0 < record.air_temperature < 60.0
        ):
            out.append(Violation("air_temperature", "air temperature out of range"))
        if record.rainfall is not None and _finite("rainfall", record.rainfall, out):
            if record.rainfall < 0:
                out.append(Violation("rainfall", "rainfall negative"))
    else:
        out.append(Violation("record", f"unsupported record type {type(record).__name__}"))
    return out


def ensure_valid(record: Record) -> Record:
    violations = validate(record)
    if violations:
        raise ValidationError(violations)
    return record
