"""Text codecs for stored records.

Each record type has a fixed, ordered list of fields. JSON objects carry those
fields plus a ``series`` discriminator; the long-format CSV writes one row per
field, always starting with the first field of the series so consecutive rows
can be regrouped into records on import.
"""

from __future__ import annotations

from datetime import datetime
from typing import Any

from .domain import (
    UTC,
    CauseKind,
    DeliveryStatus,
    LabelKind,
    Mechanism,
    MicroSurveyResponse,
    NotificationRecord,
    PreferenceLabel,
    SensorKind,
    SensorSample,
    SoundSource,
    SuppressReason,
    TriggerEvent,
    WeatherObservation,
)

SURVEY = "survey"
SENSOR = "sensor"
WEATHER = "weather"
NOTIFICATION = "notification"
SERIES_NAMES = (SURVEY, SENSOR, WEATHER, NOTIFICATION)

CSV_COLUMNS = ("timestamp", "id_participant", "series", "field", "value")

FIELDS: dict[str, tuple[str, ...]] = {
    SURVEY: (
        "participant",
        "started_at",
        "ended_at",
        "lat",
        "lon",
        "location_acquired_at",
        "thermal",
        "noise",
        "sound_source",
    ),
    SENSOR: ("participant", "kind", "value", "observed_at"),
    WEATHER: (
        "station_id",
        "station_lat",
        "station_lon",
        "air_temperature",
        "observed_at",
        "rainfall",
    ),
    NOTIFICATION: (
        "participant",
        "kind",
        "mechanism",
        "target_label",
        "fired_at",
        "cause_kind",
        "cause_value",
        "lat",
        "lon",
        "payload_text",
        "status",
        "sequence_in_day",
        "reason",
    ),
}


class CodecError(ValueError):
    pass


def format_time(t: datetime) -> str:
    return t.astimezone(UTC).isoformat()


def parse_time(text: str) -> datetime:
    try:
        t = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except (TypeError, ValueError) as exc:
        raise CodecError(f"bad timestamp {text!r}") from exc
    if t.tzinfo is None:
        raise CodecError(f"timestamp without UTC offset {text!r}")
    return t.astimezone(UTC)


def series_of(record: object) -> str:
    if isinstance(record, MicroSurveyResponse):
        return SURVEY
    if isinstance(record, SensorSample):
        return SENSOR
    if isinstance(record, WeatherObservation):
        return WEATHER
    if isinstance(record, NotificationRecord):
        return NOTIFICATION
    raise CodecError(f"unsupported record type {type(record).__name__}")


def to_json(record: object, participant: str | None = None) -> dict[str, Any]:
    """Plain JSON object for ``record`` with a leading ``series`` key.

    Weather observations carry no participant of their own; pass the owning
    stream's participant to include it.
    """
    series = series_of(record)
    obj: dict[str, Any] = {"series": series}
    if series == SURVEY:
        obj.update(
            participant=record.participant,
            started_at=format_time(record.started_at),
            ended_at=format_time(record.ended_at),
            lat=record.lat,
            lon=record.lon,
            location_acquired_at=format_time(record.location_acquired_at),
            thermal=record.thermal.value,
            noise=record.noise.value,
            sound_source=record.sound_source.value if record.sound_source else None,
        )
    elif series == SENSOR:
        obj.update(
            participant=record.participant,
            kind=record.kind.value,
            value=record.value,
            observed_at=format_time(record.observed_at),
        )
    elif series == WEATHER:
        if participant is not None:
            obj["participant"] = participant
        obj.update(
            station_id=record.station_id,
            station_lat=record.station_lat,
            station_lon=record.station_lon,
            air_temperature=record.air_temperature,
            observed_at=format_time(record.observed_at),
            rainfall=record.rainfall,
        )
    else:
        ev = record.event
        obj.update(
            participant=ev.participant,
            kind=ev.kind.value,
            mechanism=ev.mechanism.value,
            target_label=ev.target_label.value,
            fired_at=format_time(ev.fired_at),
            cause_kind=ev.cause_kind.value,
            cause_value=ev.cause_value,
            lat=ev.location[0] if ev.location else None,
            lon=ev.location[1] if ev.location else None,
            payload_text=record.payload_text,
            status=record.status.value,
            sequence_in_day=record.sequence_in_day,
            reason=record.reason.value if record.reason else None,
        )
    return obj


def _float(obj: dict, name: str) -> float:
    value = obj[name]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CodecError(f"{name}: expected a number, got {value!r}")
    return float(value)


def _opt_float(obj: dict, name: str) -> float | None:
    return None if obj.get(name) is None else _float(obj, name)


def _str(obj: dict, name: str) -> str:
    value = obj[name]
    if not isinstance(value, str):
        raise CodecError(f"{name}: expected a string, got {value!r}")
    return value


def from_json(obj: dict[str, Any]) -> object:
    """Inverse of :func:`to_json`; raises :class:`CodecError` on bad input."""
    if not isinstance(obj, dict):
        raise CodecError("expected a JSON object")
    series = obj.get("series")
    if series not in FIELDS:
        raise CodecError(f"unknown series {series!r}")
    try:
        if series == SURVEY:
            source = obj.get("sound_source")
            return MicroSurveyResponse(
                participant=_str(obj, "participant"),
                started_at=parse_time(_str(obj, "started_at")),
                ended_at=parse_time(_str(obj, "ended_at")),
                lat=_float(obj, "lat"),
                lon=_float(obj, "lon"),
                location_acquired_at=parse_time(_str(obj, "location_acquired_at")),
                thermal=PreferenceLabel.parse(LabelKind.THERMAL, _str(obj, "thermal")),
                noise=PreferenceLabel.parse(LabelKind.NOISE, _str(obj, "noise")),
                sound_source=SoundSource(source) if source is not None else None,
            )
        if series == SENSOR:
            return SensorSample(
                participant=_str(obj, "participant"),
                kind=SensorKind(_str(obj, "kind")),
                value=_float(obj, "value"),
                observed_at=parse_time(_str(obj, "observed_at")),
            )
        if series == WEATHER:
            return WeatherObservation(
                station_id=_str(obj, "station_id"),
                station_lat=_float(obj, "station_lat"),
                station_lon=_float(obj, "station_lon"),
                air_temperature=_float(obj, "air_temperature"),
                observed_at=parse_time(_str(obj, "observed_at")),
                rainfall=_opt_float(obj, "rainfall"),
            )
        kind = LabelKind(_str(obj, "kind"))
        lat, lon = _opt_float(obj, "lat"), _opt_float(obj, "lon")
        event = TriggerEvent(
            participant=_str(obj, "participant"),
            kind=kind,
            mechanism=Mechanism(_str(obj, "mechanism")),
            target_label=PreferenceLabel.parse(kind, _str(obj, "target_label")),
            fired_at=parse_time(_str(obj, "fired_at")),
            cause_kind=CauseKind(_str(obj, "cause_kind")),
            cause_value=_float(obj, "cause_value"),
            location=(lat, lon) if lat is not None and lon is not None else None,
        )
        reason = obj.get("reason")
        seq = obj.get("sequence_in_day")
        return NotificationRecord(
            event=event,
            payload_text=obj.get("payload_text") or "",
            status=DeliveryStatus(_str(obj, "status")),
            sequence_in_day=int(seq) if seq is not None else None,
            reason=SuppressReason(reason) if reason is not None else None,
        )
    except KeyError as exc:
        raise CodecError(f"missing field {exc.args[0]!r}") from exc
    except ValueError as exc:
        if isinstance(exc, CodecError):
            raise
        raise CodecError(str(exc)) from exc


# CSV cells are text; None is the empty string, floats use repr() so they
# parse back to the identical double.


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _uncell(series: str, name: str, text: str) -> Any:
    if text == "":
        return None
    if name in {"lat", "lon", "station_lat", "station_lon", "air_temperature",
                "rainfall", "value", "cause_value"}:
        try:
            return float(text)
        except ValueError as exc:
            raise CodecError(f"{name}: bad number {text!r}") from exc
    if name == "sequence_in_day":
        return int(text)
    return text


def to_csv_rows(record: object, participant: str) -> list[tuple[str, ...]]:
    series = series_of(record)
    obj = to_json(record)
    stamp = format_time(record.timestamp)
    return [
        (stamp, participant, series, name, _cell(obj[name])) for name in FIELDS[series]
    ]


def from_csv_rows(rows: list[dict[str, str]]) -> list[tuple[str, object]]:
    """Regroup long-format rows into ``(participant, record)`` pairs."""
    out: list[tuple[str, object]] = []
    current: dict[str, Any] | None = None
    owner = ""

    def flush() -> None:
        if current is not None:
            out.append((owner, from_json(current)))

    for row in rows:
        series = row["series"]
        if series not in FIELDS:
            raise CodecError(f"unknown series {series!r}")
        name = row["field"]
        if name == FIELDS[series][0]:
            flush()
            current = {"series": series}
            owner = row["id_participant"]
        if current is None or current["series"] != series:
            raise CodecError("record rows out of order")
        if name not in FIELDS[series]:
            raise CodecError(f"unknown field {name!r} for series {series}")
        current[name] = _uncell(series, name, row["value"])
    flush()
    return out
