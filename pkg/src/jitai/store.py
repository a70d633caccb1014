"""Append-only, in-memory time-series store with CSV/JSONL import and export.

One ordered stream per :class:`StreamKey`. Streams are sorted by record
timestamp with ties kept in arrival order; every append receives a sequence
number that is strictly increasing within its stream. Nothing is ever mutated
or removed once appended.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator

from . import codec
from .domain import (
    MicroSurveyResponse,
    NotificationRecord,
    SensorKind,
    SensorSample,
    ValidationError,
    WeatherObservation,
    ensure_valid,
)

logger = logging.getLogger(__name__)


class Series(str, Enum):
    SURVEYS = "survey"
    SENSOR = "sensor"
    WEATHER = "weather"
    NOTIFICATIONS = "notification"


CSV_FILENAMES = {
    Series.SURVEYS: "surveys.csv",
    Series.SENSOR: "sensor.csv",
    Series.WEATHER: "weather.csv",
    Series.NOTIFICATIONS: "notifications.csv",
}

_RECORD_TYPES = {
    Series.SURVEYS: MicroSurveyResponse,
    Series.SENSOR: SensorSample,
    Series.WEATHER: WeatherObservation,
    Series.NOTIFICATIONS: NotificationRecord,
}


@dataclass(frozen=True, order=True)
class StreamKey:
    participant: str
    series: Series
    sensor_kind: SensorKind | None = None

    def __post_init__(self) -> None:
        if not self.participant:
            raise ValueError("participant id must be non-empty")
        if (self.series is Series.SENSOR) != (self.sensor_kind is not None):
            raise ValueError("sensor_kind is required for, and only for, sensor streams")

    @classmethod
    def surveys(cls, participant: str) -> StreamKey:
        return cls(participant, Series.SURVEYS)

    @classmethod
    def sensor(cls, participant: str, kind: SensorKind) -> StreamKey:
        return cls(participant, Series.SENSOR, SensorKind(kind))

    @classmethod
    def weather(cls, participant: str) -> StreamKey:
        return cls(participant, Series.WEATHER)

    @classmethod
    def notifications(cls, participant: str) -> StreamKey:
        return cls(participant, Series.NOTIFICATIONS)

    @classmethod
    def for_record(cls, record: object, participant: str | None = None) -> StreamKey:
        if isinstance(record, SensorSample):
            return cls.sensor(record.participant, record.kind)
        if isinstance(record, MicroSurveyResponse):
            return cls.surveys(record.participant)
        if isinstance(record, NotificationRecord):
            return cls.notifications(record.participant)
        if isinstance(record, WeatherObservation):
            if participant is None:
                raise ValueError("weather records need an owning participant")
            return cls.weather(participant)
        raise TypeError(f"unsupported record type {type(record).__name__}")

    def _sort_key(self) -> tuple:
        return (self.participant, self.series.value,
                self.sensor_kind.value if self.sensor_kind else "")


class SeriesMismatch(TypeError):
    pass


class _Stream:
    # Readers never lock: in-order appends extend ``records`` before ``times``,
    # and out-of-order inserts swap in fresh lists, so any index found in
    # ``times`` is always valid in ``records``.
    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.times: list[datetime] = []
        self.records: list = []
        self.next_seq = 1

    def append(self, record) -> int:
        t = record.timestamp
        with self.lock:
            seq = self.next_seq
            self.next_seq += 1
            if not self.times or self.times[-1] <= t:
                self.records.append(record)
                self.times.append(t)
            else:
                i = bisect.bisect_right(self.times, t)
                records = self.records[:i] + [record] + self.records[i:]
                times = self.times[:i] + [t] + self.times[i:]
                self.records, self.times = records, times
            return seq

    def view(self) -> tuple[list[datetime], list, int]:
        """Current lists plus the length safe to read; callers must not mutate them."""
        records = self.records
        times = self.times
        return times, records, min(len(times), len(records))


@dataclass
class IngestReport:
    appended: int = 0
    acks: list[tuple[int, StreamKey, int]] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


class TimeSeriesStore:
    def __init__(self) -> None:
        self._streams: dict[StreamKey, _Stream] = {}
        self._streams_lock = threading.Lock()

    def _stream(self, key: StreamKey, create: bool = False) -> _Stream | None:
        stream = self._streams.get(key)
        if stream is None and create:
            with self._streams_lock:
                stream = self._streams.setdefault(key, _Stream())
        return stream

    def append(self, key: StreamKey, record) -> int:
        """Validate and append one record; returns its sequence number."""
        expected = _RECORD_TYPES[key.series]
        if not isinstance(record, expected):
            raise SeriesMismatch(
                f"{type(record).__name__} cannot go into a {key.series.value} stream"
            )
        if key.series is Series.SENSOR and record.kind is not key.sensor_kind:
            raise SeriesMismatch(
                f"{record.kind.value} sample cannot go into {key.sensor_kind.value} stream"
            )
        if key.series is not Series.WEATHER and record.participant != key.participant:
            raise SeriesMismatch("record participant does not match stream key")
        if key.series is not Series.NOTIFICATIONS:
            ensure_valid(record)
        return self._stream(key, create=True).append(record)

    def append_many(self, key: StreamKey, records: Iterable) -> list[int]:
        return [self.append(key, r) for r in records]

    def keys(self) -> list[StreamKey]:
        return sorted(self._streams, key=StreamKey._sort_key)

    def participants(self) -> list[str]:
        return sorted({k.participant for k in self._streams})

    def all(self, key: StreamKey) -> list:
        stream = self._stream(key)
        if stream is None:
            return []
        _, records, n = stream.view()
        return records[:n]

    def slice(self, key: StreamKey, start: int, stop: int) -> list:
        """Records at positions ``start:stop`` of the ordered stream."""
        stream = self._stream(key)
        if stream is None:
            return []
        _, records, n = stream.view()
        return records[max(0, start):min(stop, n)]

    def query_range(self, key: StreamKey, t0: datetime, t1: datetime) -> list:
        """Records with timestamp in the half-open interval ``[t0, t1)``."""
        if t0 > t1:
            raise ValueError("t0 must not be after t1")
        stream = self._stream(key)
        if stream is None:
            return []
        times, records, n = stream.view()
        lo = bisect.bisect_left(times, t0, 0, n)
        hi = bisect.bisect_left(times, t1, 0, n)
        return records[lo:hi]

    def latest_at_or_before(self, key: StreamKey, t: datetime):
        stream = self._stream(key)
        if stream is None:
            return None
        times, records, n = stream.view()
        i = bisect.bisect_right(times, t, 0, n)
        return records[i - 1] if i else None

    def count(self, key: StreamKey, up_to: datetime) -> int:
        """Number of records with timestamp <= ``up_to``."""
        stream = self._stream(key)
        if stream is None:
            return 0
        times, _, n = stream.view()
        return bisect.bisect_right(times, up_to, 0, n)

    def count_surveys(self, participant: str, up_to: datetime) -> int:
        return self.count(StreamKey.surveys(participant), up_to)

    def _selected(
        self, keys: Iterable[StreamKey] | None, t0: datetime | None, t1: datetime | None
    ) -> Iterator[tuple[StreamKey, object]]:
        chosen = self.keys() if keys is None else sorted(set(keys), key=StreamKey._sort_key)
        for key in chosen:
            if t0 is None and t1 is None:
                records = self.all(key)
            else:
                lo = t0 if t0 is not None else datetime.min.replace(tzinfo=codec.UTC)
                hi = t1 if t1 is not None else datetime.max.replace(tzinfo=codec.UTC)
                records = self.query_range(key, lo, hi)
            for record in records:
                yield key, record

    def export_csv(
        self,
        destination: str | Path,
        keys: Iterable[StreamKey] | None = None,
        t0: datetime | None = None,
        t1: datetime | None = None,
        series: Iterable[Series | str] | None = None,
    ) -> dict[Series, Path]:
        """Write one long-format CSV per series into ``destination``.

        ``series`` names the files to produce even when they would be empty
        (header only); by default every series present in the selection is
        written.
        """
        dest = Path(destination)
        dest.mkdir(parents=True, exist_ok=True)
        rows: dict[Series, list] = {Series(s): [] for s in (series or ())}
        for key, record in self._selected(keys, t0, t1):
            rows.setdefault(key.series, []).extend(codec.to_csv_rows(record, key.participant))
        written = {}
        for s in sorted(rows, key=lambda s: s.value):
            path = dest / CSV_FILENAMES[s]
            with path.open("w", newline="", encoding="utf-8") as fh:
                write_csv_rows(fh, rows[s])
            written[s] = path
        return written

    def export_jsonl(
        self,
        destination: str | Path | IO[str],
        keys: Iterable[StreamKey] | None = None,
        t0: datetime | None = None,
        t1: datetime | None = None,
    ) -> int:
        lines = [
            json.dumps(codec.to_json(record, key.participant))
            for key, record in self._selected(keys, t0, t1)
        ]
        text = "".join(line + "\n" for line in lines)
        if isinstance(destination, (str, Path)):
            Path(destination).write_text(text, encoding="utf-8")
        else:
            destination.write(text)
        return len(lines)

    def import_jsonl(
        self,
        source: str | Path | IO[str],
        allowed: Iterable[str] = (codec.SURVEY, codec.SENSOR, codec.WEATHER),
    ) -> IngestReport:
        """Append each valid line; collect errors per line without stopping."""
        allowed = set(allowed)
        if isinstance(source, (str, Path)):
            text = Path(source).read_text(encoding="utf-8")
        else:
            text = source.read()
        report = IngestReport()
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise codec.CodecError("expected a JSON object")
                if obj.get("series") not in allowed:
                    raise codec.CodecError(f"series {obj.get('series')!r} not accepted")
                record = codec.from_json(obj)
                key = StreamKey.for_record(record, obj.get("participant"))
                seq = self.append(key, record)
            except json.JSONDecodeError as exc:
                report.errors.append((lineno, f"malformed JSON: {exc.msg}"))
            except (codec.CodecError, ValidationError, SeriesMismatch, ValueError) as exc:
                report.errors.append((lineno, str(exc)))
            else:
                report.appended += 1
                report.acks.append((lineno, key, seq))
        if report.errors:
            logger.warning("ingest rejected %d line(s)", len(report.errors))
        return report

    def save(self, directory: str | Path) -> None:
        """Snapshot every stream to ``<series>.jsonl`` files."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for s in Series:
            keys = [k for k in self.keys() if k.series is s]
            path = directory / f"{s.value}.jsonl"
            if keys:
                self.export_jsonl(path, keys)
            elif path.exists():
                path.unlink()

    @classmethod
    def load(cls, directory: str | Path) -> TimeSeriesStore:
        store = cls()
        for s in Series:
            path = Path(directory) / f"{s.value}.jsonl"
            if path.exists():
                report = store.import_jsonl(path, allowed=codec.SERIES_NAMES)
                if report.errors:
                    line, msg = report.errors[0]
                    raise ValueError(f"{path}:{line}: {msg}")
        return store


def write_csv_rows(fh: IO[str], rows: Iterable[tuple[str, ...]]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(codec.CSV_COLUMNS)
    writer.writerows(rows)


def read_csv(source: str | Path | IO[str]) -> list[tuple[str, object]]:
    """Parse a long-format export back into ``(participant, record)`` pairs."""
    if isinstance(source, (str, Path)):
        with Path(source).open(newline="", encoding="utf-8") as fh:
            return read_csv(fh)
    reader = csv.DictReader(source)
    if tuple(reader.fieldnames or ()) != codec.CSV_COLUMNS:
        raise codec.CodecError(f"unexpected CSV header {reader.fieldnames}")
    return codec.from_csv_rows(list(reader))


def records_to_csv(records: Iterable[tuple[str, object]]) -> str:
    buf = io.StringIO()
    write_csv_rows(buf, (row for p, r in records for row in codec.to_csv_rows(r, p)))
    return buf.getvalue()
