"""Framework-free handlers for an HTTP ingestion gateway.

``POST /ingest`` takes a JSONL body and answers with one status object per
non-blank line; ``GET /export`` streams the long-format CSV. Any server can
mount these by passing the request body or query parameters through.
"""

from __future__ import annotations

import csv
import io
from datetime import datetime
from typing import Iterator, Mapping

from . import codec
from .store import Series, StreamKey, TimeSeriesStore, write_csv_rows


def handle_ingest(store: TimeSeriesStore, body: bytes | str) -> tuple[int, dict]:
    """Returns ``(http_status, response_json)``.

    200 when every line was appended, 207 when some were rejected, 400 when
    none were accepted from a non-empty body.
    """
    text = body.decode("utf-8") if isinstance(body, bytes) else body
    report = store.import_jsonl(io.StringIO(text))
    errors = dict(report.errors)
    acks = {line: seq for line, _, seq in report.acks}
    lines = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if lineno in errors:
            lines.append({"line": lineno, "status": "error", "error": errors[lineno]})
        else:
            lines.append({"line": lineno, "status": "ok", "sequence": acks[lineno]})
    if not report.errors:
        status = 200
    elif report.appended:
        status = 207
    else:
        status = 400
    return status, {"appended": report.appended, "rejected": len(report.errors), "lines": lines}


def handle_export(store: TimeSeriesStore, params: Mapping[str, str] | None = None) -> Iterator[str]:
    """Yield CSV text for the selected streams.

    Query parameters (all optional): ``series`` (survey, sensor, weather,
    notification), ``participant``, ``from`` and ``to`` as RFC 3339 times
    bounding a half-open interval.
    """
    params = dict(params or {})
    series = Series(params["series"]) if "series" in params else None
    keys = [
        k for k in store.keys()
        if (series is None or k.series is series)
        and ("participant" not in params or k.participant == params["participant"])
    ]
    t0 = codec.parse_time(params["from"]) if "from" in params else None
    t1 = codec.parse_time(params["to"]) if "to" in params else None
    yield _header()
    for key in keys:
        records = _window(store, key, t0, t1)
        if records:
            buf = io.StringIO()
            for record in records:
                _rows(buf, record, key)
            yield buf.getvalue()


def _header() -> str:
    buf = io.StringIO()
    write_csv_rows(buf, [])
    return buf.getvalue()


def _rows(buf: io.StringIO, record, key: StreamKey) -> None:
    csv.writer(buf, lineterminator="\n").writerows(codec.to_csv_rows(record, key.participant))


def _window(store: TimeSeriesStore, key: StreamKey, t0: datetime | None, t1: datetime | None) -> list:
    if t0 is None and t1 is None:
        return store.all(key)
    lo = t0 or datetime.min.replace(tzinfo=codec.UTC)
    hi = t1 or datetime.max.replace(tzinfo=codec.UTC)
    return store.query_range(key, lo, hi)
