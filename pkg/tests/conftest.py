from __future__ import annotations

from datetime import datetime, timedelta
from zoneinfo import ZoneInfo

import pytest

from jitai.domain import (
    UTC,
    MicroSurveyResponse,
    PreferenceLabel,
    SensorKind,
    SensorSample,
    WeatherObservation,
)

SGT = ZoneInfo("Asia/Singapore")


def local(y, m, d, hh=0, mm=0, ss=0) -> datetime:
    """A Singapore wall-clock time, returned in UTC."""
    return datetime(y, m, d, hh, mm, ss, tzinfo=SGT).astimezone(UTC)


# 2024-01-09 is a Tuesday, 2024-01-13 a Saturday.
TUESDAY = (2024, 1, 9)
SATURDAY = (2024, 1, 13)


def survey(participant="P1", ended_at=None, thermal="no_change", noise="no_change",
           lat=1.2966, lon=103.7764, sound_source=None, duration_s=20) -> MicroSurveyResponse:
    ended_at = ended_at or local(*TUESDAY, 10)
    started = ended_at - timedelta(seconds=duration_s)
    return MicroSurveyResponse(
        participant=participant,
        started_at=started,
        ended_at=ended_at,
        lat=lat,
        lon=lon,
        location_acquired_at=started,
        thermal=PreferenceLabel("thermal", thermal),
        noise=PreferenceLabel("noise", noise),
        sound_source=sound_source,
    )


def sound(participant="P1", value=60.0, at=None) -> SensorSample:
    return SensorSample(participant, SensorKind.SOUND_LEVEL, value, at or local(*TUESDAY, 10))


def weather(temp=31.0, at=None, station="S01", lat=1.2966, lon=103.7764) -> WeatherObservation:
    return WeatherObservation(station, lat, lon, temp, at or local(*TUESDAY, 10))


@pytest.fixture
def t0() -> datetime:
    return local(*TUESDAY, 9)


# --- acceptance report ------------------------------------------------------

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _ACCEPTANCE.append((marker.args[0], marker.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number} [{title}]: {status}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
