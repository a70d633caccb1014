"""Weather stations, nearest-station lookup and the periodic observation poller."""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
import os
import urllib.request
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol

from .codec import format_time, parse_time
from .domain import WeatherObservation
from .store import StreamKey, TimeSeriesStore

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088

FIXTURE_COLUMNS = ("station_id", "lat", "lon", "timestamp", "air_temperature_c")


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dlat = p2 - p1
    dlon = math.radians(lon2 - lon1)
    a = math.sin(dlat / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


@dataclass(frozen=True)
class Station:
    station_id: str
    lat: float
    lon: float


class StationRegistry:
    def __init__(self, stations: Iterable[Station]):
        stations = tuple(sorted(stations, key=lambda s: s.station_id))
        ids = [s.station_id for s in stations]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate station ids")
        self.stations = stations
        self._by_id = {s.station_id: s for s in stations}

    def __len__(self) -> int:
        return len(self.stations)

    def __getitem__(self, station_id: str) -> Station:
        return self._by_id[station_id]

    def nearest(self, lat: float, lon: float) -> str:
        return nearest_station(self, lat, lon)


def nearest_station(registry: StationRegistry, lat: float, lon: float) -> str:
    """Station id with the smallest great-circle distance; ties go to the smaller id."""
    if not len(registry):
        raise ValueError("station registry is empty")
    best_id, best_d = None, math.inf
    # stations are held sorted by id, so a strict < keeps the smallest id on ties
    for s in registry.stations:
        d = haversine_km(lat, lon, s.lat, s.lon)
        if d < best_d:
            best_id, best_d = s.station_id, d
    return best_id


class ProviderUnavailable(RuntimeError):
    pass


class WeatherProvider(Protocol):
    def latest(self, station_id: str, t: datetime) -> WeatherObservation | None:
        """Most recent reading of ``station_id`` at or before ``t``."""


class FixtureProvider:
    """Replays a CSV of readings (``station_id,lat,lon,timestamp,air_temperature_c``).

    ``outages`` lists times at which the provider behaves as unreachable.
    """

    def __init__(self, observations: Iterable[WeatherObservation], outages: Iterable[datetime] = ()):
        by_station: dict[str, list[WeatherObservation]] = {}
        for obs in observations:
            by_station.setdefault(obs.station_id, []).append(obs)
        self._obs = {k: sorted(v, key=lambda o: o.observed_at) for k, v in by_station.items()}
        self._times = {k: [o.observed_at for o in v] for k, v in self._obs.items()}
        self.outages = set(outages)
        self.calls = 0

    @classmethod
    def from_csv(cls, path: str | Path) -> FixtureProvider:
        return cls(read_fixture(path))

    def stations(self) -> StationRegistry:
        return StationRegistry(
            Station(sid, obs[0].station_lat, obs[0].station_lon) for sid, obs in self._obs.items()
        )

    def latest(self, station_id: str, t: datetime) -> WeatherObservation | None:
        self.calls += 1
        if t in self.outages:
            raise ProviderUnavailable(f"fixture outage at {format_time(t)}")
        times = self._times.get(station_id)
        if not times:
            return None
        i = bisect.bisect_right(times, t)
        return self._obs[station_id][i - 1] if i else None


def read_fixture(path: str | Path) -> list[WeatherObservation]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIXTURE_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(FIXTURE_COLUMNS)}")
        return [
            WeatherObservation(
                station_id=row["station_id"],
                station_lat=float(row["lat"]),
                station_lon=float(row["lon"]),
                air_temperature=float(row["air_temperature_c"]),
                observed_at=parse_time(row["timestamp"]),
            )
            for row in reader
        ]


def write_fixture(path: str | Path, observations: Iterable[WeatherObservation]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIXTURE_COLUMNS)
        for o in observations:
            writer.writerow(
                (o.station_id, repr(o.station_lat), repr(o.station_lon),
                 format_time(o.observed_at), repr(o.air_temperature))
            )


class HttpProvider:
    """Client for a "latest readings per station" JSON endpoint.

    The endpoint returns an array of
    ``{"station_id", "location": {"latitude", "longitude"}, "value", "timestamp"}``.
    The URL comes from ``WEATHER_API_URL`` unless given. ``fetch`` is injectable
    so callers and tests can avoid the network.
    """

    def __init__(self, url: str | None = None, fetch: Callable[[str], str] | None = None,
                 timeout: float = 10.0):
        self.url = url or os.environ.get("WEATHER_API_URL")
        if not self.url:
            raise ValueError("no weather endpoint: set WEATHER_API_URL")
        self.timeout = timeout
        self._fetch = fetch or self._urlopen

    def _urlopen(self, url: str) -> str:
        with urllib.request.urlopen(url, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")

    def latest(self, station_id: str, t: datetime) -> WeatherObservation | None:
        try:
            payload = json.loads(self._fetch(self.url))
        except (OSError, ValueError) as exc:
            raise ProviderUnavailable(str(exc)) from exc
        best = None
        for item in payload:
            if item.get("station_id") != station_id:
                continue
            obs = WeatherObservation(
                station_id=station_id,
                station_lat=float(item["location"]["latitude"]),
                station_lon=float(item["location"]["longitude"]),
                air_temperature=float(item["value"]),
                observed_at=parse_time(item["timestamp"]),
            )
            if obs.observed_at <= t and (best is None or obs.observed_at > best.observed_at):
                best = obs
        return best


def poll(
    provider: WeatherProvider,
    registry: StationRegistry,
    location: tuple[float, float],
    t: datetime,
    store: TimeSeriesStore | None = None,
    participant: str | None = None,
) -> WeatherObservation | None:
    """Fetch the nearest station's latest reading and append it to the weather stream.

    Returns None (and logs) when the provider is unreachable or has no reading;
    nothing is stored in that case.
    """
    station = nearest_station(registry, *location)
    try:
        obs = provider.latest(station, t)
    except ProviderUnavailable as exc:
        logger.warning("weather poll skipped at %s: %s", format_time(t), exc)
        return None
    if obs is None:
        return None
    if store is not None and participant is not None:
        _store_once(store, participant, obs)
    return obs


def _store_once(store: TimeSeriesStore, participant: str, obs: WeatherObservation) -> None:
    key = StreamKey.weather(participant)
    last = store.latest_at_or_before(key, obs.observed_at)
    if last != obs:
        store.append(key, obs)


def poll_ticks(start: datetime, end: datetime, interval: timedelta) -> Iterator[datetime]:
    """Tick times ``start, start+interval, ...`` up to and including ``end``."""
    t = start
    while t <= end:
        yield t
        t += interval


class WeatherPoller:
    """Polls once per distinct nearest station and fans readings out to participants.

    A participant's location is the position of their latest micro-survey;
    participants without any survey yet are skipped.
    """

    def __init__(self, provider: WeatherProvider, registry: StationRegistry,
                 store: TimeSeriesStore):
        self.provider = provider
        self.registry = registry
        self.store = store
        self.attempts = 0

    def location_of(self, participant: str, t: datetime) -> tuple[float, float] | None:
        survey = self.store.latest_at_or_before(StreamKey.surveys(participant), t)
        return None if survey is None else (survey.lat, survey.lon)

    def tick(self, t: datetime, participants: Iterable[str]) -> dict[str, WeatherObservation]:
        by_station: dict[str, list[str]] = {}
        for p in sorted(participants):
            loc = self.location_of(p, t)
            if loc is not None:
                by_station.setdefault(nearest_station(self.registry, *loc), []).append(p)
        got: dict[str, WeatherObservation] = {}
        for station in sorted(by_station):
            self.attempts += 1
            try:
                obs = self.provider.latest(station, t)
            except ProviderUnavailable as exc:
                logger.warning("weather poll for %s skipped at %s: %s",
                               station, format_time(t), exc)
                continue
            if obs is None:
                continue
            for p in by_station[station]:
                _store_once(self.store, p, obs)
                got[p] = obs
        return got
