"""Deterministic synthetic cohorts and an end-to-end deployment replay.

A :class:`CohortSpec` describes participants by weighted profiles (preference
mixtures, survey pacing, sound environment), a waypoint trace and a weather
scenario. :func:`run_phase` drives the real store, poller and engine with a
simulated clock that ticks every poll interval through each weekday window.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import UTC
from .dispatch import MessageTemplates, MockProvider, PushProvider
from .domain import (
    CLASS_ORDER,
    NO_CHANGE,
    DeliveryStatus,
    LabelKind,
    Mechanism,
    MicroSurveyResponse,
    NotificationRecord,
    Phase,
    PhaseConfig,
    PreferenceLabel,
    SensorKind,
    SensorSample,
    SoundSource,
    SuppressReason,
    TriggerConfig,
    WeatherObservation,
)
from .forest import ForestParams
from .store import Series, StreamKey, TimeSeriesStore
from .triggers import Engine
from .weather import FixtureProvider, Station, StationRegistry, WeatherPoller, read_fixture, write_fixture

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

SCENARIOS = ("always-hot", "never-hot", "diurnal")

DEFAULT_STATIONS = (
    Station("S01", 1.2966, 103.7764),
    Station("S02", 1.2830, 103.8513),
    Station("S03", 1.3329, 103.7436),
    Station("S04", 1.3496, 103.9568),
    Station("S05", 1.4382, 103.7890),
)

DEFAULT_TRACE = (
    (1.2976, 103.7760),
    (1.2840, 103.8500),
    (1.3320, 103.7450),
    (1.3490, 103.9550),
)


class SpecError(ValueError):
    pass


def _distribution(values: Sequence[float], what: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in values)
    if len(values) != 3 or any(v < 0 for v in values) or not math.isclose(sum(values), 1.0, abs_tol=1e-9):
        raise SpecError(f"{what}: expected 3 non-negative probabilities summing to 1")
    return values


@dataclass(frozen=True)
class PreferenceMixture:
    """Class probabilities (in class order) per label kind, optionally per hour."""

    thermal: tuple[float, ...] = (0.2, 0.6, 0.2)
    noise: tuple[float, ...] = (0.2, 0.6, 0.2)
    thermal_by_hour: dict[int, tuple[float, ...]] = field(default_factory=dict)
    noise_by_hour: dict[int, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "thermal", _distribution(self.thermal, "thermal"))
        object.__setattr__(self, "noise", _distribution(self.noise, "noise"))
        for name in ("thermal_by_hour", "noise_by_hour"):
            table = {int(h): _distribution(p, f"{name}[{h}]") for h, p in getattr(self, name).items()}
            object.__setattr__(self, name, table)

    def probs(self, kind: LabelKind, hour: int) -> tuple[float, ...]:
        if kind is LabelKind.THERMAL:
            return self.thermal_by_hour.get(hour, self.thermal)
        return self.noise_by_hour.get(hour, self.noise)

    def to_dict(self) -> dict:
        return {
            "thermal": list(self.thermal),
            "noise": list(self.noise),
            "thermal_by_hour": {str(h): list(p) for h, p in sorted(self.thermal_by_hour.items())},
            "noise_by_hour": {str(h): list(p) for h, p in sorted(self.noise_by_hour.items())},
        }


@dataclass(frozen=True)
class SoundProfile:
    base_dba: float = 60.0
    sd_dba: float = 5.0
    lunch_bump_dba: float = 0.0  # added from 12:00 to 14:00

    def to_dict(self) -> dict:
        return {"base_dba": self.base_dba, "sd_dba": self.sd_dba, "lunch_bump_dba": self.lunch_bump_dba}


@dataclass(frozen=True)
class ParticipantProfile:
    name: str
    share: float = 1.0
    preferences: PreferenceMixture = field(default_factory=PreferenceMixture)
    survey_rate: float = 5.0  # surveys per weekday
    sound: SoundProfile = field(default_factory=SoundProfile)

    def __post_init__(self) -> None:
        if self.survey_rate <= 0:
            raise SpecError(f"profile {self.name}: survey_rate must be positive")
        if self.share < 0:
            raise SpecError(f"profile {self.name}: share must be non-negative")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "share": self.share,
            "preferences": self.preferences.to_dict(),
            "survey_rate": self.survey_rate,
            "sound": self.sound.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ParticipantProfile:
        prefs = d.get("preferences", {})
        return cls(
            name=str(d["name"]),
            share=float(d.get("share", 1.0)),
            preferences=PreferenceMixture(
                thermal=prefs.get("thermal", (0.2, 0.6, 0.2)),
                noise=prefs.get("noise", (0.2, 0.6, 0.2)),
                thermal_by_hour=prefs.get("thermal_by_hour", {}),
                noise_by_hour=prefs.get("noise_by_hour", {}),
            ),
            survey_rate=float(d.get("survey_rate", 5.0)),
            sound=SoundProfile(**d.get("sound", {})),
        )


def default_profiles() -> tuple[ParticipantProfile, ...]:
    """A mixed cohort: afternoon heat-sensitive, noise-sensitive and indifferent."""
    hot_afternoon = {h: (0.75, 0.2, 0.05) for h in range(13, 20)}
    quiet_midday = {h: (0.7, 0.25, 0.05) for h in range(11, 16)}
    return (
        ParticipantProfile(
            "heat_sensitive", 0.3,
            PreferenceMixture((0.2, 0.7, 0.1), (0.1, 0.8, 0.1), thermal_by_hour=hot_afternoon),
            survey_rate=6.0, sound=SoundProfile(62.0, 5.0, 6.0),
        ),
        ParticipantProfile(
            "noise_sensitive", 0.2,
            PreferenceMixture((0.1, 0.8, 0.1), (0.2, 0.7, 0.1), noise_by_hour=quiet_midday),
            survey_rate=6.0, sound=SoundProfile(66.0, 4.0, 8.0),
        ),
        ParticipantProfile(
            "indifferent", 0.5,
            PreferenceMixture((0.05, 0.9, 0.05), (0.05, 0.9, 0.05)),
            survey_rate=6.0, sound=SoundProfile(58.0, 5.0, 4.0),
        ),
    )


@dataclass(frozen=True)
class CohortSpec:
    n_participants: int
    phase: Phase = Phase.PHASE2
    duration_weekdays: int = 20
    rng_seed: int = 0
    start_date: date = date(2024, 1, 8)
    profiles: tuple[ParticipantProfile, ...] = field(default_factory=default_profiles)
    location_trace: tuple[tuple[float, float], ...] = DEFAULT_TRACE
    weather_fixture: str = "diurnal"
    stations: tuple[Station, ...] = DEFAULT_STATIONS

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.n_participants < 0:
            raise SpecError("n_participants must be >= 0")
        if self.duration_weekdays < 1:
            raise SpecError("duration_weekdays must be >= 1")
        if not self.profiles or sum(p.share for p in self.profiles) <= 0:
            raise SpecError("at least one profile with positive share is required")
        if not self.location_trace:
            raise SpecError("location_trace needs at least one waypoint")
        for lat, lon in self.location_trace:
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise SpecError(f"waypoint ({lat}, {lon}) out of range")

    def participant_ids(self) -> list[str]:
        width = max(3, len(str(self.n_participants)))
        return [f"P{i + 1:0{width}d}" for i in range(self.n_participants)]

    def profile_assignment(self) -> list[ParticipantProfile]:
        """Largest-remainder allocation of participants to profiles, in profile order."""
        total = sum(p.share for p in self.profiles)
        quotas = [p.share / total * self.n_participants for p in self.profiles]
        counts = [int(math.floor(q)) for q in quotas]
        order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
        for i in order[: self.n_participants - sum(counts)]:
            counts[i] += 1
        out = []
        for profile, c in zip(self.profiles, counts):
            out.extend([profile] * c)
        return out

    def weekdays(self) -> list[date]:
        days, d = [], self.start_date
        while len(days) < self.duration_weekdays:
            if d.weekday() < 5:
                days.append(d)
            d += timedelta(days=1)
        return days

    def to_dict(self) -> dict:
        return {
            "n_participants": self.n_participants,
            "phase": self.phase.value,
            "duration_weekdays": self.duration_weekdays,
            "rng_seed": self.rng_seed,
            "start_date": self.start_date.isoformat(),
            "profiles": [p.to_dict() for p in self.profiles],
            "location_trace": [list(w) for w in self.location_trace],
            "weather_fixture": self.weather_fixture,
            "stations": [[s.station_id, s.lat, s.lon] for s in self.stations],
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> CohortSpec:
        kwargs: dict = {"n_participants": int(d["n_participants"])}
        for name in ("phase", "weather_fixture"):
            if name in d:
                kwargs[name] = d[name]
        for name in ("duration_weekdays", "rng_seed"):
            if name in d:
                kwargs[name] = int(d[name])
        if "start_date" in d:
            start = d["start_date"]
            kwargs["start_date"] = start if isinstance(start, date) else date.fromisoformat(start)
        if "profiles" in d:
            kwargs["profiles"] = tuple(ParticipantProfile.from_dict(p) for p in d["profiles"])
        if "location_trace" in d:
            kwargs["location_trace"] = tuple((float(a), float(b)) for a, b in d["location_trace"])
        if "stations" in d:
            kwargs["stations"] = tuple(Station(str(s[0]), float(s[1]), float(s[2])) for s in d["stations"])
        fixture = kwargs.get("weather_fixture")
        if fixture and fixture not in SCENARIOS and base_dir is not None:
            kwargs["weather_fixture"] = str((base_dir / fixture).resolve())
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> CohortSpec:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise SpecError(f"{path}: {exc}") from exc
        data = data.get("cohort", data)
        if "n_participants" not in data:
            raise SpecError(f"{path}: n_participants is required")
        return cls.from_dict(data, base_dir=path.parent)


@dataclass
class CohortStreams:
    participants: list[str]
    surveys: dict[str, list[MicroSurveyResponse]]
    sound: dict[str, list[SensorSample]]
    profiles: dict[str, str]


def _local(day: date, seconds: float, tz) -> datetime:
    return (datetime.combine(day, time(0), tzinfo=tz) + timedelta(seconds=seconds)).astimezone(UTC)


def _jitter(point: tuple[float, float], rng: np.random.Generator, sd_m: float = 40.0) -> tuple[float, float]:
    lat, lon = point
    dlat = rng.normal(0.0, sd_m) / 111_195.0
    dlon = rng.normal(0.0, sd_m) / (111_195.0 * math.cos(math.radians(lat)))
    return round(lat + dlat, 6), round(lon + dlon, 6)


def generate_cohort(spec: CohortSpec, config: TriggerConfig = TriggerConfig()) -> CohortStreams:
    """Surveys (Poisson within each weekday window) and 30-minute sound samples."""
    tz = config.tz
    ids = spec.participant_ids()
    assignment = spec.profile_assignment()
    days = spec.weekdays()
    w0, w1 = config.window_start_hour * 3600, config.window_end_hour * 3600
    surveys: dict[str, list[MicroSurveyResponse]] = {}
    sound: dict[str, list[SensorSample]] = {}
    sources = list(SoundSource)
    for i, (pid, profile) in enumerate(zip(ids, assignment)):
        rng = np.random.default_rng([spec.rng_seed, i])
        prefs = profile.preferences
        rows: list[MicroSurveyResponse] = []
        samples: list[SensorSample] = []
        offset = i % len(spec.location_trace)
        for day in days:
            n = int(rng.poisson(profile.survey_rate))
            for sec in np.sort(rng.uniform(w0, w1, size=n)).astype(np.int64):
                ended = _local(day, float(sec), tz)
                started = ended - timedelta(seconds=int(rng.integers(5, 41)))
                hour = ended.astimezone(tz).hour
                waypoint = spec.location_trace[(offset + (hour - config.window_start_hour) // 3)
                                               % len(spec.location_trace)]
                lat, lon = _jitter(waypoint, rng)
                labels = {}
                for kind in LabelKind:
                    idx = int(rng.choice(3, p=prefs.probs(kind, hour)))
                    labels[kind] = PreferenceLabel(kind, CLASS_ORDER[kind][idx])
                source = None
                if not labels[LabelKind.NOISE].is_no_change:
                    source = sources[int(rng.integers(len(sources)))]
                rows.append(MicroSurveyResponse(
                    participant=pid, started_at=started, ended_at=ended, lat=lat, lon=lon,
                    location_acquired_at=started, thermal=labels[LabelKind.THERMAL],
                    noise=labels[LabelKind.NOISE], sound_source=source,
                ))
            for sec in range(w0, w1, 1800):
                level = profile.sound.base_dba + rng.normal(0.0, profile.sound.sd_dba)
                if 12 * 3600 <= sec < 14 * 3600:
                    level += profile.sound.lunch_bump_dba
                level = round(min(100.0, max(30.0, level)), 1)
                samples.append(SensorSample(pid, SensorKind.SOUND_LEVEL, level, _local(day, sec, tz)))
        rows.sort(key=lambda s: s.ended_at)
        surveys[pid] = rows
        sound[pid] = samples
    return CohortStreams(ids, surveys, sound, {p: a.name for p, a in zip(ids, assignment)})


def scenario_temperature(name: str, local_hour: float) -> float:
    if name == "always-hot":
        return 33.0
    if name == "never-hot":
        return 26.0
    if name == "diurnal":
        # crosses 30 °C upward at 11:00, peaks at 17:00, back down at 23:00
        return round(30.0 + 3.0 * math.sin(math.pi * (local_hour - 11.0) / 12.0), 2)
    raise SpecError(f"unknown weather scenario {name!r}; choose from {', '.join(SCENARIOS)}")


def scenario_observations(
    name: str, stations: Iterable[Station], days: Sequence[date],
    config: TriggerConfig = TriggerConfig(), step: timedelta = timedelta(minutes=5),
) -> list[WeatherObservation]:
    tz = config.tz
    out = []
    steps = int(timedelta(days=1) / step)
    for station in stations:
        for day in days:
            midnight = datetime.combine(day, time(0), tzinfo=tz)
            for k in range(steps):
                local = midnight + k * step
                hour = local.hour + local.minute / 60.0
                out.append(WeatherObservation(
                    station.station_id, station.lat, station.lon,
                    scenario_temperature(name, hour), local.astimezone(UTC),
                ))
    return out


def clock_ticks(days: Sequence[date], config: TriggerConfig) -> list[datetime]:
    """Poll ticks from window start through window end (inclusive) on each day."""
    ticks = []
    for day in days:
        t = datetime.combine(day, time(config.window_start_hour), tzinfo=config.tz)
        end = datetime.combine(day, time(0), tzinfo=config.tz) + timedelta(hours=config.window_end_hour)
        while t <= end:
            ticks.append(t.astimezone(UTC))
            t += config.weather_poll_interval
    return ticks


@dataclass
class SimResult:
    spec: CohortSpec
    config: TriggerConfig
    phase: PhaseConfig
    store: TimeSeriesStore
    engine: Engine
    streams: CohortStreams
    weather: list[WeatherObservation]
    records: list[NotificationRecord]

    @property
    def provider(self) -> PushProvider:
        return self.engine.provider


def run_phase(
    spec: CohortSpec,
    config: TriggerConfig = TriggerConfig(),
    phase: PhaseConfig | None = None,
    provider: PushProvider | None = None,
    templates: MessageTemplates | None = None,
    grid: list[ForestParams] | None = None,
) -> SimResult:
    phase = phase or PhaseConfig(phase=spec.phase)
    if phase.phase is not spec.phase:
        raise SpecError("phase config does not match the cohort's phase")
    streams = generate_cohort(spec, config)
    days = spec.weekdays()
    if spec.weather_fixture in SCENARIOS:
        calendar = [days[0] + timedelta(days=k) for k in range((days[-1] - days[0]).days + 1)]
        weather = scenario_observations(spec.weather_fixture, spec.stations, calendar, config)
    else:
        weather = read_fixture(spec.weather_fixture)
    fixture = FixtureProvider(weather)
    registry = StationRegistry(spec.stations) if spec.stations else fixture.stations()

    store = TimeSeriesStore()
    engine = Engine(store, config, phase, provider or MockProvider(), templates,
                    seed=spec.rng_seed, grid=grid)
    poller = WeatherPoller(fixture, registry, store)

    arrivals = sorted(
        [(s.ended_at, 0, s.participant, s) for rows in streams.surveys.values() for s in rows]
        + [(x.observed_at, 1, x.participant, x) for rows in streams.sound.values() for x in rows],
        key=lambda a: a[:3],
    )
    pos = 0
    records: list[NotificationRecord] = []
    for t in clock_ticks(days, config):
        while pos < len(arrivals) and arrivals[pos][0] <= t:
            record = arrivals[pos][3]
            store.append(StreamKey.for_record(record), record)
            pos += 1
        poller.tick(t, streams.participants)
        records.extend(engine.run_tick(t, streams.participants))
    return SimResult(spec, config, phase, store, engine, streams, weather, records)


@dataclass(frozen=True)
class SummaryRow:
    participant: str
    threshold_sent: int = 0
    personalized_sent: int = 0
    suppressed: dict[SuppressReason, int] = field(default_factory=dict)

    def row(self) -> list:
        return [self.participant, self.threshold_sent, self.personalized_sent] + [
            self.suppressed.get(r, 0) for r in SuppressReason
        ]


SUMMARY_COLUMNS = ["id_participant", "threshold_sent", "personalized_sent"] + [
    f"suppressed_{r.value}" for r in SuppressReason
]


def summarize(log: Iterable[NotificationRecord], participants: Iterable[str] = ()) -> list[SummaryRow]:
    """Per-participant sent counts by mechanism and suppressions by reason."""
    tallies: dict[str, dict] = {p: {} for p in participants}
    for rec in log:
        t = tallies.setdefault(rec.participant, {})
        if rec.status is DeliveryStatus.SENT:
            key = rec.event.mechanism
        else:
            key = rec.reason
        t[key] = t.get(key, 0) + 1
    return [
        SummaryRow(
            p,
            t.get(Mechanism.THRESHOLD, 0),
            t.get(Mechanism.PERSONALIZED, 0),
            {r: t[r] for r in SuppressReason if r in t},
        )
        for p, t in sorted(tallies.items())
    ]


def write_summary(rows: Iterable[SummaryRow], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerows(r.row() for r in rows)
    return path


def read_summary(path: str | Path) -> list[SummaryRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append(SummaryRow(
                row["id_participant"], int(row["threshold_sent"]), int(row["personalized_sent"]),
                {r: int(row[f"suppressed_{r.value}"]) for r in SuppressReason
                 if int(row[f"suppressed_{r.value}"])},
            ))
        return out


def write_run(result: SimResult, out_dir: str | Path) -> Path:
    """Write the run directory: resolved config, inputs, CSV exports, outbox,
    models and summary."""
    out = Path(out_dir)
    (out / "inputs").mkdir(parents=True, exist_ok=True)
    resolved = {
        "cohort": result.spec.to_dict(),
        "trigger": result.config.to_dict(),
        "phase": result.phase.to_dict(),
    }
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_fixture(out / "inputs" / "weather.csv", result.weather)
    result.store.export_csv(out, series=list(Series))
    if isinstance(result.provider, MockProvider):
        result.provider.export_jsonl(out / "outbox.jsonl")
    models_dir = out / "models"
    if result.engine.models:
        models_dir.mkdir(exist_ok=True)
    for pid, pair in sorted(result.engine.models.items()):
        for model in pair:
            model.save(models_dir / f"{pid}.{model.label_kind.value}.json")
    write_summary(summarize(result.records, result.streams.participants), out / "summary.csv")
    return out
