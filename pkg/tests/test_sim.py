import filecmp
import json
import math
from dataclasses import replace
from datetime import date

import pytest

from jitai.domain import DeliveryStatus, Mechanism, Phase, PhaseConfig, SuppressReason, TriggerConfig
from jitai.forest import ForestParams
from jitai.sim import (
    CohortSpec,
    ParticipantProfile,
    PreferenceMixture,
    SoundProfile,
    SpecError,
    SummaryRow,
    clock_ticks,
    generate_cohort,
    read_summary,
    run_phase,
    scenario_temperature,
    summarize,
    write_run,
    write_summary,
)
from jitai.store import StreamKey

from conftest import SGT

SMALL_GRID = [ForestParams(10, 2, 1, 2), ForestParams(10, None, 1, 2)]


@pytest.fixture(scope="module")
def phase2_run():
    return run_phase(CohortSpec(8, Phase.PHASE2, duration_weekdays=20, rng_seed=1), grid=SMALL_GRID)


def test_empty_cohort():
    streams = generate_cohort(CohortSpec(0))
    assert streams.participants == [] and streams.surveys == {} and streams.sound == {}
    assert run_phase(CohortSpec(0, duration_weekdays=2)).records == []


def test_same_seed_same_streams():
    a = generate_cohort(CohortSpec(5, rng_seed=3, duration_weekdays=5))
    b = generate_cohort(CohortSpec(5, rng_seed=3, duration_weekdays=5))
    c = generate_cohort(CohortSpec(5, rng_seed=4, duration_weekdays=5))
    assert a.surveys == b.surveys and a.sound == b.sound
    assert a.surveys != c.surveys


def test_survey_counts_within_poisson_band():
    profile = ParticipantProfile("flat", 1.0, survey_rate=5.0)
    spec = CohortSpec(40, duration_weekdays=20, profiles=(profile,), rng_seed=2)
    streams = generate_cohort(spec)
    expected = 5.0 * 20
    for rows in streams.surveys.values():
        assert abs(len(rows) - expected) <= 3 * math.sqrt(expected)
    total = sum(len(r) for r in streams.surveys.values())
    assert abs(total - 40 * expected) <= 3 * math.sqrt(40 * expected)


def test_surveys_and_sound_inside_weekday_window():
    spec = CohortSpec(6, duration_weekdays=7, rng_seed=5)
    streams = generate_cohort(spec)
    days = set(spec.weekdays())
    for pid in streams.participants:
        for s in streams.surveys[pid]:
            lt = s.ended_at.astimezone(SGT)
            assert lt.weekday() < 5 and 9 <= lt.hour < 19 and lt.date() in days
            assert s.started_at < s.ended_at
        times = [x.observed_at for x in streams.sound[pid]]
        assert len(times) == 20 * len(days)
        gaps = {(b - a).total_seconds() for a, b in zip(times, times[1:]) if a.date() == b.date()}
        assert gaps == {1800.0}
        assert all(30.0 <= x.value <= 100.0 for x in streams.sound[pid])


def test_profile_assignment_largest_remainder():
    spec = CohortSpec(55)
    names = [p.name for p in spec.profile_assignment()]
    assert (names.count("heat_sensitive"), names.count("noise_sensitive"), names.count("indifferent")) == (17, 11, 27)
    assert spec.participant_ids()[0] == "P001" and len(spec.participant_ids()) == 55


def test_weekdays_skip_weekends():
    days = CohortSpec(1, duration_weekdays=6, start_date=date(2024, 1, 11)).weekdays()
    assert [d.isoformat() for d in days] == [
        "2024-01-11", "2024-01-12", "2024-01-15", "2024-01-16", "2024-01-17", "2024-01-18"]


@pytest.mark.parametrize("kwargs", [
    {"n_participants": -1},
    {"n_participants": 1, "duration_weekdays": 0},
    {"n_participants": 1, "profiles": ()},
    {"n_participants": 1, "location_trace": ((95.0, 0.0),)},
])
def test_invalid_spec(kwargs):
    with pytest.raises(SpecError):
        CohortSpec(**kwargs)


def test_invalid_profiles():
    with pytest.raises(SpecError):
        PreferenceMixture(thermal=(0.5, 0.5, 0.5))
    with pytest.raises(SpecError):
        ParticipantProfile("x", survey_rate=0)


def test_spec_load_toml_and_json(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('[cohort]\nn_participants = 4\nphase = "phase1"\nduration_weekdays = 3\nrng_seed = 9\n')
    spec = CohortSpec.load(toml)
    assert (spec.n_participants, spec.phase, spec.duration_weekdays, spec.rng_seed) == (4, Phase.PHASE1, 3, 9)
    js = tmp_path / "c.json"
    js.write_text(json.dumps(spec.to_dict()))
    assert CohortSpec.load(js) == spec
    bad = tmp_path / "bad.toml"
    bad.write_text("[cohort]\nphase = 'phase2'\n")
    with pytest.raises(SpecError):
        CohortSpec.load(bad)


def test_diurnal_scenario_crosses_at_eleven():
    assert scenario_temperature("diurnal", 11.0) == 30.0
    assert scenario_temperature("diurnal", 10.9) < 30.0 < scenario_temperature("diurnal", 11.1)
    assert scenario_temperature("always-hot", 3) == 33.0
    with pytest.raises(SpecError):
        scenario_temperature("monsoon", 12)


def test_clock_ticks_cover_window_inclusive():
    ticks = clock_ticks([date(2024, 1, 9)], TriggerConfig())
    assert len(ticks) == 121
    assert ticks[0].astimezone(SGT).hour == 9 and ticks[-1].astimezone(SGT).hour == 19


def test_switch_happens_at_fiftieth_survey(phase2_run):
    switched = 0
    for pid in phase2_run.streams.participants:
        surveys = phase2_run.store.all(StreamKey.surveys(pid))
        log = phase2_run.store.all(StreamKey.notifications(pid))
        if len(surveys) < 50:
            assert all(r.event.mechanism is Mechanism.THRESHOLD for r in log)
            continue
        fiftieth = surveys[49].ended_at
        switched += 1
        assert phase2_run.engine.switched_at[pid] == fiftieth
        for r in log:
            if r.event.mechanism is Mechanism.PERSONALIZED:
                assert r.event.fired_at > fiftieth
            else:
                assert r.event.fired_at < fiftieth
    assert switched == len(phase2_run.streams.participants)


def test_personalized_never_targets_no_change(phase2_run):
    for r in phase2_run.records:
        if r.event.mechanism is Mechanism.PERSONALIZED:
            assert not r.event.target_label.is_no_change


def test_sent_records_obey_budget_and_window(phase2_run):
    per_day = {}
    for r in phase2_run.records:
        if r.sent:
            lt = r.event.fired_at.astimezone(SGT)
            assert lt.weekday() < 5 and 9 <= lt.hour < 19
            per_day[(r.participant, lt.date())] = per_day.get((r.participant, lt.date()), 0) + 1
    assert max(per_day.values()) <= 4
    # outbox count equals Sent count for every participant-date
    assert len(phase2_run.provider.outbox) == sum(per_day.values())


def test_phase1_has_no_personalized_records():
    result = run_phase(CohortSpec(4, Phase.PHASE1, duration_weekdays=15, rng_seed=1))
    assert result.records
    assert all(r.event.mechanism is Mechanism.THRESHOLD for r in result.records)
    assert result.engine.models == {}


def test_quiet_cool_cohort_gets_nothing():
    calm = ParticipantProfile("calm", 1.0, sound=SoundProfile(50.0, 0.0, 0.0))
    spec = CohortSpec(3, Phase.PHASE1, duration_weekdays=5, profiles=(calm,), weather_fixture="never-hot")
    assert run_phase(spec).records == []


def test_all_no_change_cohort():
    flat = ParticipantProfile("flat", 1.0, PreferenceMixture((0, 1, 0), (0, 1, 0)), survey_rate=8.0)
    p2 = run_phase(CohortSpec(3, Phase.PHASE2, duration_weekdays=10, profiles=(flat,), rng_seed=2))
    p1 = run_phase(CohortSpec(3, Phase.PHASE1, duration_weekdays=10, profiles=(flat,), rng_seed=2))
    assert not any(r.event.mechanism is Mechanism.PERSONALIZED for r in p2.records)
    assert all(m.degenerate for pair in p2.engine.models.values() for m in pair)
    # up to each participant's switch, Phase 2 threshold decisions equal Phase 1's
    for pid, at in p2.engine.switched_at.items():
        before = [r for r in p1.records if r.participant == pid and r.event.fired_at < at]
        assert [r for r in p2.records if r.participant == pid] == before


def test_summary_partitions_log(phase2_run):
    rows = summarize(phase2_run.records, phase2_run.streams.participants)
    assert [r.participant for r in rows] == phase2_run.streams.participants
    sent = sum(r.sent for r in phase2_run.records)
    assert sum(r.threshold_sent + r.personalized_sent for r in rows) == sent
    assert sum(r.threshold_sent + r.personalized_sent + sum(r.suppressed.values()) for r in rows) == len(
        phase2_run.records)


def test_heterogeneous_cohort_fewer_personalized_recipients(phase2_run):
    rows = summarize(phase2_run.records, phase2_run.streams.participants)
    personalized = sum(r.personalized_sent > 0 for r in rows)
    threshold = sum(r.threshold_sent > 0 for r in rows)
    assert personalized < threshold


def test_empty_log_summary(tmp_path):
    rows = summarize([], ["P1", "P2"])
    assert rows == [SummaryRow("P1"), SummaryRow("P2")]
    path = write_summary(rows, tmp_path / "summary.csv")
    assert path.read_text().splitlines() == [
        "id_participant,threshold_sent,personalized_sent,suppressed_outside_window,"
        "suppressed_weekend,suppressed_budget_exhausted,suppressed_dispatch_error",
        "P1,0,0,0,0,0,0", "P2,0,0,0,0,0,0"]
    assert read_summary(path) == rows


def test_summary_round_trip(phase2_run, tmp_path):
    rows = summarize(phase2_run.records, phase2_run.streams.participants)
    assert read_summary(write_summary(rows, tmp_path / "s.csv")) == rows


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_run_directory_is_deterministic(tmp_path):
    spec = CohortSpec(3, Phase.PHASE2, duration_weekdays=12, rng_seed=7)
    for name in ("a", "b"):
        write_run(run_phase(spec, grid=SMALL_GRID), tmp_path / name)
    assert _same_tree(tmp_path / "a", tmp_path / "b")
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"config.json", "surveys.csv", "sensor.csv", "weather.csv", "notifications.csv",
            "summary.csv", "outbox.jsonl", "inputs", "models"} <= names


def test_phase_config_must_match_spec():
    with pytest.raises(SpecError):
        run_phase(CohortSpec(1), phase=PhaseConfig(phase=Phase.PHASE1))


def test_fixture_weather_file(tmp_path):
    from jitai.sim import DEFAULT_STATIONS, scenario_observations
    from jitai.weather import write_fixture

    spec = CohortSpec(2, Phase.PHASE1, duration_weekdays=2)
    path = tmp_path / "w.csv"
    write_fixture(path, scenario_observations("always-hot", DEFAULT_STATIONS, spec.weekdays()))
    from_file = run_phase(replace(spec, weather_fixture=str(path)))
    from_scenario = run_phase(replace(spec, weather_fixture="always-hot"))
    assert from_file.records == from_scenario.records
    assert sum(r.sent for r in from_file.records) == 2 * 2 * 4
    assert all(r.reason in (None, SuppressReason.BUDGET_EXHAUSTED, SuppressReason.OUTSIDE_WINDOW)
               for r in from_file.records if r.status is DeliveryStatus.SUPPRESSED)
