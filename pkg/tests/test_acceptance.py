"""Acceptance criteria, one test per criterion.

Each test is marked ``acceptance(n, title)``; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run.
"""

import bisect
import io
import math
import random
import time
from collections import Counter, defaultdict
from datetime import date, timedelta

import numpy as np
import pytest

from jitai.cli import run as cli_run
from jitai.dispatch import MockProvider
from jitai.domain import (
    CLASS_ORDER,
    CauseKind,
    LabelKind,
    Mechanism,
    Phase,
    PhaseConfig,
    PreferenceLabel,
    SensorKind,
    TriggerConfig,
    TriggerEvent,
)
from jitai.forest import ForestParams
from jitai.personalize import FeatureVector, class_proportions, plan_day, predict_proba, train_personal_model
from jitai.sim import CohortSpec, run_phase, summarize
from jitai.spatial import bin_records, hex_center, project, to_hex
from jitai.store import StreamKey, TimeSeriesStore, read_csv, records_to_csv
from jitai.triggers import Engine

import oracles
from conftest import SGT, local, sound, survey, weather

ONE_TREE = [ForestParams(n_trees=1, max_depth=None, min_leaf=1, feature_subset_size=None)]
SMALL_GRID = [ForestParams(5, 2, 1, 2), ForestParams(5, None, 1, 2)]
PLAN_DATE = date(2024, 3, 5)


@pytest.fixture(scope="module")
def cohort55():
    """A full-size Phase 2 deployment: 55 participants over 20 weekdays."""
    spec = CohortSpec(55, Phase.PHASE2, duration_weekdays=20, rng_seed=2024)
    start = time.perf_counter()
    result = run_phase(spec)
    return result, time.perf_counter() - start


def _history(rng, n=50, mixture=None, start=(2024, 1, 8)):
    """Random survey history; ``mixture(hour)`` gives thermal and noise class probabilities."""
    out = []
    day0 = local(*start)
    for i in range(n):
        day = day0 + timedelta(days=(i // 5) + 2 * (i // 25))
        hour = rng.randint(9, 18)
        at = day + timedelta(hours=hour, minutes=rng.randint(0, 59))
        pt, pn = mixture(hour)
        thermal = rng.choices(CLASS_ORDER[LabelKind.THERMAL], weights=pt)[0]
        noise = rng.choices(CLASS_ORDER[LabelKind.NOISE], weights=pn)[0]
        src = None if noise == "no_change" else "traffic"
        out.append(survey(ended_at=at, thermal=thermal, noise=noise, sound_source=src))
    return sorted(out, key=lambda s: s.ended_at)


def _random_mixture(rng):
    base = [rng.random() for _ in range(3)], [rng.random() for _ in range(3)]
    hot = {h: [rng.random() for _ in range(3)] for h in rng.sample(range(9, 19), rng.randint(0, 5))}
    return lambda hour: (hot.get(hour, base[0]), base[1])


# --- 1 ------------------------------------------------------------------------

@pytest.mark.acceptance(1, "budget law")
def test_budget_law(record_property):
    rng = random.Random(1)
    store = TimeSeriesStore()
    engine = Engine(store, TriggerConfig(), PhaseConfig(phase=Phase.PHASE1), provider=MockProvider())
    participants = [f"P{i:03d}" for i in range(200)]
    days = [date(2024, 1, 1) + timedelta(days=k) for k in range(50)]  # includes weekends
    events = []
    for pid in participants:
        for day in days:
            midnight = local(day.year, day.month, day.day)
            for _ in range(rng.randint(0, 12)):
                at = midnight + timedelta(seconds=rng.randrange(86400))
                kind = rng.choice(list(LabelKind))
                if rng.random() < 0.5:
                    target = "prefer_cooler" if kind is LabelKind.THERMAL else "prefer_quieter"
                    cause, value, mech = (CauseKind.TEMPERATURE if kind is LabelKind.THERMAL
                                          else CauseKind.SOUND_LEVEL), 75.0, Mechanism.THRESHOLD
                else:
                    target = rng.choice([v for v in CLASS_ORDER[kind] if v != "no_change"])
                    cause, value, mech = CauseKind.PROBABILITY, rng.uniform(0.34, 1.0), Mechanism.PERSONALIZED
                events.append(TriggerEvent(pid, kind, mech, PreferenceLabel(kind, target), at, cause, value))
    events.sort(key=lambda e: (e.fired_at, e.participant))
    start = time.perf_counter()
    for ev in events:
        engine.decide(ev)
    elapsed = time.perf_counter() - start

    per_day = Counter()
    weekend = outside = 0
    n_records = 0
    for pid in participants:
        for rec in store.all(StreamKey.notifications(pid)):
            n_records += 1
            if not rec.sent:
                continue
            lt = rec.event.fired_at.astimezone(SGT)
            per_day[(pid, lt.date())] += 1
            weekend += lt.weekday() >= 5
            outside += not (9 <= lt.hour < 19)
    over = sum(1 for n in per_day.values() if n > 4)
    full_days = sum(1 for n in per_day.values() if n == 4)
    record_property("detail", f"{len(participants) * len(days)} participant-days, {len(events)} events, "
                              f"{over} over-budget, {weekend} weekend, {outside} off-window, {elapsed:.2f}s")
    assert n_records == len(events)
    assert over == weekend == outside == 0
    assert full_days > 1000  # the cap was actually exercised
    assert elapsed < 10.0


# --- 2 ------------------------------------------------------------------------

@pytest.mark.acceptance(2, "threshold exactness")
def test_threshold_exactness(record_property):
    rng = random.Random(2)
    store = TimeSeriesStore()
    engine = Engine(store, TriggerConfig(), PhaseConfig(phase=Phase.PHASE1), provider=MockProvider())
    participants = ["A", "B", "C", "D", "E"]
    t0 = local(2024, 1, 8)
    ticks = [t0 + timedelta(minutes=5 * k) for k in range(3 * 288)]
    series = {}
    for pid in participants:
        temps, t = [], t0 - timedelta(minutes=rng.randint(0, 20))
        while t < ticks[-1]:
            temps.append((t, rng.choice([28.0, 29.5, 30.0, 30.0, 30.5, 31.0, 32.5])))
            t += timedelta(minutes=rng.randint(1, 17))
        samples, t = [], t0 + timedelta(minutes=rng.randint(-40, 40))
        while t < ticks[-1] + timedelta(hours=1):
            samples.append((t, rng.choice([60.0, 69.5, 70.0, 70.0, 70.5, 74.3, 80.0])))
            t += timedelta(minutes=30)
        series[pid] = (temps, samples)
        for at, temp in temps:
            store.append(StreamKey.weather(pid), weather(temp=temp, at=at))
        for at, value in samples:
            store.append(StreamKey.sensor(pid, SensorKind.SOUND_LEVEL), sound(pid, value, at))

    got = set()
    for t in ticks:
        for rec in engine.run_tick(t, participants):
            got.add((rec.participant, rec.event.kind, rec.event.fired_at, rec.event.cause_value))

    want = set()
    for pid, (temps, samples) in series.items():
        for t in ticks:
            latest = None
            for at, temp in temps:  # plain scan, last reading at or before the tick
                if at <= t:
                    latest = temp
            if latest is not None and latest > 30.0:
                want.add((pid, LabelKind.THERMAL, t, latest))
        for at, value in samples:
            i = bisect.bisect_left(ticks, at)  # first tick at or after arrival
            if i < len(ticks) and value > 70.0:
                want.add((pid, LabelKind.NOISE, ticks[i], value))
    n_thermal = sum(1 for e in want if e[1] is LabelKind.THERMAL)
    record_property("detail", f"{len(want)} expected events ({n_thermal} thermal), {len(got)} fired, "
                              f"{len(want ^ got)} differences")
    assert got == want


# --- 3 ------------------------------------------------------------------------

@pytest.mark.acceptance(3, "personalization protocol")
def test_personalization_protocol(cohort55, record_property):
    result, _ = cohort55
    switched = personalized = 0
    for pid in result.streams.participants:
        surveys = result.store.all(StreamKey.surveys(pid))
        log = result.store.all(StreamKey.notifications(pid))
        if len(surveys) < 50:
            assert all(r.event.mechanism is Mechanism.THRESHOLD for r in log)
            continue
        switched += 1
        fiftieth = surveys[49].ended_at
        for r in log:
            if r.event.mechanism is Mechanism.PERSONALIZED:
                personalized += 1
                assert r.event.fired_at > fiftieth
            else:
                assert r.event.fired_at < fiftieth
    phase1 = run_phase(CohortSpec(55, Phase.PHASE1, duration_weekdays=20, rng_seed=2024))
    p1_personalized = sum(r.event.mechanism is Mechanism.PERSONALIZED for r in phase1.records)
    record_property("detail", f"phase 2: {switched}/55 switched, {personalized} personalized records; "
                              f"phase 1: {len(phase1.records)} records, {p1_personalized} personalized")
    assert switched > 0 and personalized > 0
    assert p1_personalized == 0


# --- 4 ------------------------------------------------------------------------

@pytest.mark.acceptance(4, "forest oracle equivalence")
def test_forest_oracle_equivalence(record_property):
    rng = random.Random(4)
    checked = 0
    for _ in range(200):
        hours = list(range(9, 20)) + [rng.randint(9, 19) for _ in range(9)]
        rng.shuffle(hours)
        cut = rng.randint(10, 19)
        low, high = rng.sample(CLASS_ORDER[LabelKind.THERMAL], 2)
        hist = []
        for i, h in enumerate(hours):
            at = local(2024, 1, 8 + i // 4, h, rng.randint(0, 59))
            hist.append(survey(ended_at=at, thermal=high if h >= cut else low))
        hist.sort(key=lambda s: s.ended_at)
        model = train_personal_model("P", hist, LabelKind.THERMAL, grid=ONE_TREE, bootstrap=False)
        majority = oracles.majority_by_hour([s.ended_at.astimezone(SGT).hour for s in hist],
                                            [s.thermal.index for s in hist])
        props = class_proportions([s.thermal for s in hist], LabelKind.THERMAL)
        for h in range(9, 20):
            assert int(np.argmax(predict_proba(model, FeatureVector(props, h)))) == majority[h]
            checked += 1

    # planner picks the hour whose best non-no-change probability is largest
    planner_checked = 0
    for k in range(30):
        hist = _history(rng, mixture=_random_mixture(rng))
        thermal = train_personal_model("P", hist, LabelKind.THERMAL, seed=k)
        noise = train_personal_model("P", hist, LabelKind.NOISE, seed=k)
        plan = plan_day(thermal, noise, hist, PLAN_DATE)
        best = None
        for rank, model in enumerate((thermal, noise)):
            props = class_proportions([s.label(model.label_kind) for s in hist], model.label_kind)
            for h in range(9, 20):
                p = predict_proba(model, FeatureVector(props, h))
                if model.class_order[int(np.argmax(p))] != "no_change":
                    key = (-p.max(), h, rank)
                    best = key if best is None or key < best else best
        if best is None:
            assert plan.entries == ()
        else:
            assert (-plan.entries[0].probability, plan.entries[0].hour) == best[:2]
            planner_checked += 1

    # a participant who prefers cooler air around 10:00
    pairs = [(h, "prefer_cooler" if h == 10 else "no_change")
             for h in [rng.choice([9, 10, 10, 10, 11, 12, 13, 15, 16, 17]) for _ in range(50)]]
    hist = sorted((survey(ended_at=local(2024, 1, 8 + i // 5, h, 7 * (i % 5)), thermal=v)
                   for i, (h, v) in enumerate(pairs)), key=lambda s: s.ended_at)
    plan = plan_day(train_personal_model("P", hist, LabelKind.THERMAL, seed=7),
                    train_personal_model("P", hist, LabelKind.NOISE, seed=7), hist, PLAN_DATE)
    record_property("detail", f"{checked} hourly argmax checks on 200 fixtures, {planner_checked} planner "
                              f"checks, morning-cooler plan starts at {plan.entries[0].hour}:00")
    assert (plan.entries[0].hour, plan.entries[0].target_label.value) == (10, "prefer_cooler")


# --- 5 ------------------------------------------------------------------------

@pytest.mark.acceptance(5, "plan shape")
def test_plan_shape(record_property):
    rng = random.Random(5)
    plans = 0
    non_empty = 0
    for k in range(500):
        hist = _history(rng, mixture=_random_mixture(rng))
        thermal = train_personal_model("P", hist, LabelKind.THERMAL, grid=SMALL_GRID, seed=k)
        noise = train_personal_model("P", hist, LabelKind.NOISE, grid=SMALL_GRID, seed=k)
        for plan in (plan_day(thermal, noise, hist, PLAN_DATE), plan_day(thermal, None, hist, PLAN_DATE),
                     plan_day(None, noise, hist, PLAN_DATE)):
            plans += 1
            non_empty += bool(plan.entries)
            assert len(plan.entries) <= 4
            for e in plan.entries:
                assert 9 <= e.hour <= 19 and not e.target_label.is_no_change and 0 < e.probability <= 1
            keys = [(-e.probability, e.hour) for e in plan.entries]
            assert keys == sorted(keys)
    empty = 0
    for k in range(50):
        hist = _history(rng, mixture=lambda hour: ((0, 1, 0), (0, 1, 0)))
        models = [train_personal_model("P", hist, kind, seed=k) for kind in LabelKind]
        assert plan_day(*models, hist, PLAN_DATE).entries == ()
        empty += 1
    record_property("detail", f"1000 models, {plans} plans ({non_empty} non-empty), "
                              f"{empty} all-no-change histories gave empty plans")


# --- 6 ------------------------------------------------------------------------

@pytest.mark.acceptance(6, "probability validity")
def test_probability_validity(record_property):
    rng = random.Random(6)
    np_rng = np.random.default_rng(6)
    models = []
    for k in range(20):
        hist = _history(rng, mixture=_random_mixture(rng))
        models.append(train_personal_model("P", hist, rng.choice(list(LabelKind)), seed=k))
    worst = 0.0
    for i in range(10_000):
        props = tuple(np_rng.dirichlet([1, 1, 1]))
        p = predict_proba(models[i % len(models)], FeatureVector(props, int(np_rng.integers(0, 24))))
        assert (p >= 0).all()
        worst = max(worst, abs(float(p.sum()) - 1.0))
    record_property("detail", f"10000 calls on {len(models)} models, max |sum-1| = {worst:.1e}")
    assert worst <= 1e-9


# --- 7 ------------------------------------------------------------------------

@pytest.mark.acceptance(7, "spatial conservation")
def test_spatial_conservation(cohort55, record_property):
    result, _ = cohort55
    log = result.records
    located = sum(1 for r in log if r.sent and r.event.location is not None)
    for edge in (100.0, 250.0, 1000.0):
        binned = bin_records(log, (1.3521, 103.8198), edge)
        assert sum(c.count for c in binned.cells) == binned.located == located
    rng = random.Random(7)
    for _ in range(40):  # random synthetic logs too
        sample = rng.sample(log, 500)
        want = sum(1 for r in sample if r.sent and r.event.location is not None)
        assert sum(c.count for c in bin_records(sample, (1.35, 103.8), 250.0).cells) == want

    origin = (1.3521, 103.8198)
    for _ in range(1000):
        lat, lon = origin[0] + rng.uniform(-0.15, 0.15), origin[1] + rng.uniform(-0.2, 0.2)
        edge = rng.choice([50.0, 250.0, 800.0])
        x, y = project(lat, lon, origin)
        best = None
        r0 = round(y / (1.5 * edge))
        q0 = round(x / (edge * math.sqrt(3)) - r0 / 2)
        for q in range(q0 - 3, q0 + 4):
            for r in range(r0 - 3, r0 + 4):
                cx, cy = hex_center(q, r, edge)
                d = (x - cx) ** 2 + (y - cy) ** 2
                if best is None or d < best[0]:
                    best = (d, (q, r))
        assert to_hex(lat, lon, origin, edge) == best[1]
    record_property("detail", f"{located} geolocated sent records conserved at 3 edge sizes; "
                              f"1000 to_hex points match brute force")


# --- 8 ------------------------------------------------------------------------

def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.acceptance(8, "determinism and I/O")
def test_determinism_and_round_trips(tmp_path, record_property):
    cfg = tmp_path / "cohort.toml"
    cfg.write_text('[cohort]\nn_participants = 6\nphase = "phase2"\nduration_weekdays = 14\nrng_seed = 8\n')
    for name in ("a", "b"):
        assert cli_run(["simulate", str(cfg), "--out", str(tmp_path / name)]) == 0
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a == b

    result = run_phase(CohortSpec(6, Phase.PHASE2, duration_weekdays=14, rng_seed=8))
    written = result.store.export_csv(tmp_path / "csv")
    for series, path in written.items():
        pairs = read_csv(path)
        assert records_to_csv(pairs) == path.read_text(encoding="utf-8")
        rebuilt = TimeSeriesStore()
        for pid, rec in pairs:
            rebuilt.append(StreamKey.for_record(rec, pid), rec)
        again = rebuilt.export_csv(tmp_path / f"csv2-{series.value}", series=[series])[series]
        assert again.read_bytes() == path.read_bytes()
    first = io.StringIO()
    result.store.export_jsonl(first)
    loaded = TimeSeriesStore()
    from jitai.codec import SERIES_NAMES
    assert loaded.import_jsonl(io.StringIO(first.getvalue()), allowed=SERIES_NAMES).ok
    second = io.StringIO()
    loaded.export_jsonl(second)
    assert first.getvalue() == second.getvalue()
    record_property("detail", f"{len(a)} run files byte-identical; CSV ({len(written)} series) and "
                              f"JSONL ({first.getvalue().count(chr(10))} lines) round-trips are fixed points")


# --- 9 ------------------------------------------------------------------------

@pytest.mark.acceptance(9, "scale")
def test_scale(cohort55, record_property):
    result, elapsed = cohort55
    rows = summarize(result.records, result.streams.participants)
    trained = len(result.engine.models)
    personalized = sum(r.personalized_sent > 0 for r in rows)
    threshold = sum(r.threshold_sent > 0 for r in rows)
    per_day = defaultdict(int)
    for r in result.records:
        if r.sent:
            per_day[(r.participant, r.event.fired_at.astimezone(SGT).date())] += 1
    record_property("detail", f"55 x 20 weekdays in {elapsed:.1f}s, {trained} participants trained, "
                              f"{personalized}/55 got personalized and {threshold}/55 threshold messages")
    assert trained == 55
    assert max(per_day.values()) <= 4
    assert elapsed < 60.0
