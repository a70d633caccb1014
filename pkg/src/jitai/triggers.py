"""Threshold triggers, notification admission and the engine tick.

Both mechanisms share one admission gate: a message goes out only on a
weekday, inside the local daily window, while the participant still has
budget left for that local date. Suppressed decisions are logged too, and
never use up budget.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from datetime import date, datetime
from typing import Iterable

from .dispatch import MessageTemplates, MockProvider, PushProvider, render, send
from .domain import (
    CauseKind,
    DeliveryStatus,
    LabelKind,
    Mechanism,
    NotificationRecord,
    Phase,
    PhaseConfig,
    PreferenceLabel,
    SensorKind,
    SensorSample,
    SuppressReason,
    TriggerConfig,
    TriggerEvent,
)
from .forest import ForestParams
from .personalize import (
    DayPlan,
    PersonalModel,
    mode_of,
    plan_day,
    train_personal_model,
)
from .store import StreamKey, TimeSeriesStore

logger = logging.getLogger(__name__)

# Threshold messages nudge toward relief from the measured exceedance.
THRESHOLD_TARGET = {
    LabelKind.THERMAL: PreferenceLabel(LabelKind.THERMAL, "prefer_cooler"),
    LabelKind.NOISE: PreferenceLabel(LabelKind.NOISE, "prefer_quieter"),
}


def latest_location(store: TimeSeriesStore, participant: str, t: datetime):
    survey = store.latest_at_or_before(StreamKey.surveys(participant), t)
    return None if survey is None else (survey.lat, survey.lon)


def evaluate_thermal(
    store: TimeSeriesStore, participant: str, t: datetime, config: TriggerConfig = TriggerConfig()
) -> TriggerEvent | None:
    obs = store.latest_at_or_before(StreamKey.weather(participant), t)
    if obs is None or not obs.air_temperature > config.temp_threshold_c:
        return None
    return TriggerEvent(
        participant=participant,
        kind=LabelKind.THERMAL,
        mechanism=Mechanism.THRESHOLD,
        target_label=THRESHOLD_TARGET[LabelKind.THERMAL],
        fired_at=t,
        cause_kind=CauseKind.TEMPERATURE,
        cause_value=obs.air_temperature,
        location=latest_location(store, participant, t),
    )


def noise_event(
    sample: SensorSample, t: datetime, config: TriggerConfig, location=None
) -> TriggerEvent | None:
    if not sample.value > config.noise_threshold_dba:
        return None
    return TriggerEvent(
        participant=sample.participant,
        kind=LabelKind.NOISE,
        mechanism=Mechanism.THRESHOLD,
        target_label=THRESHOLD_TARGET[LabelKind.NOISE],
        fired_at=t,
        cause_kind=CauseKind.SOUND_LEVEL,
        cause_value=sample.value,
        location=location,
    )


def evaluate_noise(
    store: TimeSeriesStore, participant: str, t: datetime, config: TriggerConfig = TriggerConfig()
) -> TriggerEvent | None:
    key = StreamKey.sensor(participant, SensorKind.SOUND_LEVEL)
    sample = store.latest_at_or_before(key, t)
    if sample is None:
        return None
    return noise_event(sample, t, config, latest_location(store, participant, t))


@dataclass(frozen=True)
class Admission:
    status: DeliveryStatus
    sequence_in_day: int | None = None
    reason: SuppressReason | None = None

    @property
    def sent(self) -> bool:
        return self.status is DeliveryStatus.SENT


class BudgetLedger:
    """Messages sent per (participant, local date)."""

    def __init__(self) -> None:
        self._sent: dict[tuple[str, date], int] = {}
        self.lock = threading.RLock()

    def sent_count(self, participant: str, local_date: date) -> int:
        return self._sent.get((participant, local_date), 0)

    def check(self, event: TriggerEvent, config: TriggerConfig) -> Admission:
        """Decide without consuming budget."""
        local = config.local(event.fired_at)
        if config.weekdays_only and local.weekday() >= 5:
            return Admission(DeliveryStatus.SUPPRESSED, reason=SuppressReason.WEEKEND)
        if not config.window_start_hour <= local.hour < config.window_end_hour:
            return Admission(DeliveryStatus.SUPPRESSED, reason=SuppressReason.OUTSIDE_WINDOW)
        used = self.sent_count(event.participant, local.date())
        if used >= config.daily_budget:
            return Admission(DeliveryStatus.SUPPRESSED, reason=SuppressReason.BUDGET_EXHAUSTED)
        return Admission(DeliveryStatus.SENT, sequence_in_day=used + 1)

    def record_sent(self, event: TriggerEvent, config: TriggerConfig, sequence: int) -> None:
        with self.lock:
            self._sent[(event.participant, config.local(event.fired_at).date())] = sequence

    def admit(self, event: TriggerEvent, config: TriggerConfig) -> Admission:
        with self.lock:
            decision = self.check(event, config)
            if decision.sent:
                self.record_sent(event, config, decision.sequence_in_day)
            return decision


def admit(ledger: BudgetLedger, event: TriggerEvent, config: TriggerConfig = TriggerConfig()) -> Admission:
    return ledger.admit(event, config)


class Engine:
    """Evaluates every participant at each tick of an injected clock.

    Threshold mode checks the latest weather reading each tick and every
    sound sample that arrived since the previous tick. Personalized mode
    (Phase 2, from the switch-count-th survey on) fires the day's planned
    hourly slots as the clock passes them.
    """

    def __init__(
        self,
        store: TimeSeriesStore,
        config: TriggerConfig = TriggerConfig(),
        phase: PhaseConfig = PhaseConfig(),
        provider: PushProvider | None = None,
        templates: MessageTemplates | None = None,
        seed: int = 0,
        grid: list[ForestParams] | None = None,
    ):
        self.store = store
        self.config = config
        self.phase = phase
        self.provider = provider if provider is not None else MockProvider()
        self.templates = templates or MessageTemplates.load()
        self.seed = seed
        self.grid = grid
        self.ledger = BudgetLedger()
        self.models: dict[str, tuple[PersonalModel, PersonalModel]] = {}
        self.switched_at: dict[str, datetime] = {}
        self._sound_seen: dict[str, int] = {}
        self._plans: dict[tuple[str, date], DayPlan] = {}
        self._last_tick: datetime | None = None

    def ensure_models(self, participant: str, t: datetime) -> bool:
        """Train the participant's two models once enough surveys exist at ``t``."""
        if participant in self.models:
            return True
        n = self.phase.personalization_switch_count
        if self.store.count_surveys(participant, t) < n:
            return False
        history = self.store.all(StreamKey.surveys(participant))[:n]
        seed = self.seed + _stable_hash(participant)
        self.models[participant] = tuple(
            train_personal_model(participant, history, kind, grid=self.grid,
                                 seed=seed, tz=self.config.tz)
            for kind in (LabelKind.THERMAL, LabelKind.NOISE)
        )
        self.switched_at[participant] = history[-1].ended_at
        logger.info("trained personal models for %s", participant)
        return True

    def mechanism(self, participant: str, t: datetime) -> Mechanism | None:
        """Active mechanism at ``t``; None when nothing may fire yet."""
        count = self.store.count_surveys(participant, t)
        if self.phase.phase is Phase.PHASE1:
            if self.phase.threshold_after_switch and count < self.phase.personalization_switch_count:
                return None
            return Mechanism.THRESHOLD
        trained = count >= self.phase.personalization_switch_count and self.ensure_models(participant, t)
        return mode_of(count, self.phase, trained)

    def plan_for(self, participant: str, local_date: date) -> DayPlan:
        key = (participant, local_date)
        if key not in self._plans:
            thermal_model, noise_model = self.models[participant]
            history = self.store.all(StreamKey.surveys(participant))[: thermal_model.training_size]
            self._plans[key] = plan_day(thermal_model, noise_model, history, local_date, self.config)
        return self._plans[key]

    def _new_sound_samples(self, participant: str, t: datetime) -> list[SensorSample]:
        key = StreamKey.sensor(participant, SensorKind.SOUND_LEVEL)
        upto = self.store.count(key, t)
        seen = self._sound_seen.get(participant, 0)
        self._sound_seen[participant] = max(seen, upto)
        return self.store.slice(key, seen, upto) if upto > seen else []

    def threshold_events(self, participant: str, t: datetime) -> list[TriggerEvent]:
        events = []
        thermal_event = evaluate_thermal(self.store, participant, t, self.config)
        if thermal_event is not None:
            events.append(thermal_event)
        location = latest_location(self.store, participant, t)
        for sample in self._new_sound_samples(participant, t):
            ev = noise_event(sample, t, self.config, location)
            if ev is not None:
                events.append(ev)
        return events

    def personalized_events(self, participant: str, t: datetime, since: datetime) -> list[TriggerEvent]:
        local = self.config.local(t)
        plan = self.plan_for(participant, local.date())
        location = latest_location(self.store, participant, t)
        events = []
        due = []
        for entry in plan.entries:
            slot = local.replace(hour=entry.hour, minute=0, second=0, microsecond=0)
            if since < slot <= t and slot > self.switched_at[participant]:
                due.append(entry)
        due.sort(key=lambda e: (e.hour, e.kind is not LabelKind.THERMAL))
        for entry in due:
            events.append(TriggerEvent(
                participant=participant,
                kind=entry.kind,
                mechanism=Mechanism.PERSONALIZED,
                target_label=entry.target_label,
                fired_at=t,
                cause_kind=CauseKind.PROBABILITY,
                cause_value=entry.probability,
                location=location,
            ))
        return events

    def decide(self, event: TriggerEvent) -> NotificationRecord:
        """Admit, render, dispatch and log one candidate event."""
        text = render(event, self.templates, self.config)
        with self.ledger.lock:
            decision = self.ledger.check(event, self.config)
            if decision.sent:
                record = NotificationRecord(event, text, DeliveryStatus.SENT, decision.sequence_in_day)
                receipt = send(record, self.provider)
                if receipt.accepted:
                    self.ledger.record_sent(event, self.config, decision.sequence_in_day)
                else:
                    record = NotificationRecord(event, text, DeliveryStatus.SUPPRESSED,
                                                reason=SuppressReason.DISPATCH_ERROR)
            else:
                record = NotificationRecord(event, text, DeliveryStatus.SUPPRESSED,
                                            reason=decision.reason)
        self.store.append(StreamKey.notifications(event.participant), record)
        return record

    def run_tick(self, t: datetime, participants: Iterable[str]) -> list[NotificationRecord]:
        since = self._last_tick if self._last_tick is not None else t - self.config.weather_poll_interval
        self._last_tick = t
        records = []
        for participant in sorted(set(participants)):
            mech = self.mechanism(participant, t)
            if mech is Mechanism.PERSONALIZED:
                # keep the sound cursor current so a later threshold phase never replays it
                self._new_sound_samples(participant, t)
                events = self.personalized_events(participant, t, since)
            elif mech is Mechanism.THRESHOLD:
                events = self.threshold_events(participant, t)
            else:
                self._new_sound_samples(participant, t)
                events = []
            records.extend(self.decide(ev) for ev in events)
        return records


def _stable_hash(text: str) -> int:
    h = 0
    for ch in text.encode("utf-8"):
        h = (h * 131 + ch) % 1_000_003
    return h
