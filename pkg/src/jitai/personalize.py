"""Per-participant preference models and daily personalized send plans.

Each participant gets one forest per label kind, trained once on their first
micro-surveys. A training row pairs the empirical class proportions of all
earlier responses with the hour of day of the current response; at planning
time the proportions over the whole training history are combined with each
candidate hour.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import (
    CLASS_ORDER,
    NO_CHANGE,
    LabelKind,
    Mechanism,
    MicroSurveyResponse,
    Phase,
    PhaseConfig,
    PreferenceLabel,
    TriggerConfig,
)
from .forest import (
    DecisionTree,
    ForestParams,
    RandomForest,
    TreeParams,
    cross_validate,
    default_grid,
    fit_forest,
)

logger = logging.getLogger(__name__)


class InsufficientSurveys(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    class_cumulative: tuple[float, ...]
    hour_of_day: int

    def as_array(self) -> np.ndarray:
        # hour goes first: equally good splits resolve toward the hour feature
        return np.array((float(self.hour_of_day), *self.class_cumulative))


N_FEATURES = 4


def class_proportions(labels: Sequence[PreferenceLabel], kind: LabelKind) -> tuple[float, ...]:
    """Empirical class proportions in class order; uniform for an empty history."""
    order = CLASS_ORDER[kind]
    if not labels:
        return tuple(1.0 / len(order) for _ in order)
    counts = [0] * len(order)
    for label in labels:
        counts[label.index] += 1
    return tuple(c / len(labels) for c in counts)


def extract_training_set(
    history: Sequence[MicroSurveyResponse], kind: LabelKind, tz=None
) -> list[tuple[FeatureVector, PreferenceLabel]]:
    if not history:
        raise InsufficientSurveys("empty survey history")
    kind = LabelKind(kind)
    tz = tz or TriggerConfig().tz
    order = CLASS_ORDER[kind]
    counts = [0] * len(order)
    rows = []
    for i, survey in enumerate(history):
        label = survey.label(kind)
        if i == 0:
            props = tuple(1.0 / len(order) for _ in order)
        else:
            props = tuple(c / i for c in counts)
        hour = survey.ended_at.astimezone(tz).hour
        rows.append((FeatureVector(props, hour), label))
        counts[label.index] += 1
    return rows


@dataclass
class PersonalModel:
    participant: str
    label_kind: LabelKind
    forest: RandomForest
    training_size: int
    selected_hyperparams: dict
    class_order: tuple[str, ...]
    degenerate: bool = False

    def predict_proba(self, features: FeatureVector) -> np.ndarray:
        return predict_proba(self, features)

    def to_json(self) -> dict:
        return {
            "participant": self.participant,
            "label_kind": self.label_kind.value,
            "class_order": list(self.class_order),
            "training_size": self.training_size,
            "degenerate": self.degenerate,
            "selected_hyperparams": self.selected_hyperparams,
            "forest": [tree.to_nodes() for tree in self.forest.trees],
        }

    @classmethod
    def from_json(cls, obj: dict) -> PersonalModel:
        kind = LabelKind(obj["label_kind"])
        order = tuple(obj["class_order"])
        if order != CLASS_ORDER[kind]:
            raise ValueError(f"class order {order} does not match {kind.value} labels")
        trees = [DecisionTree.from_nodes(nodes) for nodes in obj["forest"]]
        if not trees:
            raise ValueError("model has an empty forest")
        return cls(
            participant=obj["participant"],
            label_kind=kind,
            forest=RandomForest(trees, len(order)),
            training_size=int(obj["training_size"]),
            selected_hyperparams=dict(obj["selected_hyperparams"]),
            class_order=order,
            degenerate=bool(obj.get("degenerate", False)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> PersonalModel:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def train_personal_model(
    participant: str,
    history: Sequence[MicroSurveyResponse],
    kind: LabelKind,
    grid: Sequence[ForestParams] | None = None,
    seed: int = 0,
    folds: int = 3,
    tz=None,
    bootstrap: bool = True,
) -> PersonalModel:
    """Fit one participant's forest for ``kind`` on ``history``.

    Hyperparameters are picked by ``folds``-fold stratified cross-validation,
    then the chosen setting is refit on all rows with bootstrap sampling
    (unless ``bootstrap`` is off). A history with a single class yields a
    constant (degenerate) model.
    """
    kind = LabelKind(kind)
    rows = extract_training_set(history, kind, tz)
    X = np.array([fv.as_array() for fv, _ in rows])
    y = np.array([label.index for _, label in rows], dtype=np.int64)
    n_classes = len(CLASS_ORDER[kind])
    if np.unique(y).shape[0] == 1:
        tree = DecisionTree.constant(n_classes, int(y[0]), float(len(y)))
        return PersonalModel(
            participant, kind, RandomForest([tree], n_classes), len(rows),
            {"degenerate_label": CLASS_ORDER[kind][int(y[0])]}, CLASS_ORDER[kind], True,
        )
    grid = list(grid) if grid is not None else default_grid(N_FEATURES)
    cv = cross_validate(X, y, n_classes, grid, k=folds, seed=seed)
    p = cv.params
    forest = fit_forest(
        X, y, n_classes, p.n_trees,
        TreeParams(p.max_depth, p.min_leaf, p.feature_subset_size, rng_seed=seed),
        bootstrap=bootstrap,
    )
    chosen = p.to_dict() | {"cv_accuracy": cv.accuracy, "folds": folds, "seed": seed,
                            "bootstrap": bootstrap}
    return PersonalModel(participant, kind, forest, len(rows), chosen, CLASS_ORDER[kind])


def predict_proba(model: PersonalModel, features: FeatureVector) -> np.ndarray:
    return model.forest.predict_proba(features.as_array())[0]


@dataclass(frozen=True)
class PlanEntry:
    hour: int
    kind: LabelKind
    target_label: PreferenceLabel
    probability: float


@dataclass(frozen=True)
class DayPlan:
    participant: str
    local_date: date
    entries: tuple[PlanEntry, ...] = field(default_factory=tuple)

    def due(self, hour: int) -> list[PlanEntry]:
        return [e for e in self.entries if e.hour == hour]


def hourly_candidates(
    model: PersonalModel, history: Sequence[MicroSurveyResponse], hours: Sequence[int]
) -> list[PlanEntry]:
    kind = model.label_kind
    props = class_proportions([s.label(kind) for s in history], kind)
    X = np.array([FeatureVector(props, h).as_array() for h in hours])
    proba = model.forest.predict_proba(X)
    out = []
    for h, row in zip(hours, proba):
        best = int(np.argmax(row))
        value = model.class_order[best]
        if value != NO_CHANGE:
            out.append(PlanEntry(h, kind, PreferenceLabel(kind, value), float(row[best])))
    return out


def plan_day(
    model_thermal: PersonalModel | None,
    model_noise: PersonalModel | None,
    history: Sequence[MicroSurveyResponse],
    local_date: date,
    config: TriggerConfig = TriggerConfig(),
) -> DayPlan:
    """Pick up to ``daily_budget`` (hour, label) sends for one local date.

    Every hour from the window start through the window end hour inclusive
    is scored by each model; hours whose most likely class is not no-change
    become candidates, ranked by probability (then earlier hour, then thermal
    before noise). Fewer candidates than the budget are never padded.
    """
    hours = list(range(config.window_start_hour, config.window_end_hour + 1))
    candidates: list[PlanEntry] = []
    participant = ""
    for model in (model_thermal, model_noise):
        if model is not None:
            participant = participant or model.participant
            candidates.extend(hourly_candidates(model, history, hours))
    kind_rank = {LabelKind.THERMAL: 0, LabelKind.NOISE: 1}
    candidates.sort(key=lambda e: (-e.probability, e.hour, kind_rank[e.kind]))
    return DayPlan(participant, local_date, tuple(candidates[: config.daily_budget]))


def mode_of(
    survey_count: int, phase_config: PhaseConfig, models_trained: bool
) -> Mechanism:
    if phase_config.phase is Phase.PHASE1:
        return Mechanism.THRESHOLD
    if survey_count >= phase_config.personalization_switch_count and models_trained:
        return Mechanism.PERSONALIZED
    return Mechanism.THRESHOLD


def training_history(
    surveys: Sequence[MicroSurveyResponse], phase_config: PhaseConfig = PhaseConfig()
) -> list[MicroSurveyResponse]:
    """The first ``personalization_switch_count`` surveys, or raise if there are fewer."""
    n = phase_config.personalization_switch_count
    if len(surveys) < n:
        raise InsufficientSurveys(f"insufficient surveys (need {n})")
    return list(surveys[:n])
