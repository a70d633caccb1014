"""Message rendering and delivery through pluggable push providers."""

from __future__ import annotations

import json
import logging
import os
import string
import threading
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Callable, Mapping, Protocol

from .codec import format_time
from .domain import (
    CLASS_ORDER,
    NO_CHANGE,
    CauseKind,
    LabelKind,
    Mechanism,
    NotificationRecord,
    TriggerConfig,
    TriggerEvent,
)

logger = logging.getLogger(__name__)

THRESHOLD_KEY = "threshold"

_PLACEHOLDERS = {
    (LabelKind.THERMAL, THRESHOLD_KEY): {"temperature", "hour"},
    (LabelKind.NOISE, THRESHOLD_KEY): {"sound_level", "hour"},
}


class TemplateError(ValueError):
    pass


def template_keys() -> list[str]:
    """Every key a complete template set must define."""
    keys = []
    for kind in LabelKind:
        keys.append(f"{kind.value}.{THRESHOLD_KEY}")
        keys.extend(f"{kind.value}.{v}" for v in CLASS_ORDER[kind] if v != NO_CHANGE)
    return keys


def _allowed(key: str) -> set[str]:
    kind, label = key.split(".", 1)
    return _PLACEHOLDERS.get((LabelKind(kind), label), {"hour"})


def event_key(event: TriggerEvent) -> str:
    if event.mechanism is Mechanism.THRESHOLD:
        return f"{event.kind.value}.{THRESHOLD_KEY}"
    return f"{event.kind.value}.{event.target_label.value}"


@dataclass(frozen=True)
class MessageTemplates:
    texts: Mapping[str, str]

    def __post_init__(self) -> None:
        missing = [k for k in template_keys() if k not in self.texts]
        unknown = [k for k in self.texts if k not in template_keys()]
        if missing or unknown:
            raise TemplateError(f"missing templates {missing}, unknown keys {unknown}")
        for key, text in self.texts.items():
            names = {name for _, name, _, _ in string.Formatter().parse(text) if name is not None}
            extra = names - _allowed(key)
            if extra:
                raise TemplateError(f"{key}: placeholder(s) {sorted(extra)} cannot be filled")

    @classmethod
    def load(cls, path: str | Path | None = None) -> MessageTemplates:
        if path is None:
            text = resources.files("jitai").joinpath("data/templates.json").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls(json.loads(text))


def render(event: TriggerEvent, templates: MessageTemplates, config: TriggerConfig = TriggerConfig()) -> str:
    key = event_key(event)
    if key not in templates.texts:
        raise TemplateError(f"no template for {key}")
    values = {"hour": f"{config.local(event.fired_at).hour:02d}"}
    if event.cause_kind is CauseKind.TEMPERATURE:
        values["temperature"] = f"{event.cause_value:.1f}"
    elif event.cause_kind is CauseKind.SOUND_LEVEL:
        values["sound_level"] = f"{event.cause_value:.1f}"
    return templates.texts[key].format_map(values)


@dataclass(frozen=True)
class PushMessage:
    recipient: str
    title: str
    body: str
    sent_at: str

    def to_json(self) -> dict:
        return {"recipient": self.recipient, "title": self.title,
                "body": self.body, "sent_at": self.sent_at}


def message_for(record: NotificationRecord) -> PushMessage:
    title = "Thermal comfort" if record.event.kind is LabelKind.THERMAL else "Noise"
    return PushMessage(record.participant, title, record.payload_text,
                       format_time(record.event.fired_at))


class DeliveryError(RuntimeError):
    pass


class PushProvider(Protocol):
    def deliver(self, message: PushMessage) -> None:
        """Hand one message to the push service; raise DeliveryError on failure."""


class MockProvider:
    """Records every delivered message in an in-memory outbox."""

    def __init__(self) -> None:
        self.outbox: list[PushMessage] = []
        self._lock = threading.Lock()

    def deliver(self, message: PushMessage) -> None:
        with self._lock:
            self.outbox.append(message)

    def export_jsonl(self, destination: str | Path | IO[str]) -> None:
        text = "".join(json.dumps(m.to_json()) + "\n" for m in self.outbox)
        if isinstance(destination, (str, Path)):
            Path(destination).write_text(text, encoding="utf-8")
        else:
            destination.write(text)


class FailingProvider:
    def __init__(self, reason: str = "connection refused"):
        self.reason = reason
        self.calls = 0

    def deliver(self, message: PushMessage) -> None:
        self.calls += 1
        raise DeliveryError(self.reason)


class HttpPushProvider:
    """POSTs ``{recipient, title, body, sent_at}`` as JSON to a push endpoint.

    The bearer key is read from ``PUSH_API_KEY`` unless given; ``post`` is
    injectable for tests.
    """

    def __init__(self, url: str, api_key: str | None = None,
                 post: Callable[[str, bytes, dict], int] | None = None, timeout: float = 10.0):
        self.url = url
        self.api_key = api_key if api_key is not None else os.environ.get("PUSH_API_KEY")
        self.timeout = timeout
        self._post = post or self._urlopen

    def _urlopen(self, url: str, body: bytes, headers: dict) -> int:
        req = urllib.request.Request(url, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.status

    def deliver(self, message: PushMessage) -> None:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            status = self._post(self.url, json.dumps(message.to_json()).encode(), headers)
        except OSError as exc:
            raise DeliveryError(str(exc)) from exc
        if not 200 <= status < 300:
            raise DeliveryError(f"push service answered HTTP {status}")


@dataclass(frozen=True)
class DeliveryReceipt:
    accepted: bool
    reason: str | None = None


def send(record: NotificationRecord, provider: PushProvider) -> DeliveryReceipt:
    """Invoke ``provider`` exactly once for an admitted notification."""
    try:
        provider.deliver(message_for(record))
    except DeliveryError as exc:
        logger.warning("delivery to %s failed: %s", record.participant, exc)
        return DeliveryReceipt(False, str(exc))
    return DeliveryReceipt(True)
