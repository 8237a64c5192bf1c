"""Pub/sub message bus for agent collaboration.

Delivery is deterministic: per topic, messages arrive in publication
order, and subscribers of one message are served in subscription order.
Publishing to a topic nobody subscribes to is allowed and delivers to
zero receivers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from agentfabric.embedding import DEFAULT_DIM, embed_text


@dataclass(frozen=True)
class BusMessage:
    topic: str
    sender: str
    payload: dict
    embedding: np.ndarray
    published_at: int


def make_message(
    topic: str, sender: str, payload: dict, now: int, dim: int = DEFAULT_DIM
) -> BusMessage:
    """Message whose embedding is derived from the serialized payload."""
    serialized = json.dumps(payload, sort_keys=True)
    return BusMessage(
        topic=topic,
        sender=sender,
        payload=payload,
        embedding=embed_text(serialized, dim),
        published_at=now,
    )


Deliver = Callable[[BusMessage], None]


class Bus:
    def __init__(self, schedule: Callable[[Callable[[], None]], Any] | None = None):
        # schedule(fn) defers delivery (the event loop hook); None delivers inline
        self._schedule = schedule
        self._subscribers: dict[str, list[tuple[str, Deliver]]] = {}
        self.delivered: int = 0

    def subscribe(self, topic: str, subscriber_id: str, deliver: Deliver) -> None:
        self._subscribers.setdefault(topic, []).append((subscriber_id, deliver))

    def topics(self) -> list[str]:
        return sorted(self._subscribers)

    def publish(self, msg: BusMessage) -> int:
        """Enqueue to all current subscribers; returns how many will receive it."""
        subs = self._subscribers.get(msg.topic, [])
        for _sid, deliver in subs:
            if self._schedule is None:
                deliver(msg)
            else:
                self._schedule(lambda d=deliver, m=msg: d(m))
            self.delivered += 1
        return len(subs)


def publish(bus: Bus, msg: BusMessage) -> int:
    return bus.publish(msg)
