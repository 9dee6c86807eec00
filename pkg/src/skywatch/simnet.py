"""Discrete-event scheduling core and the latency/bandwidth link model.

Single-threaded by design: every component interacts with simulated time
only through EventLoop.schedule, which makes runs bit-for-bit reproducible
under a fixed seed.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Callable


class SimClock:
    def __init__(self) -> None:
        self.now_ms: float = 0.0


class EventLoop:
    """Time-ordered callback queue; insertion order breaks ties."""

    def __init__(self) -> None:
        self.clock = SimClock()
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._counter = 0

    @property
    def now_ms(self) -> float:
        return self.clock.now_ms

    def schedule_at(self, t_ms: float, fn: Callable[[], None]) -> None:
        if t_ms < self.clock.now_ms:
            t_ms = self.clock.now_ms
        self._counter += 1
        heapq.heappush(self._heap, (t_ms, self._counter, fn))

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> None:
        self.schedule_at(self.clock.now_ms + max(0.0, delay_ms), fn)

    def run(self, until_ms: float | None = None, max_events: int = 10_000_000) -> int:
        """Drain events (optionally only up to ``until_ms``); returns the
        number processed."""
        processed = 0
        while self._heap and processed < max_events:
            t, _, fn = self._heap[0]
            if until_ms is not None and t > until_ms:
                break
            heapq.heappop(self._heap)
            self.clock.now_ms = max(self.clock.now_ms, t)
            fn()
            processed += 1
        if until_ms is not None and self.clock.now_ms < until_ms:
            # remaining events (if any) are all later than the horizon
            self.clock.now_ms = until_ms
        return processed


@dataclass
class LinkSpec:
    latency_ms: float = 0.0
    bandwidth_bps: float | None = None  # None = no serialization delay
    jitter_ms: float = 0.0

    def validate(self) -> None:
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be non-negative")
        if self.bandwidth_bps is not None and self.bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive when set")


class Link:
    """One direction of a network path: FIFO serialization at the bandwidth
    cap, then propagation latency plus a uniform jitter draw. Delivery is
    in-order (the transport below is stream-oriented)."""

    def __init__(self, name: str, spec: LinkSpec, loop: EventLoop,
                 rng: random.Random, trace: Callable[..., None] | None = None):
        spec.validate()
        self.name = name
        self.spec = spec
        self.loop = loop
        self.rng = rng
        self.trace = trace or (lambda event, **fields: None)
        self._free_at = 0.0
        self._last_arrival = 0.0

    @property
    def free_at(self) -> float:
        return max(self._free_at, self.loop.now_ms)

    def set_spec(self, spec: LinkSpec) -> None:
        spec.validate()
        self.spec = spec

    def transmission_time_ms(self, size_bytes: int) -> float:
        if self.spec.bandwidth_bps is None:
            return 0.0
        return size_bytes * 8 / self.spec.bandwidth_bps * 1000.0

    def send(self, size_bytes: int, deliver: Callable[[], None]) -> float:
        """Queue one message; returns the time the link frees up."""
        now = self.loop.now_ms
        start = max(now, self._free_at)
        depart = start + self.transmission_time_ms(size_bytes)
        self._free_at = depart
        jitter = self.rng.uniform(0, self.spec.jitter_ms) if self.spec.jitter_ms > 0 else 0.0
        arrive = depart + self.spec.latency_ms + jitter
        if arrive < self._last_arrival:
            arrive = self._last_arrival
        self._last_arrival = arrive
        self.trace(
            "link_tx", link=self.name, bytes=size_bytes,
            t_start=start, t_depart=depart, t_arrive=arrive,
        )
        self.loop.schedule_at(arrive, deliver)
        return depart
