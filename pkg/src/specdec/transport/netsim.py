"""Virtual-clock lossy network simulation.

A single-threaded discrete-event loop drives two endpoints.  The channel
samples a normally distributed propagation delay per message (recorded
pre-clipping for distribution-fidelity checks, clipped at zero for
scheduling), adds a serialization delay when a bandwidth cap is set, and
drops messages with the configured probability - drops are modeled
events, not errors; reliability comes from the endpoints' retransmission.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    delay_mean_ms: float
    delay_std_ms: float
    drop_prob: float
    bandwidth_bits_per_s: float | None = None  # None = uncapped

    def __post_init__(self):
        if not 0 <= self.drop_prob < 1:
            raise ConfigError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")


BUILTIN_PROFILES = {
    "4g": NetworkProfile("4g", 21.0, 19.0, 0.001, 20e6),
    "5g": NetworkProfile("5g", 10.0, 10.0, 0.001, None),
    "ideal": NetworkProfile("ideal", 0.0, 0.0, 0.0, None),
}


class EventLoop:
    """Deterministic virtual-clock event queue."""

    def __init__(self):
        self.now_ms = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._cancelled: set[int] = set()

    def schedule(self, delay_ms: float, fn) -> int:
        eid = next(self._seq)
        heapq.heappush(self._heap, (self.now_ms + max(0.0, delay_ms), eid, fn))
        return eid

    def cancel(self, eid: int):
        self._cancelled.add(eid)

    def run(self, until_ms: float = float("inf"), max_events: int = 10_000_000):
        for _ in range(max_events):
            if not self._heap:
                return
            t, eid, fn = heapq.heappop(self._heap)
            if eid in self._cancelled:
                self._cancelled.discard(eid)
                continue
            if t > until_ms:
                heapq.heappush(self._heap, (t, eid, fn))
                return
            self.now_ms = t
            fn()
        raise RuntimeError("event budget exhausted; the session is not terminating")


@dataclass
class ChannelStats:
    sent: int = 0
    dropped: int = 0
    bytes_total: int = 0
    sampled_delays_ms: list = field(default_factory=list)


class Channel:
    """One direction of the simulated link."""

    def __init__(self, loop: EventLoop, profile: NetworkProfile, rng: np.random.Generator):
        self.loop = loop
        self.profile = profile
        self.rng = rng
        self.stats = ChannelStats()
        self.closed = False

    def send(self, message: bytes, deliver) -> None:
        """Schedule delivery of ``message`` (or drop it)."""
        if self.closed:
            return
        p = self.profile
        raw_delay = float(self.rng.normal(p.delay_mean_ms, p.delay_std_ms)) if p.delay_std_ms or p.delay_mean_ms else 0.0
        self.stats.sent += 1
        self.stats.bytes_total += len(message)
        self.stats.sampled_delays_ms.append(raw_delay)
        if p.drop_prob and self.rng.random() < p.drop_prob:
            self.stats.dropped += 1
            return
        delay = max(0.0, raw_delay)
        if p.bandwidth_bits_per_s:
            delay += len(message) * 8.0 / p.bandwidth_bits_per_s * 1000.0
        payload = bytes(message)
        self.loop.schedule(delay, lambda: None if self.closed else deliver(payload))

    def close(self):
        self.closed = True
