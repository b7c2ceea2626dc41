"""Wall and virtual clocks.

Every blocking point in the package measures stall through a clock, so the
same orchestration code runs against real time or against an exact virtual
timeline (``fractions.Fraction`` seconds) for deterministic experiments.
"""

from __future__ import annotations

import time
from fractions import Fraction
from typing import Callable, Union

Seconds = Union[float, Fraction]


def as_fraction(x: Seconds) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


class WallClock:
    virtual = False

    def now(self) -> float:
        return time.perf_counter()

    def sleep_until(self, deadline: float) -> None:
        while True:
            remaining = deadline - time.perf_counter()
            if remaining <= 0:
                return
            time.sleep(remaining)

    def pad(self, started: float, duration: Seconds) -> None:
        """Block until ``duration`` seconds have passed since ``started``."""
        if duration:
            self.sleep_until(started + float(duration))


class VirtualClock:
    """Exact simulated time.

    Listeners are called with the new time whenever the clock moves; the
    simulated transfer link and the simulated persister use this to process
    completions that fall inside the elapsed interval.
    """

    virtual = True

    def __init__(self, start: Seconds = 0) -> None:
        self._now = as_fraction(start)
        self._listeners: list[Callable[[Fraction], None]] = []
        self._alarm: tuple[Fraction, Callable[[], BaseException]] | None = None

    def now(self) -> Fraction:
        return self._now

    def subscribe(self, fn: Callable[[Fraction], None]) -> None:
        self._listeners.append(fn)

    def unsubscribe(self, fn: Callable[[Fraction], None]) -> None:
        if fn in self._listeners:
            self._listeners.remove(fn)

    def set_alarm(self, at: Seconds | None, make_exc: Callable[[], BaseException] | None = None) -> None:
        """Raise ``make_exc()`` from the first advance that reaches ``at``.

        Time stops exactly at ``at`` and listeners see it before the raise.
        """
        self._alarm = None if at is None else (as_fraction(at), make_exc)

    def advance_to(self, t: Seconds) -> None:
        t = as_fraction(t)
        if t < self._now:
            raise ValueError(f"virtual clock cannot move backwards ({t} < {self._now})")
        alarm = self._alarm
        fire = alarm is not None and alarm[0] <= t
        if fire:
            t = max(alarm[0], self._now)
            self._alarm = None
        self._now = t
        for fn in list(self._listeners):
            fn(t)
        if fire:
            raise alarm[1]()

    def advance(self, dt: Seconds) -> None:
        self.advance_to(self._now + as_fraction(dt))

    def sleep_until(self, deadline: Seconds) -> None:
        if as_fraction(deadline) > self._now:
            self.advance_to(deadline)

    def pad(self, started: Seconds, duration: Seconds) -> None:
        self.sleep_until(as_fraction(started) + as_fraction(duration))


Clock = Union[WallClock, VirtualClock]
