"""Battery-aware computation throttling.

The controller samples a power source every check_every steps and flips a
throttle decision: when the battery falls below threshold_percent, each
step gains a sleep of

    delay = ema_step_seconds * reduction / (1 - reduction)

so step frequency scales by (1 - reduction); reduction 0.5 doubles the
step period. The EMA tracks compute-only durations, the delay applies on
every step while the decision holds, and the decision is only refreshed on
sampling steps. Lifting the throttle takes the battery climbing back to
threshold + hysteresis, which stops flapping around the threshold. Stale
or unreadable samples keep the previous decision. Throttling only ever
inserts sleeps between steps, so losses per step are untouched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .errors import InvalidConfig


@dataclass
class PowerState:
    percent: float | None
    seconds: float
    stale: bool = False

    def __post_init__(self):
        if self.percent is not None:
            self.percent = min(100.0, max(0.0, float(self.percent)))


class FixedSource:
    """A constant battery level; the do-nothing default."""

    def __init__(self, percent: float):
        self.percent = percent

    def read(self) -> PowerState:
        return PowerState(self.percent, time.monotonic())


class FileProbe:
    """Reads an integer percent from a text file (sysfs-style)."""

    def __init__(self, path):
        self.path = path
        self._last: float | None = None

    def read(self) -> PowerState:
        try:
            with open(self.path, encoding="utf-8") as f:
                self._last = float(int(f.read().strip()))
            return PowerState(self._last, time.monotonic())
        except (OSError, ValueError):
            return PowerState(self._last, time.monotonic(), stale=True)


class SimulatedBattery:
    """Deterministic battery model driven by reported activity durations."""

    def __init__(
        self,
        initial_percent: float,
        drain_active_per_hour: float,
        drain_idle_per_hour: float = 0.0,
    ):
        self.percent = float(initial_percent)
        self.drain_active_per_hour = float(drain_active_per_hour)
        self.drain_idle_per_hour = float(drain_idle_per_hour)

    def advance(self, active_seconds: float, idle_seconds: float = 0.0) -> None:
        drain = (
            active_seconds * self.drain_active_per_hour
            + idle_seconds * self.drain_idle_per_hour
        ) / 3600.0
        self.percent = min(100.0, max(0.0, self.percent - drain))

    def read(self) -> PowerState:
        return PowerState(self.percent, time.monotonic())


@dataclass
class ThrottlePolicy:
    check_every: int = 1
    threshold_percent: float = 60.0
    reduction: float = 0.5
    ema_alpha: float = 0.2
    hysteresis_percent: float = 2.0

    def validate(self) -> None:
        if self.check_every < 1:
            raise InvalidConfig(f"check_every must be >= 1, got {self.check_every}")
        if not 0.0 <= self.reduction < 1.0:
            raise InvalidConfig(f"reduction must be in [0, 1), got {self.reduction}")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise InvalidConfig(f"ema_alpha must be in (0, 1], got {self.ema_alpha}")
        if self.hysteresis_percent < 0:
            raise InvalidConfig("hysteresis_percent must be >= 0")


class ThrottleController:
    def __init__(self, policy: ThrottlePolicy, source):
        policy.validate()
        self.policy = policy
        self.source = source
        self.throttled = False
        self.ema_step_seconds: float | None = None
        self.samples_taken = 0

    def record_step_time(self, compute_seconds: float) -> None:
        """Feed one compute-only step duration into the EMA."""
        a = self.policy.ema_alpha
        if self.ema_step_seconds is None:
            self.ema_step_seconds = compute_seconds
        else:
            self.ema_step_seconds = a * compute_seconds + (1.0 - a) * self.ema_step_seconds

    def check(self, step: int) -> float:
        """Refresh the decision on sampling steps; return this step's delay.

        Steps are 1-indexed, so a run of N steps samples floor(N/K) times.
        """
        if step % self.policy.check_every == 0:
            state = self.source.read()
            self.samples_taken += 1
            if not state.stale and state.percent is not None:
                if self.throttled:
                    lift = self.policy.threshold_percent + self.policy.hysteresis_percent
                    if state.percent >= lift:
                        self.throttled = False
                elif state.percent < self.policy.threshold_percent:
                    self.throttled = True
        if self.throttled and self.ema_step_seconds:
            rho = self.policy.reduction
            return self.ema_step_seconds * rho / (1.0 - rho)
        return 0.0


def throttle_check(controller: ThrottleController, step: int) -> float:
    return controller.check(step)


def apply_throttle(delay_seconds: float) -> None:
    if delay_seconds > 0:
        time.sleep(delay_seconds)


@dataclass
class PowerModel:
    active_watts: float
    idle_watts: float


def estimate_power(compute_seconds: float, sleep_seconds: float, model: PowerModel) -> float:
    """Energy in joules for one step under a two-level power model."""
    return model.active_watts * compute_seconds + model.idle_watts * sleep_seconds
