"""Accelerator economics: per-device audio throughput and fleet sizing.

Arithmetic is exact (``fractions.Fraction``); floats only appear at the
reporting edge.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence, Union

Number = Union[int, float, str, Fraction]


class CostError(ValueError):
    pass


def _exact(x: Number, name: str) -> Fraction:
    try:
        q = Fraction(str(x)) if isinstance(x, float) else Fraction(x)
    except (TypeError, ValueError):
        raise CostError(f"{name} must be a number, got {x!r}") from None
    return q


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    unit_cost: Fraction
    concurrency: int
    latency: Fraction
    audio_seconds_per_request: Fraction = Fraction(5)

    def __post_init__(self) -> None:
        object.__setattr__(self, "unit_cost", _exact(self.unit_cost, "unit_cost"))
        object.__setattr__(self, "latency", _exact(self.latency, "latency"))
        object.__setattr__(self, "audio_seconds_per_request",
                           _exact(self.audio_seconds_per_request, "audio_seconds_per_request"))
        for field_name in ("unit_cost", "concurrency", "latency", "audio_seconds_per_request"):
            if not getattr(self, field_name) > 0:
                raise CostError(f"{self.name}: {field_name} must be positive")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "unit_cost": float(self.unit_cost),
            "concurrency": self.concurrency,
            "latency_s": float(self.latency),
            "audio_seconds_per_request": float(self.audio_seconds_per_request),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeviceProfile":
        try:
            return cls(
                str(d["name"]),
                d["unit_cost"],
                int(d["concurrency"]),
                d["latency_s"],
                d.get("audio_seconds_per_request", 5),
            )
        except KeyError as exc:
            raise CostError(f"device is missing field {exc.args[0]!r}") from None


L40S = DeviceProfile("L40S", 9000, 3, "0.300")
P150 = DeviceProfile("P150", 1400, 1, "0.250")
P100 = DeviceProfile("P100", 1000, 1, "0.250")
DEVICES = (L40S, P150, P100)


class Rounding(enum.Enum):
    CeilExact = "ceil"
    PaperApprox = "paper"

    @classmethod
    def parse(cls, value) -> "Rounding":
        if isinstance(value, cls):
            return value
        for r in cls:
            if str(value) in (r.value, r.name):
                return r
        raise CostError(f"rounding must be 'ceil' or 'paper', got {value!r}")


@dataclass(frozen=True)
class CostScenario:
    """Demand as concurrent requests of a given length, or directly as a rate."""

    concurrent_requests: Optional[int] = 550
    seconds_per_request: Fraction = Fraction(5)
    audio_seconds_per_second: Optional[Fraction] = None
    rounding: Rounding = Rounding.CeilExact

    def __post_init__(self) -> None:
        object.__setattr__(self, "rounding", Rounding.parse(self.rounding))
        object.__setattr__(self, "seconds_per_request", _exact(self.seconds_per_request, "seconds_per_request"))
        if self.audio_seconds_per_second is not None:
            rate = _exact(self.audio_seconds_per_second, "audio_seconds_per_second")
            object.__setattr__(self, "audio_seconds_per_second", rate)
            if not rate > 0:
                raise CostError("audio_seconds_per_second must be positive")
        elif self.concurrent_requests is None or self.concurrent_requests <= 0:
            raise CostError("concurrent_requests must be positive")
        if not self.seconds_per_request > 0:
            raise CostError("seconds_per_request must be positive")

    def required_rate(self) -> Fraction:
        """Audio-seconds that must be produced per wall-clock second."""
        if self.audio_seconds_per_second is not None:
            return self.audio_seconds_per_second
        # each of N live requests needs its seconds_per_request of audio within that span
        return Fraction(self.concurrent_requests) * self.seconds_per_request / self.seconds_per_request

    def to_dict(self) -> dict:
        d = {"rounding": self.rounding.value, "seconds_per_request": float(self.seconds_per_request)}
        if self.audio_seconds_per_second is not None:
            d["audio_seconds_per_second"] = float(self.audio_seconds_per_second)
        else:
            d["concurrent_requests"] = self.concurrent_requests
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CostScenario":
        known = {"concurrent_requests", "seconds_per_request", "audio_seconds_per_second", "rounding"}
        unknown = set(d) - known
        if unknown:
            raise CostError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(
            d.get("concurrent_requests", None if "audio_seconds_per_second" in d else 550),
            d.get("seconds_per_request", 5),
            d.get("audio_seconds_per_second"),
            d.get("rounding", "ceil"),
        )


def audio_seconds_per_second(device: DeviceProfile) -> Fraction:
    return device.concurrency * device.audio_seconds_per_request / device.latency


def _round_half_down(q: Fraction) -> int:
    # 27.5 -> 27; the published fleet size rounds the half down
    return math.ceil(q - Fraction(1, 2))


def fleet(device: DeviceProfile, scenario: CostScenario) -> tuple[int, Fraction]:
    """(device count, total accelerator cost) to sustain the scenario's rate."""
    rate = audio_seconds_per_second(device)
    if rate <= 0:
        raise CostError(f"{device.name} produces no audio")
    need = scenario.required_rate() / rate
    if scenario.rounding is Rounding.CeilExact:
        count = math.ceil(need)
    else:
        count = max(1, _round_half_down(need))
    return count, count * device.unit_cost


def cost_gain(device: DeviceProfile, baseline: DeviceProfile) -> Fraction:
    """Baseline dollars per unit throughput over the device's."""
    base = baseline.unit_cost / audio_seconds_per_second(baseline)
    return base / (device.unit_cost / audio_seconds_per_second(device))


def _fmt(q: Fraction, digits: int) -> str:
    return f"{float(q):.{digits}f}"


TABLE_COLUMNS = ("hardware", "cost_usd", "concurrency", "latency_ms", "audio_s_per_s", "cost_gain")


def cost_table_rows(devices: Sequence[DeviceProfile] = DEVICES, baseline: DeviceProfile = L40S) -> list[dict]:
    return [
        {
            "hardware": d.name,
            "cost_usd": _fmt(d.unit_cost, 0),
            "concurrency": str(d.concurrency),
            "latency_ms": _fmt(d.latency * 1000, 0),
            "audio_s_per_s": _fmt(audio_seconds_per_second(d), 1),
            "cost_gain": _fmt(cost_gain(d, baseline), 1),
        }
        for d in devices
    ]


def cost_table_csv(devices: Sequence[DeviceProfile] = DEVICES, baseline: DeviceProfile = L40S) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(cost_table_rows(devices, baseline))
    return buf.getvalue()


FLEET_COLUMNS = ("hardware", "rounding", "required_audio_s_per_s", "devices", "total_cost_usd")


def fleet_rows(scenario: CostScenario, devices: Sequence[DeviceProfile] = DEVICES) -> list[dict]:
    rows = []
    for d in devices:
        count, total = fleet(d, scenario)
        rows.append({
            "hardware": d.name,
            "rounding": scenario.rounding.value,
            "required_audio_s_per_s": _fmt(scenario.required_rate(), 1),
            "devices": str(count),
            "total_cost_usd": _fmt(total, 0),
        })
    return rows


def fleet_csv(scenario: CostScenario, devices: Sequence[DeviceProfile] = DEVICES) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=FLEET_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(fleet_rows(scenario, devices))
    return buf.getvalue()


def load_devices(text: str) -> list[DeviceProfile]:
    data = json.loads(text)
    return [DeviceProfile.from_dict(d) for d in data["devices"]]
