"""Two-phase signal plans on a fixed cycle.

Each plan splits the cycle between phase 1 and phase 2.  A phase's allocation
is ``round(split * cycle)`` seconds, the last ``yellow`` of which are yellow;
phase 2 takes whatever remains so the cycle always closes.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache

GREEN, YELLOW, RED = "G", "y", "r"

PLAN_SPLITS: tuple[tuple[float, float], ...] = (
    (0.30, 0.70),
    (0.37, 0.63),
    (0.43, 0.57),
    (0.50, 0.50),
    (0.57, 0.43),
    (0.63, 0.37),
    (0.70, 0.30),
)
CYCLE_S = 60
YELLOW_S = 3
MIN_GREEN_S = 15


class SignalError(RuntimeError):
    pass


@dataclass(frozen=True)
class SignalPlan:
    """Phase splits for one cycle; ``index`` is -1 for splits outside the plan table."""

    index: int
    splits: tuple[float, float]

    def greens(self, cycle: int = CYCLE_S, yellow: int = YELLOW_S) -> tuple[int, int]:
        return _greens(self.splits[0], cycle, yellow)


def _round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@lru_cache(maxsize=None)
def _greens(split1: float, cycle: int, yellow: int) -> tuple[int, int]:
    g1 = _round_half_up(split1 * cycle) - yellow
    g2 = cycle - g1 - 2 * yellow
    return g1, g2


def action_space() -> list[SignalPlan]:
    return [SignalPlan(i, s) for i, s in enumerate(PLAN_SPLITS)]


def plan(index: int) -> SignalPlan:
    if not 0 <= index < len(PLAN_SPLITS):
        raise SignalError(f"plan index {index} outside 0..{len(PLAN_SPLITS) - 1}")
    return SignalPlan(index, PLAN_SPLITS[index])


def custom_plan(split1: float) -> SignalPlan:
    return SignalPlan(-1, (split1, 1.0 - split1))


def phase_at(plan: SignalPlan, tick: int, cycle: int = CYCLE_S,
             yellow: int = YELLOW_S) -> tuple[str, str]:
    """Colors of (phase 1, phase 2) at ``tick`` seconds into the cycle."""
    if not 0 <= tick < cycle:
        raise SignalError(f"tick {tick} outside cycle [0, {cycle})")
    g1, g2 = _greens(plan.splits[0], cycle, yellow)
    if tick < g1:
        return GREEN, RED
    if tick < g1 + yellow:
        return YELLOW, RED
    if tick < g1 + yellow + g2:
        return RED, GREEN
    return RED, YELLOW


@dataclass
class CycleClock:
    cycle: int = 0
    tick: int = 0
    active: SignalPlan | None = None
    length: int = CYCLE_S

    def commit_plan(self, action: int | SignalPlan) -> "CycleClock":
        if self.tick != 0:
            raise SignalError(f"plan change requested mid-cycle (tick {self.tick})")
        self.active = action if isinstance(action, SignalPlan) else plan(action)
        return self

    def colors(self, yellow: int = YELLOW_S) -> tuple[str, str]:
        if self.active is None:
            raise SignalError("no plan committed for this cycle")
        return phase_at(self.active, self.tick, self.length, yellow)

    def advance(self) -> "CycleClock":
        self.tick += 1
        if self.tick == self.length:
            self.tick = 0
            self.cycle += 1
        return self


def plan_trace_csv(plans: list[SignalPlan]) -> str:
    """Per-intersection plan trace: one row per cycle."""
    rows = ["cycle,plan_index,split1,split2"]
    for c, p in enumerate(plans):
        rows.append(f"{c},{p.index},{p.splits[0]:.6g},{p.splits[1]:.6g}")
    return "\n".join(rows) + "\n"
