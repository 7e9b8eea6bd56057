"""
Carbon and congestion contribution factors, and their per-actor accumulation
"""
import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

from src.utils.logger import get_logger

logger = get_logger(__name__)


class FactorError(ValueError):
    """Raised for inputs outside a factor's domain"""


class Trigger(str, Enum):
    NONE = "none"
    UPPER = "upper"
    LOWER = "lower"


@dataclass(frozen=True)
class StepTable:
    """Stepwise function: value of the greatest breakpoint not above the input"""
    thresholds: Tuple[float, ...]
    values: Tuple[float, ...]

    def __post_init__(self):
        if not self.thresholds or len(self.thresholds) != len(self.values):
            raise FactorError("step table needs matching, non-empty thresholds and values")
        if self.thresholds[0] != 0:
            raise FactorError("step table must start at threshold 0")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise FactorError("step table thresholds must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[float]]) -> "StepTable":
        pairs = [tuple(p) for p in pairs]
        return cls(tuple(float(t) for t, _ in pairs), tuple(float(v) for _, v in pairs))

    @property
    def is_monotone(self) -> bool:
        return all(b >= a for a, b in zip(self.values, self.values[1:]))

    def lookup(self, x: float) -> float:
        if x < 0:
            raise FactorError(f"step table input must be >= 0, got {x}")
        return self.values[bisect.bisect_right(self.thresholds, x) - 1]


@dataclass(frozen=True)
class SupplyFactorParams:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise FactorError(f"alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class DemandFactorParams:
    beta: float
    gamma: float
    sigma: float
    dr_credit: StepTable

    def __post_init__(self):
        for name in ("beta", "gamma", "sigma"):
            if getattr(self, name) < 0:
                raise FactorError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.dr_credit.is_monotone or self.dr_credit.values[0] != 0:
            raise FactorError("dr_credit must be nondecreasing with f(0) = 0")


@dataclass(frozen=True)
class EmissionRecord:
    """Permitted and actual emissions of one actor over an accounting period (tCO2)"""
    actor: str
    s_permit: float
    s_actual: float


@dataclass
class FactorAccumulator:
    """Running contribution factor of one actor with its trigger thresholds"""
    actor: str
    upper: float
    lower: float
    cumulative: float = 0.0
    history: List[float] = field(default_factory=list)

    def reset(self) -> None:
        self.cumulative = 0.0


def supply_factor(rec: EmissionRecord, p: SupplyFactorParams) -> float:
    """α·(S_permit − S)/S_permit: positive when under the permit, negative above it"""
    if rec.s_permit <= 0:
        raise FactorError(f"s_permit must be > 0 for actor '{rec.actor}', got {rec.s_permit}")
    if rec.s_actual < 0:
        raise FactorError(f"s_actual must be >= 0 for actor '{rec.actor}'")
    return p.alpha * (rec.s_permit - rec.s_actual) / rec.s_permit


def demand_factor(clean_e: float, total_e: float, clean_h: float, total_h: float,
                  dr_power: float, p: DemandFactorParams) -> float:
    """β·clean_e/total_e + γ·clean_h/total_h + σ·f(dr_power); empty carriers contribute 0"""
    for clean, total, name in ((clean_e, total_e, "electricity"), (clean_h, total_h, "heat")):
        if clean < 0 or clean > total:
            raise FactorError(f"clean {name} {clean} outside [0, {total}]")
    if dr_power < 0:
        raise FactorError(f"demand response power must be >= 0, got {dr_power}")

    electric = p.beta * (clean_e / total_e) if total_e > 0 else 0.0
    heat = p.gamma * (clean_h / total_h) if total_h > 0 else 0.0
    return electric + heat + p.sigma * p.dr_credit.lookup(dr_power)


def congestion_factor(relieved: float, active_congestion: bool, table: StepTable) -> float:
    """Stepwise reward for relieved MW, only while the system is congested"""
    if relieved < 0:
        raise FactorError(f"relieved power must be >= 0, got {relieved}")
    if not active_congestion:
        return 0.0
    return table.lookup(relieved)


def provisional_supply_factor(s_permit: float, s_so_far: float, p: SupplyFactorParams) -> float:
    """Period-to-date supply factor against the full-period permit"""
    return supply_factor(EmissionRecord(actor="", s_permit=s_permit, s_actual=s_so_far), p)


def accumulate_and_check(acc: FactorAccumulator, delta: float) -> Tuple[FactorAccumulator, Trigger]:
    """Add delta and report a threshold crossing

    The caller settles the crossed value (acc.history[-1]) and the accumulator
    restarts from 0.
    """
    acc.cumulative += delta
    trigger = Trigger.NONE
    if acc.cumulative >= acc.upper:
        trigger = Trigger.UPPER
    elif acc.cumulative <= acc.lower:
        trigger = Trigger.LOWER

    if trigger != Trigger.NONE:
        acc.history.append(acc.cumulative)
        logger.debug(f"{acc.actor}: factor {acc.cumulative:.6f} crossed {trigger.value} threshold")
        acc.reset()
    return acc, trigger


def drain(acc: FactorAccumulator) -> Optional[float]:
    """Take the residual at period end (None when nothing accumulated)"""
    if acc.cumulative == 0.0:
        return None
    residual = acc.cumulative
    acc.history.append(residual)
    acc.reset()
    return residual
