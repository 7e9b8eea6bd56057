"""
Per-step network solution: DC power flow, CHP coupling, carrier balances and congestion
"""
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from src.grid.network import Carrier, Network
from src.utils.logger import get_logger

logger = get_logger(__name__)

# Numerical slack on the strict capacity test; a flow equal to capacity is feasible
CAPACITY_TOLERANCE = 1e-9


class SolverError(Exception):
    """Raised when the electric network cannot be solved (islanded graph)"""


@dataclass(frozen=True)
class Injections:
    """Net injection MW per (bus, carrier) at one timestep"""
    values: Mapping[Tuple[str, Carrier], float]
    timestamp: int = 0

    def for_carrier(self, carrier: Carrier) -> Dict[str, float]:
        result: Dict[str, float] = {}
        for (bus, c), mw in self.values.items():
            if c == carrier:
                result[bus] = result.get(bus, 0.0) + mw
        return result

    @classmethod
    def electric(cls, per_bus: Mapping[str, float], timestamp: int = 0) -> "Injections":
        return cls({(bus, Carrier.ELECTRICITY): mw for bus, mw in per_bus.items()}, timestamp)


@dataclass(frozen=True)
class FlowSolution:
    """Solved electric state: signed line flows (from→to positive) and bus angles"""
    flows: Mapping[str, float]
    angles: Mapping[str, float]
    injections: Mapping[str, float]  # after the slack absorbed the residual
    slack_injection: float
    timestamp: int = 0

    def bus_residual(self, network: Network, bus: str) -> float:
        """Injection minus net outflow at a bus; zero for a balanced solution"""
        outflow = 0.0
        for line in network.electric_lines:
            if line.from_bus == bus:
                outflow += self.flows[line.id]
            elif line.to_bus == bus:
                outflow -= self.flows[line.id]
        return self.injections.get(bus, 0.0) - outflow


@dataclass(frozen=True)
class CongestedLine:
    line_id: str
    flow: float
    capacity: float
    overload: float


@dataclass(frozen=True)
class CongestionReport:
    entries: List[CongestedLine] = field(default_factory=list)
    timestamp: int = 0

    @property
    def congested(self) -> bool:
        return bool(self.entries)

    @property
    def line_ids(self) -> List[str]:
        return [e.line_id for e in self.entries]


def chp_outputs(heat_demand: float, ratio: float,
                limits: Mapping[Carrier, Tuple[float, float]]) -> Tuple[float, float]:
    """Heat-led CHP operating point: returns (electric MW, heat MW)"""
    if ratio is None or ratio <= 0:
        raise ValueError(f"heat_power_ratio must be > 0, got {ratio}")
    if heat_demand < 0:
        raise ValueError(f"heat demand must be >= 0, got {heat_demand}")

    _, heat_max = limits.get(Carrier.HEAT, (0.0, float("inf")))
    heat = min(heat_demand, heat_max)

    e_min, e_max = limits.get(Carrier.ELECTRICITY, (0.0, float("inf")))
    electric = min(max(heat / ratio, e_min), e_max)
    return electric, heat


def _branch_matrices(network: Network, buses: List[str]):
    """Bbus and Bf in per-unit, built from the branch incidence matrix"""
    index = {b: i for i, b in enumerate(buses)}
    lines = network.electric_lines
    nl, nb = len(lines), len(buses)

    b = np.array([l.susceptance for l in lines], dtype=float)
    rows = np.r_[np.arange(nl), np.arange(nl)]
    cols = np.r_[[index[l.from_bus] for l in lines], [index[l.to_bus] for l in lines]].astype(int)

    cft = csr_matrix((np.r_[np.ones(nl), -np.ones(nl)], (rows, cols)), shape=(nl, nb))
    bf = csr_matrix((np.r_[b, -b], (rows, cols)), shape=(nl, nb))
    bbus = (cft.T @ bf).tocsc()
    return bbus, bf


def solve_dc_flow(network: Network, inj: Injections) -> FlowSolution:
    """Solve P = B·θ with the slack angle fixed at 0; the slack absorbs any residual"""
    buses = network.electric_buses
    slack = network.slack_bus
    per_bus = inj.for_carrier(Carrier.ELECTRICITY)

    p = np.array([per_bus.get(b, 0.0) for b in buses], dtype=float)
    slack_idx = buses.index(slack)
    p[slack_idx] = 0.0
    p[slack_idx] = -p.sum()

    theta = np.zeros(len(buses))
    lines = network.electric_lines
    if lines:
        bbus, bf = _branch_matrices(network, buses)
        keep = [i for i in range(len(buses)) if i != slack_idx]
        if keep:
            reduced = bbus[keep, :][:, keep]
            with warnings.catch_warnings():
                warnings.simplefilter("error", MatrixRankWarning)
                try:
                    solved = spsolve(reduced, p[keep] / network.base_mva)
                except (MatrixRankWarning, RuntimeError) as e:
                    raise SolverError(f"singular susceptance matrix at step {inj.timestamp}: {e}")
            solved = np.atleast_1d(solved)
            if not np.all(np.isfinite(solved)):
                raise SolverError(f"singular susceptance matrix at step {inj.timestamp}")
            theta[keep] = solved
        flows_mw = (bf @ theta) * network.base_mva
    else:
        flows_mw = np.zeros(0)

    return FlowSolution(
        flows={l.id: float(f) for l, f in zip(lines, flows_mw)},
        angles={b: float(a) for b, a in zip(buses, theta)},
        injections={b: float(v) for b, v in zip(buses, p)},
        slack_injection=float(p[slack_idx]),
        timestamp=inj.timestamp,
    )


def carrier_balance(network: Network, supplies: Mapping[str, float],
                    demands: Mapping[str, float], carrier: Carrier) -> Dict[str, float]:
    """Per-bus deficit (demand − supply); negative values are surpluses. Lossless."""
    order = [b for b in network.buses if carrier in network.buses[b].carriers]
    order += [b for b in list(supplies) + list(demands) if b not in order]
    result: Dict[str, float] = {}
    for bus in order:
        if bus in supplies or bus in demands:
            result[bus] = demands.get(bus, 0.0) - supplies.get(bus, 0.0)
    return result


def heat_balance(network: Network, supplies: Mapping[str, float],
                 demands: Mapping[str, float]) -> Dict[str, float]:
    return carrier_balance(network, supplies, demands, Carrier.HEAT)


def detect_congestion(flow: FlowSolution, network: Network) -> CongestionReport:
    """List exactly the lines whose |flow| exceeds capacity"""
    entries = []
    for line in network.electric_lines:
        value = flow.flows[line.id]
        if abs(value) > line.capacity + CAPACITY_TOLERANCE:
            entries.append(CongestedLine(
                line_id=line.id,
                flow=value,
                capacity=line.capacity,
                overload=abs(value) - line.capacity,
            ))
    if entries:
        logger.debug(f"Step {flow.timestamp}: congestion on {[e.line_id for e in entries]}")
    return CongestionReport(entries=entries, timestamp=flow.timestamp)


def line_loading(flow: FlowSolution, network: Network) -> Dict[str, float]:
    """|flow| / capacity per electric line"""
    return {l.id: abs(flow.flows[l.id]) / l.capacity for l in network.electric_lines}
