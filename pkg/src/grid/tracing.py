"""
Source attribution of consumed power by proportional sharing (flow tracing)
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Tuple

import networkx as nx
import numpy as np

from src.grid.network import Carrier, Network
from src.grid.power_flow import FlowSolution
from src.utils.logger import get_logger

logger = get_logger(__name__)


class TraceError(Exception):
    """Raised for degenerate flow graphs or unknown loads"""


class DuplicateStampError(TraceError):
    """Raised when a second trace is stamped for an already recorded step"""


@dataclass(frozen=True)
class TraceResult:
    """Attributed MW per (load device, source device) at one timestep"""
    attributed: Mapping[Tuple[str, str], float]
    load_mw: Mapping[str, float]
    source_mw: Mapping[str, float]
    clean_sources: FrozenSet[str]
    carrier: Carrier = Carrier.ELECTRICITY
    timestamp: int = 0

    def for_load(self, load: str) -> Dict[str, float]:
        return {s: mw for (l, s), mw in self.attributed.items() if l == load}

    def for_source(self, source: str) -> Dict[str, float]:
        return {l: mw for (l, s), mw in self.attributed.items() if s == source}


@dataclass(frozen=True)
class TracedRecord:
    timestamp: int
    trace: TraceResult


@dataclass
class TraceLedger:
    """Timestamped traces of one accounting period, in insertion order"""
    records: List[TracedRecord] = field(default_factory=list)

    def append(self, record: TracedRecord) -> None:
        key = (record.timestamp, record.trace.carrier)
        if any((r.timestamp, r.trace.carrier) == key for r in self.records):
            raise DuplicateStampError(
                f"step {record.timestamp} already traced for {record.trace.carrier.value}")
        self.records.append(record)

    def of_carrier(self, carrier: Carrier) -> List[TracedRecord]:
        return [r for r in self.records if r.trace.carrier == carrier]

    def clear(self) -> None:
        self.records.clear()


def _flow_graph(network: Network, flow: FlowSolution) -> nx.DiGraph:
    """Lines oriented by solved flow sign; exact zero flows are dropped"""
    graph = nx.DiGraph()
    graph.add_nodes_from(network.electric_buses)
    for line in network.electric_lines:
        value = flow.flows[line.id]
        if value > 0:
            graph.add_edge(line.from_bus, line.to_bus, mw=value)
        elif value < 0:
            graph.add_edge(line.to_bus, line.from_bus, mw=-value)
    return graph


def _source_mix(graph: nx.DiGraph, generation: Mapping[str, Dict[str, float]],
                throughflow: Mapping[str, float], sources: List[str]) -> Dict[str, np.ndarray]:
    """MW of each source contained in the gross inflow of each bus"""
    col = {s: i for i, s in enumerate(sources)}

    def own(bus: str) -> np.ndarray:
        vec = np.zeros(len(sources))
        for source, mw in generation.get(bus, {}).items():
            vec[col[source]] += mw
        return vec

    mix: Dict[str, np.ndarray] = {}
    if nx.is_directed_acyclic_graph(graph):
        for bus in nx.topological_sort(graph):
            vec = own(bus)
            for upstream, _, data in graph.in_edges(bus, data=True):
                if throughflow[upstream] <= 0:
                    raise TraceError(f"bus '{upstream}' exports power with zero inflow")
                vec = vec + mix[upstream] * (data["mw"] / throughflow[upstream])
            mix[bus] = vec
        return mix

    # Loop flows: solve y_i − Σ_j (f_ji / P_j) y_j = G_i for all buses at once
    buses = list(graph.nodes)
    index = {b: i for i, b in enumerate(buses)}
    on_cycle = {b for cycle in nx.simple_cycles(graph) for b in cycle}
    for bus in on_cycle:
        if throughflow[bus] <= 0:
            raise TraceError(f"cyclic flow graph with zero total inflow at bus '{bus}'")
    a = np.eye(len(buses))
    for upstream, downstream, data in graph.edges(data=True):
        a[index[downstream], index[upstream]] -= data["mw"] / throughflow[upstream]
    rhs = np.vstack([own(b) for b in buses]) if buses else np.zeros((0, len(sources)))
    try:
        y = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as e:
        raise TraceError(f"degenerate cyclic flow graph: {e}")
    return {b: y[index[b]] for b in buses}


def trace_sources(network: Network, flow: FlowSolution,
                  outputs: Mapping[str, float], loads: Mapping[str, float]) -> TraceResult:
    """Attribute every electric load to originating devices by proportional sharing

    outputs: electric MW produced per device (generators, discharging storage)
    loads:   electric MW consumed per device (loads, charging storage)
    """
    for device_id, mw in list(outputs.items()) + list(loads.items()):
        if mw < 0:
            raise TraceError(f"device '{device_id}' has negative power {mw}")

    sources = [d for d in outputs if outputs[d] > 0]
    generation: Dict[str, Dict[str, float]] = {}
    for d in sources:
        generation.setdefault(network.devices[d].bus, {})[d] = outputs[d]

    graph = _flow_graph(network, flow)
    throughflow: Dict[str, float] = {}
    for bus in graph.nodes:
        out = sum(data["mw"] for _, _, data in graph.out_edges(bus, data=True))
        consumed = sum(mw for d, mw in loads.items() if network.devices[d].bus == bus)
        throughflow[bus] = out + consumed

    mix = _source_mix(graph, generation, throughflow, sources)

    attributed: Dict[Tuple[str, str], float] = {}
    for load_id, mw in loads.items():
        bus_mix = mix[network.devices[load_id].bus]
        total = float(bus_mix.sum())
        for i, source in enumerate(sources):
            share = float(bus_mix[i]) / total if total > 0 else 0.0
            if mw > 0 and share > 0:
                attributed[(load_id, source)] = mw * share

    clean = frozenset(d for d in outputs if network.devices[d].is_clean)
    return TraceResult(
        attributed=attributed,
        load_mw=dict(loads),
        source_mw=dict(outputs),
        clean_sources=clean,
        carrier=Carrier.ELECTRICITY,
        timestamp=flow.timestamp,
    )


def attribute_heat(network: Network, heat_outputs: Mapping[str, float],
                   heat_loads: Mapping[str, float], timestamp: int = 0) -> TraceResult:
    """Heat attribution by producing device within each heat component

    A component short of supply serves its loads pro rata; the unserved part is
    not attributed (and not counted in load_mw).
    """
    attributed: Dict[Tuple[str, str], float] = {}
    served: Dict[str, float] = {}
    for component in network.heat_components():
        members = set(component)
        producers = {d: mw for d, mw in heat_outputs.items()
                     if network.devices[d].bus in members and mw > 0}
        consumers = {d: mw for d, mw in heat_loads.items() if network.devices[d].bus in members}
        supply = sum(producers.values())
        demand = sum(consumers.values())
        ratio = min(1.0, supply / demand) if demand > 0 else 0.0
        for load_id, mw in consumers.items():
            served[load_id] = mw * ratio
            for source, out in producers.items():
                if served[load_id] > 0:
                    attributed[(load_id, source)] = served[load_id] * out / supply

    return TraceResult(
        attributed=attributed,
        load_mw=served,
        source_mw=dict(heat_outputs),
        clean_sources=frozenset(d for d in heat_outputs if network.devices[d].is_clean),
        carrier=Carrier.HEAT,
        timestamp=timestamp,
    )


def clean_fraction(trace: TraceResult, load: str, carrier: Carrier) -> float:
    """Share of a load's power supplied by zero-emission devices"""
    if trace.carrier != carrier or load not in trace.load_mw:
        raise TraceError(f"unknown load '{load}' in {carrier.value} trace")
    total = trace.load_mw[load]
    if total == 0:
        return 0.0
    clean = sum(mw for s, mw in trace.for_load(load).items() if s in trace.clean_sources)
    return min(1.0, clean / total)


def stamp_flows(trace: TraceResult, step: int) -> TracedRecord:
    return TracedRecord(timestamp=step, trace=trace)


def period_clean_energy(records: Iterable[TracedRecord], load: str,
                        step_hours: float) -> Tuple[float, float]:
    """(clean MWh, total MWh) consumed by a load over the recorded steps"""
    clean_mwh = 0.0
    total_mwh = 0.0
    for record in records:
        trace = record.trace
        if load not in trace.load_mw:
            continue
        mw = trace.load_mw[load]
        clean_mwh += clean_fraction(trace, load, trace.carrier) * mw * step_hours
        total_mwh += mw * step_hours
    return clean_mwh, total_mwh
