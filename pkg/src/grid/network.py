"""
Multi-carrier network model: buses, lines and devices of the integrated energy system
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, FrozenSet, List, Mapping, Optional, Tuple, Union

import networkx as nx

from src.utils.logger import get_logger

if TYPE_CHECKING:
    from src.parsers.scenario_parser import TopologySection

logger = get_logger(__name__)


class Carrier(str, Enum):
    """Energy carrier of a line or device port"""
    ELECTRICITY = "electricity"
    HEAT = "heat"
    GAS = "gas"


class DeviceKind(str, Enum):
    """Physical device categories"""
    THERMAL_GEN = "thermal_gen"
    RENEWABLE_GEN = "renewable_gen"
    CHP = "chp"
    LOAD = "load"
    STORAGE = "storage"


GENERATOR_KINDS = frozenset({DeviceKind.THERMAL_GEN, DeviceKind.RENEWABLE_GEN, DeviceKind.CHP})


class NetworkError(Exception):
    """Raised when a topology cannot be built; carries every problem found"""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems) or "invalid network")


@dataclass(frozen=True)
class Bus:
    """A network node mirroring a physical location"""
    id: str
    carriers: FrozenSet[Carrier] = frozenset({Carrier.ELECTRICITY})


@dataclass(frozen=True)
class Line:
    """A branch of one carrier between two buses"""
    id: str
    carrier: Carrier
    from_bus: str
    to_bus: str
    capacity: float
    susceptance: Optional[float] = None  # per-unit, electricity only


@dataclass(frozen=True)
class Device:
    """Generator, load or storage unit attached to a bus and owned by an actor"""
    id: str
    bus: str
    kind: DeviceKind
    owner: str
    carrier: Carrier = Carrier.ELECTRICITY
    emission_rate: float = 0.0  # tCO2 per MWh of output
    heat_power_ratio: Optional[float] = None
    gas_efficiency: float = 1.0
    limits: Mapping[Carrier, Tuple[float, float]] = field(default_factory=dict)

    @property
    def carriers(self) -> FrozenSet[Carrier]:
        if self.kind == DeviceKind.CHP:
            return frozenset({Carrier.ELECTRICITY, Carrier.HEAT})
        return frozenset({self.carrier})

    @property
    def is_generator(self) -> bool:
        return self.kind in GENERATOR_KINDS

    @property
    def is_clean(self) -> bool:
        return self.emission_rate == 0.0

    @property
    def burns_gas(self) -> bool:
        return self.kind in (DeviceKind.THERMAL_GEN, DeviceKind.CHP)

    def limit(self, carrier: Carrier) -> Tuple[float, float]:
        """(min, max) output in MW; unbounded above when not configured"""
        return tuple(self.limits.get(carrier, (0.0, float("inf"))))


@dataclass(frozen=True)
class Network:
    """Immutable multi-carrier topology with exactly one electric slack bus"""
    buses: Mapping[str, Bus]
    lines: Mapping[str, Line]
    devices: Mapping[str, Device]
    slack_bus: str
    base_mva: float = 100.0

    @property
    def electric_buses(self) -> List[str]:
        return [b.id for b in self.buses.values() if Carrier.ELECTRICITY in b.carriers]

    @property
    def electric_lines(self) -> List[Line]:
        return [l for l in self.lines.values() if l.carrier == Carrier.ELECTRICITY]

    @property
    def slack_device(self) -> Device:
        thermal = [d for d in self.devices.values()
                   if d.bus == self.slack_bus and d.kind == DeviceKind.THERMAL_GEN]
        return thermal[0]

    def devices_of(self, owner: str) -> List[Device]:
        return [d for d in self.devices.values() if d.owner == owner]

    def devices_by_kind(self, kind: DeviceKind) -> List[Device]:
        return [d for d in self.devices.values() if d.kind == kind]

    def carrier_graph(self, carrier: Carrier) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(b.id for b in self.buses.values() if carrier in b.carriers)
        for line in self.lines.values():
            if line.carrier == carrier:
                graph.add_edge(line.from_bus, line.to_bus)
        return graph

    def heat_components(self) -> List[List[str]]:
        """Buses joined by heat lines; each component is balanced on its own"""
        components = nx.connected_components(self.carrier_graph(Carrier.HEAT))
        ordered = [sorted(c, key=self._bus_order) for c in components]
        return sorted(ordered, key=lambda c: self._bus_order(c[0]))

    def _bus_order(self, bus_id: str) -> int:
        return list(self.buses).index(bus_id)


def _section_from(config: Union["TopologySection", Mapping[str, Any]]) -> "TopologySection":
    from src.parsers.scenario_parser import TopologySection

    if isinstance(config, TopologySection):
        return config
    return TopologySection.model_validate(config)


def check_topology(section: "TopologySection") -> List[str]:
    """Return every topology problem found (empty list when the topology is valid)"""
    problems: List[str] = []

    bus_ids: Dict[str, Bus] = {}
    for bus in section.buses:
        if bus.id in bus_ids:
            problems.append(f"topology.buses: duplicate id '{bus.id}'")
        bus_ids[bus.id] = bus

    seen_lines = set()
    for line in section.lines:
        where = f"topology.lines[{line.id}]"
        if line.id in seen_lines:
            problems.append(f"topology.lines: duplicate id '{line.id}'")
        seen_lines.add(line.id)
        for end in (line.from_bus, line.to_bus):
            if end not in bus_ids:
                problems.append(f"{where}: dangling reference to bus '{end}'")
            elif line.carrier not in bus_ids[end].carriers:
                problems.append(f"{where}: bus '{end}' does not serve {line.carrier.value}")
        if line.from_bus == line.to_bus:
            problems.append(f"{where}: from and to are the same bus")
        if line.carrier == Carrier.ELECTRICITY and not (line.susceptance and line.susceptance > 0):
            problems.append(f"{where}: electricity line needs susceptance > 0")

    seen_devices = set()
    for device in section.devices:
        where = f"topology.devices[{device.id}]"
        if device.id in seen_devices:
            problems.append(f"topology.devices: duplicate id '{device.id}'")
        seen_devices.add(device.id)
        if device.bus not in bus_ids:
            problems.append(f"{where}: dangling reference to bus '{device.bus}'")
        if device.kind == DeviceKind.RENEWABLE_GEN and device.emission_rate != 0:
            problems.append(f"{where}: renewable generation must have emission_rate 0")
        if device.kind == DeviceKind.CHP and not (device.heat_power_ratio and device.heat_power_ratio > 0):
            problems.append(f"{where}: chp needs heat_power_ratio > 0")
        for carrier, (low, high) in device.limits.items():
            if low > high:
                problems.append(f"{where}: {carrier.value} limit min {low} exceeds max {high}")

    if section.slack_bus not in bus_ids:
        problems.append(f"topology.slack_bus: no slack bus '{section.slack_bus}'")
    elif not any(d.bus == section.slack_bus and d.kind == DeviceKind.THERMAL_GEN
                 for d in section.devices):
        problems.append(f"topology.slack_bus: no slack bus, '{section.slack_bus}' hosts no thermal_gen")

    electric = nx.Graph()
    electric.add_nodes_from(b.id for b in section.buses if Carrier.ELECTRICITY in b.carriers)
    electric.add_edges_from(
        (l.from_bus, l.to_bus) for l in section.lines
        if l.carrier == Carrier.ELECTRICITY and l.from_bus in electric and l.to_bus in electric
    )
    if electric.number_of_nodes() > 0 and not nx.is_connected(electric):
        islands = [sorted(c) for c in nx.connected_components(electric)]
        problems.append(f"topology: disconnected electric graph, islands {islands}")

    return problems


def build_network(config: Union["TopologySection", Mapping[str, Any]]) -> Network:
    """Build an immutable Network from the scenario's topology section"""
    section = _section_from(config)
    problems = check_topology(section)
    if problems:
        raise NetworkError(problems)

    network = Network(
        buses={b.id: Bus(id=b.id, carriers=frozenset(b.carriers)) for b in section.buses},
        lines={
            l.id: Line(
                id=l.id,
                carrier=l.carrier,
                from_bus=l.from_bus,
                to_bus=l.to_bus,
                capacity=l.capacity,
                susceptance=l.susceptance,
            )
            for l in section.lines
        },
        devices={
            d.id: Device(
                id=d.id,
                bus=d.bus,
                kind=d.kind,
                owner=d.owner,
                carrier=d.carrier,
                emission_rate=d.emission_rate,
                heat_power_ratio=d.heat_power_ratio,
                gas_efficiency=d.gas_efficiency,
                limits={c: (float(lo), float(hi)) for c, (lo, hi) in d.limits.items()},
            )
            for d in section.devices
        },
        slack_bus=section.slack_bus,
        base_mva=section.base_mva,
    )
    logger.debug(
        f"Built network: {len(network.buses)} buses, {len(network.lines)} lines, "
        f"{len(network.devices)} devices, slack {network.slack_bus}"
    )
    return network
