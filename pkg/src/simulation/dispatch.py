"""
Per-step dispatch schedule: profiles, heat-led CHP, contract deliveries and slack balancing
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple

from src.grid.network import Carrier, Device, DeviceKind, Network
from src.grid.power_flow import Injections, chp_outputs


@dataclass(frozen=True)
class Delivery:
    """Power scheduled at a seller device by an executed contract"""
    contract_id: str
    seller_device: str
    buyer_device: str
    quantity: float
    carrier: Carrier = Carrier.ELECTRICITY


@dataclass(frozen=True)
class Schedule:
    """Everything needed to solve one step; immutable, updated by copy"""
    network: Network
    step: int
    loads: Mapping[str, float] = field(default_factory=dict)
    heat_loads: Mapping[str, float] = field(default_factory=dict)
    available: Mapping[str, float] = field(default_factory=dict)
    setpoints: Mapping[str, float] = field(default_factory=dict)
    chp: Mapping[str, Tuple[float, float]] = field(default_factory=dict)
    deliveries: Tuple[Delivery, ...] = ()
    blocked: Tuple[Delivery, ...] = ()  # sales the grid refused
    reductions: Mapping[str, float] = field(default_factory=dict)

    # contracts

    def contracted(self, device_id: str, carrier: Carrier = Carrier.ELECTRICITY) -> float:
        return sum(d.quantity for d in self.deliveries
                   if d.seller_device == device_id and d.carrier == carrier)

    def with_delivery(self, delivery: Delivery) -> "Schedule":
        return replace(self, deliveries=self.deliveries + (delivery,))

    def with_blocked(self, delivery: Delivery) -> "Schedule":
        return replace(self, blocked=self.blocked + (delivery,))

    def headroom(self, device_id: str, carrier: Carrier = Carrier.ELECTRICITY) -> float:
        """MW a new contract may still sell from this device"""
        device = self.network.devices[device_id]
        if carrier == Carrier.HEAT:
            if device.kind == DeviceKind.CHP:
                produced = self.chp[device_id][1]
            elif device.kind == DeviceKind.RENEWABLE_GEN and device.carrier == Carrier.HEAT:
                produced = self.heat_outputs().get(device_id, 0.0)
            else:
                return 0.0
            return produced - self.contracted(device_id, Carrier.HEAT)
        if carrier != Carrier.ELECTRICITY or Carrier.ELECTRICITY not in device.carriers:
            return 0.0

        sold = self.contracted(device_id)
        if device.id == self.network.slack_device.id:
            return self.slack_output() - sold
        if device.kind == DeviceKind.RENEWABLE_GEN:
            return self.available.get(device_id, 0.0) - sold
        if device.kind == DeviceKind.THERMAL_GEN:
            return device.limit(Carrier.ELECTRICITY)[1] - self.setpoints.get(device_id, 0.0) - sold
        if device.kind == DeviceKind.CHP:
            return self.chp[device_id][0] - sold
        return 0.0

    # electric side

    def electric_outputs(self) -> Dict[str, float]:
        """Electric MW per producing device, slack included"""
        outputs: Dict[str, float] = {}
        slack_id = self.network.slack_device.id
        for device in self.network.devices.values():
            if device.id == slack_id or Carrier.ELECTRICITY not in device.carriers:
                continue
            if device.kind == DeviceKind.RENEWABLE_GEN:
                sold = min(self.available.get(device.id, 0.0), self.contracted(device.id))
                outputs[device.id] = max(0.0, sold - self.reductions.get(device.id, 0.0))
            elif device.kind == DeviceKind.THERMAL_GEN:
                low, high = device.limit(Carrier.ELECTRICITY)
                scheduled = self.setpoints.get(device.id, low) + self.contracted(device.id)
                outputs[device.id] = max(0.0, min(scheduled, high) - self.reductions.get(device.id, 0.0))
            elif device.kind == DeviceKind.CHP:
                outputs[device.id] = self.chp.get(device.id, (0.0, 0.0))[0]
            elif device.kind == DeviceKind.STORAGE:
                outputs[device.id] = max(0.0, self.setpoints.get(device.id, 0.0))
        outputs[slack_id] = self._slack_from(outputs)
        return outputs

    def electric_consumption(self) -> Dict[str, float]:
        """Electric MW per consuming device (loads after response, charging storage)"""
        consumption = {d: max(0.0, mw - self.reductions.get(d, 0.0)) for d, mw in self.loads.items()}
        for device in self.network.devices_by_kind(DeviceKind.STORAGE):
            charging = -min(0.0, self.setpoints.get(device.id, 0.0))
            if charging > 0:
                consumption[device.id] = charging
        return consumption

    def _slack_from(self, outputs: Mapping[str, float]) -> float:
        return sum(self.electric_consumption().values()) - sum(outputs.values())

    def slack_output(self) -> float:
        return self.electric_outputs()[self.network.slack_device.id]

    def injections(self) -> Injections:
        per_bus: Dict[str, float] = {b: 0.0 for b in self.network.electric_buses}
        for device_id, mw in self.electric_outputs().items():
            per_bus[self.network.devices[device_id].bus] += mw
        for device_id, mw in self.electric_consumption().items():
            per_bus[self.network.devices[device_id].bus] -= mw
        return Injections.electric(per_bus, timestamp=self.step)

    def unsold(self) -> Dict[str, float]:
        """Available renewable electricity not delivered, per device"""
        outputs = self.electric_outputs()
        return {
            d.id: max(0.0, self.available.get(d.id, 0.0) - outputs.get(d.id, 0.0))
            for d in self.network.devices_by_kind(DeviceKind.RENEWABLE_GEN)
            if d.carrier == Carrier.ELECTRICITY
        }

    def curtailed(self) -> Dict[str, float]:
        """Unsold renewable electricity that had a buyer but was refused by the grid"""
        refused: Dict[str, float] = {}
        for d in self.blocked:
            if d.carrier == Carrier.ELECTRICITY:
                refused[d.seller_device] = refused.get(d.seller_device, 0.0) + d.quantity
        return {device_id: min(mw, refused.get(device_id, 0.0)) for device_id, mw in self.unsold().items()}

    def slack_within_limits(self) -> bool:
        low, high = self.network.slack_device.limit(Carrier.ELECTRICITY)
        return low - 1e-9 <= self.slack_output() <= high + 1e-9

    # heat and fuel

    def heat_outputs(self) -> Dict[str, float]:
        outputs = {d: hp for d, (_, hp) in self.chp.items()}
        for device in self.network.devices_by_kind(DeviceKind.RENEWABLE_GEN):
            if device.carrier == Carrier.HEAT:
                outputs[device.id] = self.available.get(device.id, 0.0)
        return outputs

    def gas_use(self) -> Dict[str, float]:
        """Gas fuel MW drawn by fuel-burning devices"""
        electric = self.electric_outputs()
        return {
            d.id: (max(0.0, electric.get(d.id, 0.0)) + self.chp.get(d.id, (0.0, 0.0))[1]) / d.gas_efficiency
            for d in self.network.devices.values() if d.burns_gas
        }

    def emissions(self, step_hours: float) -> Dict[str, float]:
        """tCO2 emitted per device over this step"""
        electric = self.electric_outputs()
        heat = self.heat_outputs()
        return {
            d.id: d.emission_rate * (max(0.0, electric.get(d.id, 0.0)) + heat.get(d.id, 0.0)) * step_hours
            for d in self.network.devices.values() if d.is_generator
        }

    # demand response

    def with_reduction(self, device_id: str, mw: float) -> Tuple["Schedule", float]:
        """Apply a scripted reduction; returns the new schedule and the MW actually shed"""
        device = self.network.devices[device_id]
        if device.kind == DeviceKind.LOAD and device.carrier == Carrier.ELECTRICITY:
            base = self.loads.get(device_id, 0.0)
        elif device.kind in (DeviceKind.THERMAL_GEN, DeviceKind.RENEWABLE_GEN) \
                and device.id != self.network.slack_device.id:
            base = self.electric_outputs().get(device_id, 0.0)
        else:
            return self, 0.0
        already = self.reductions.get(device_id, 0.0)
        shed = max(0.0, min(mw, base - already if device.kind == DeviceKind.LOAD else base))
        reductions = dict(self.reductions)
        reductions[device_id] = already + shed
        return replace(self, reductions=reductions), shed


def _chp_targets(network: Network, heat_loads: Mapping[str, float],
                 chp_external: Mapping[str, float], heat_renewables: Mapping[str, float]) -> Dict[str, float]:
    """Heat each CHP must follow: its own external demand plus a share of its component's net load"""
    targets = {d.id: chp_external.get(d.id, 0.0) for d in network.devices_by_kind(DeviceKind.CHP)}
    for component in network.heat_components():
        members = set(component)
        units = [d for d in network.devices_by_kind(DeviceKind.CHP) if d.bus in members]
        if not units:
            continue
        load = sum(mw for d, mw in heat_loads.items() if network.devices[d].bus in members)
        clean = sum(mw for d, mw in heat_renewables.items() if network.devices[d].bus in members)
        net = max(0.0, load - clean)
        caps = [d.limit(Carrier.HEAT)[1] for d in units]
        if all(c == float("inf") for c in caps) or sum(caps) == 0:
            weights = [1.0 / len(units)] * len(units)
        else:
            finite = [c if c != float("inf") else max(x for x in caps if x != float("inf")) for c in caps]
            weights = [c / sum(finite) for c in finite]
        for device, weight in zip(units, weights):
            targets[device.id] += net * weight
    return targets


def build_schedule(network: Network, step: int, profile_values: Mapping[str, float],
                   deliveries: Optional[List[Delivery]] = None,
                   blocked: Optional[List[Delivery]] = None) -> Schedule:
    """Read this step's profile values and run the CHP units heat-led"""
    loads: Dict[str, float] = {}
    heat_loads: Dict[str, float] = {}
    available: Dict[str, float] = {}
    setpoints: Dict[str, float] = {}
    chp_external: Dict[str, float] = {}
    slack_id = network.slack_device.id

    for device in network.devices.values():
        value = profile_values.get(device.id)
        if device.kind == DeviceKind.LOAD:
            target = loads if device.carrier == Carrier.ELECTRICITY else heat_loads
            target[device.id] = max(0.0, value or 0.0)
        elif device.kind == DeviceKind.RENEWABLE_GEN:
            available[device.id] = max(0.0, value or 0.0)
        elif device.kind == DeviceKind.THERMAL_GEN and device.id != slack_id:
            low, high = device.limit(Carrier.ELECTRICITY)
            setpoints[device.id] = min(max(value if value is not None else low, low), high)
        elif device.kind == DeviceKind.STORAGE:
            low, high = device.limits.get(Carrier.ELECTRICITY, (float("-inf"), float("inf")))
            setpoints[device.id] = min(max(value or 0.0, low), high)
        elif device.kind == DeviceKind.CHP:
            chp_external[device.id] = max(0.0, value or 0.0)

    heat_renewables = {d: mw for d, mw in available.items()
                       if network.devices[d].carrier == Carrier.HEAT}
    targets = _chp_targets(network, heat_loads, chp_external, heat_renewables)
    chp = {
        d: chp_outputs(targets[d], network.devices[d].heat_power_ratio, network.devices[d].limits)
        for d in targets
    }

    return Schedule(
        network=network,
        step=step,
        loads=loads,
        heat_loads=heat_loads,
        available=available,
        setpoints=setpoints,
        chp=chp,
        deliveries=tuple(deliveries or ()),
        blocked=tuple(blocked or ()),
    )
