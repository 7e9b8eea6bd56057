"""
Parser and validator for scenario documents (one UTF-8 JSON file per scenario)
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from src.grid.network import Carrier, DeviceKind, check_topology
from src.incentives.tokens import Right
from src.utils.logger import get_logger

logger = get_logger(__name__)


class ScenarioError(Exception):
    """Raised when a scenario cannot be parsed or validated; carries every error found"""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__(f"{len(self.errors)} scenario error(s): " + "; ".join(self.errors))


class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# topology

class BusRecord(_Record):
    id: str
    carriers: List[Carrier] = [Carrier.ELECTRICITY]


class LineRecord(_Record):
    id: str
    carrier: Carrier = Carrier.ELECTRICITY
    from_bus: str = Field(alias="from")
    to_bus: str = Field(alias="to")
    capacity: float = Field(gt=0)
    susceptance: Optional[float] = None


class DeviceRecord(_Record):
    id: str
    bus: str
    kind: DeviceKind
    owner: str
    carrier: Carrier = Carrier.ELECTRICITY
    emission_rate: float = Field(0.0, ge=0)
    heat_power_ratio: Optional[float] = None
    gas_efficiency: float = Field(1.0, gt=0)
    limits: Dict[Carrier, Tuple[float, float]] = {}


class TopologySection(_Record):
    base_mva: float = Field(100.0, gt=0)
    slack_bus: str
    buses: List[BusRecord]
    lines: List[LineRecord] = []
    devices: List[DeviceRecord] = []


# economy

class ActorRecord(_Record):
    id: str
    role: Literal["supplier", "consumer", "prosumer"] = "prosumer"
    initial_balance: int = 0
    balance_cap: int = Field(1000, gt=0)
    s_permit: Optional[float] = Field(None, gt=0)  # tCO2 permitted per period


class ThresholdPair(_Record):
    upper: float = Field(gt=0)
    lower: float = Field(lt=0)


class IncentivesSection(_Record):
    alpha: float = Field(gt=0)
    beta: float = Field(ge=0)
    gamma: float = Field(ge=0)
    sigma: float = Field(ge=0)
    dr_credit: List[Tuple[float, float]] = [(0.0, 0.0)]
    congestion_table: List[Tuple[float, float]] = [(0.0, 0.0)]
    carbon_thresholds: ThresholdPair
    congestion_thresholds: ThresholdPair


class RuleRecord(_Record):
    theta: float = Field(gt=0)
    xi: float = Field(gt=0)
    f1: float = Field(gt=0)
    f2: float = Field(gt=0)
    n_max: int = Field(gt=0)

    @model_validator(mode="after")
    def _ordered_thresholds(self):
        if not self.f1 < self.f2:
            raise ValueError(f"f1 ({self.f1}) must be below f2 ({self.f2})")
        return self


class TokensSection(_Record):
    carbon_rule: RuleRecord
    congestion_rule: Optional[RuleRecord] = None
    exchange_rate: float = Field(gt=0)
    right_prices: Dict[Right, int] = {}


class LedgerSection(_Record):
    block_threshold: int = Field(ge=1)
    node_count: int = Field(1, ge=1)


# schedule

class ProfileRecord(_Record):
    values: List[float]
    noise: float = Field(0.0, ge=0)  # relative standard deviation of multiplicative noise


class DemandResponseEvent(_Record):
    device: str
    step: int = Field(ge=0)
    reduction: float = Field(gt=0)


class ContractRecord(_Record):
    id: str
    seller: str
    buyer: str
    carrier: Carrier = Carrier.ELECTRICITY
    quantity: float = Field(gt=0)
    price: float = Field(ge=0)
    fee: int = Field(0, ge=0)
    step: int = Field(ge=0)
    duration: int = Field(1, ge=1)
    submitter: Literal["seller", "buyer"] = "seller"
    seller_device: Optional[str] = None
    buyer_device: Optional[str] = None
    repeat_every: Optional[int] = Field(None, ge=1)
    until: Optional[int] = None


class ExchangeEvent(_Record):
    actor: str
    step: int = Field(ge=0)
    tokens: int = Field(gt=0)


class RightPurchaseEvent(_Record):
    actor: str
    step: int = Field(ge=0)
    right: Right


class ScheduleSection(_Record):
    steps_per_period: int = Field(ge=1)
    periods: int = Field(ge=1)
    step_hours: float = Field(1.0, gt=0)
    profiles: Dict[str, Union[List[float], ProfileRecord]] = {}
    dr_events: List[DemandResponseEvent] = []
    contracts: List[ContractRecord] = []
    exchanges: List[ExchangeEvent] = []
    right_purchases: List[RightPurchaseEvent] = []

    @property
    def horizon(self) -> int:
        return self.steps_per_period * self.periods


class ScenarioConfig(_Record):
    """Validated scenario: topology, actors, incentives, tokens, ledger and schedule"""
    name: str = "scenario"
    seed: int = 0
    economy: Dict[str, Any] = {}
    topology: TopologySection
    actors: List[ActorRecord]
    incentives: IncentivesSection
    tokens: TokensSection
    ledger: LedgerSection
    schedule: ScheduleSection

    @property
    def horizon(self) -> int:
        return self.schedule.horizon


def expand_contracts(schedule: ScheduleSection) -> List[ContractRecord]:
    """One record per submission step; repeated entries get ids '<id>@<step>'"""
    expanded = []
    for record in schedule.contracts:
        if record.repeat_every is None:
            expanded.append(record)
            continue
        last = schedule.horizon - 1 if record.until is None else min(record.until, schedule.horizon - 1)
        for step in range(record.step, last + 1, record.repeat_every):
            expanded.append(record.model_copy(update={
                "id": f"{record.id}@{step}",
                "step": step,
                "repeat_every": None,
                "until": None,
            }))
    return expanded


def _format_pydantic(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        messages.append(f"{path}: {item['msg']}")
    return messages


def _reference_errors(topology: Optional[TopologySection], actors: Optional[List[ActorRecord]],
                      tokens: Optional[TokensSection], schedule: Optional[ScheduleSection]) -> List[str]:
    """Cross-reference checks over whichever sections are available; skipped for missing ones"""
    errors: List[str] = []
    devices = {d.id: d for d in topology.devices} if topology is not None else None
    known_actors = {a.id for a in actors} if actors is not None else None

    if topology is not None:
        errors.extend(check_topology(topology))

    if actors is not None:
        actor_ids = [a.id for a in actors]
        for actor in sorted({a for a in actor_ids if actor_ids.count(a) > 1}):
            errors.append(f"actors: duplicate id '{actor}'")
        for a in actors:
            if a.initial_balance > a.balance_cap:
                errors.append(f"actors[{a.id}].initial_balance: exceeds balance_cap {a.balance_cap}")

    if devices is not None and known_actors is not None:
        for device in devices.values():
            if device.owner not in known_actors:
                errors.append(f"topology.devices[{device.id}].owner: unknown actor '{device.owner}'")
        for a in actors:
            owns_generator = any(d.owner == a.id and d.kind in (
                DeviceKind.THERMAL_GEN, DeviceKind.RENEWABLE_GEN, DeviceKind.CHP) for d in devices.values())
            if owns_generator and a.s_permit is None:
                errors.append(f"actors[{a.id}].s_permit: required for generator owners")

    if schedule is None:
        return errors
    horizon = schedule.horizon

    for key, profile in schedule.profiles.items():
        if devices is not None and key not in devices:
            errors.append(f"schedule.profiles.{key}: unknown device")
        values = profile if isinstance(profile, list) else profile.values
        if len(values) < horizon:
            errors.append(f"schedule.profiles.{key}: {len(values)} values, horizon needs {horizon}")

    for i, event in enumerate(schedule.dr_events):
        if devices is not None and event.device not in devices:
            errors.append(f"schedule.dr_events[{i}].device: unknown device '{event.device}'")
        if event.step >= horizon:
            errors.append(f"schedule.dr_events[{i}].step: beyond horizon {horizon}")

    for record in schedule.contracts:
        where = f"schedule.contracts[{record.id}]"
        for role in ("seller", "buyer"):
            if known_actors is not None and getattr(record, role) not in known_actors:
                errors.append(f"{where}.{role}: unknown actor '{getattr(record, role)}'")
        if record.seller == record.buyer:
            errors.append(f"{where}: seller and buyer must differ")
        for role in ("seller_device", "buyer_device"):
            device = getattr(record, role)
            if devices is not None and device is not None and device not in devices:
                errors.append(f"{where}.{role}: unknown device '{device}'")
        if record.step >= horizon:
            errors.append(f"{where}.step: beyond horizon {horizon}")
    contract_ids = [c.id for c in expand_contracts(schedule)]
    for cid in sorted({c for c in contract_ids if contract_ids.count(c) > 1}):
        errors.append(f"schedule.contracts: duplicate id '{cid}'")

    if known_actors is not None:
        for name, events in (("exchanges", schedule.exchanges),
                             ("right_purchases", schedule.right_purchases)):
            for i, event in enumerate(events):
                if event.actor not in known_actors:
                    errors.append(f"schedule.{name}[{i}].actor: unknown actor '{event.actor}'")
    if tokens is not None:
        for i, event in enumerate(schedule.right_purchases):
            if event.right not in tokens.right_prices:
                errors.append(f"schedule.right_purchases[{i}].right: no price for '{event.right.value}'")

    return errors


def check_references(config: ScenarioConfig) -> List[str]:
    """Cross-reference checks that the schema alone cannot express"""
    return _reference_errors(config.topology, config.actors, config.tokens, config.schedule)


_SECTION_TYPES = {
    "topology": TopologySection,
    "actors": List[ActorRecord],
    "tokens": TokensSection,
    "schedule": ScheduleSection,
}


def _sections_that_validate(document: Mapping[str, Any]) -> Dict[str, Any]:
    """Sections of a schema-invalid document that are valid on their own"""
    sections: Dict[str, Any] = {}
    for name, annotation in _SECTION_TYPES.items():
        if name not in document:
            continue
        try:
            sections[name] = TypeAdapter(annotation).validate_python(document[name])
        except ValidationError:
            continue
    return sections


def load_scenario(document: Union[Mapping[str, Any], str, bytes]) -> ScenarioConfig:
    """Validate a scenario document (parsed mapping or JSON text) into a ScenarioConfig"""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise ScenarioError([f"Invalid JSON: {e}"])
    if not isinstance(document, Mapping):
        raise ScenarioError(["<root>: scenario must be a JSON object"])

    try:
        config = ScenarioConfig.model_validate(document)
    except ValidationError as e:
        sections = _sections_that_validate(document)
        raise ScenarioError(_format_pydantic(e) + _reference_errors(
            sections.get("topology"), sections.get("actors"), sections.get("tokens"), sections.get("schedule")))

    errors = check_references(config)
    if errors:
        raise ScenarioError(errors)
    logger.debug(f"Loaded scenario '{config.name}': horizon {config.horizon} steps")
    return config


class ScenarioParser:
    """Reads a scenario file from disk"""

    def __init__(self, file_path: Union[str, Path]):
        self.file_path = Path(file_path)
        self.raw_data: Optional[Dict[str, Any]] = None

    def parse(self) -> ScenarioConfig:
        if not self.file_path.exists():
            raise FileNotFoundError(f"File not found: {self.file_path}")
        text = self.file_path.read_text(encoding="utf-8")
        try:
            self.raw_data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ScenarioError([f"Invalid JSON: {e}"])
        return load_scenario(self.raw_data)

    def get_stats(self) -> Dict[str, Any]:
        """Topology and schedule statistics of the scenario"""
        config = self.parse()
        kinds: Dict[str, int] = {}
        for device in config.topology.devices:
            kinds[device.kind.value] = kinds.get(device.kind.value, 0) + 1
        return {
            "name": config.name,
            "buses": len(config.topology.buses),
            "lines": len(config.topology.lines),
            "device_kinds": kinds,
            "actors": len(config.actors),
            "horizon": config.horizon,
            "periods": config.schedule.periods,
            "contracts": len(expand_contracts(config.schedule)),
            "dr_events": len(config.schedule.dr_events),
            "file_size_kb": self.file_path.stat().st_size / 1024,
        }


def validate_scenario_file(file_path: Union[str, Path]) -> Tuple[bool, List[str]]:
    """Validate a scenario file, returning (is_valid, all errors)"""
    try:
        ScenarioParser(file_path).parse()
    except FileNotFoundError:
        return False, ["File not found"]
    except ScenarioError as e:
        return False, e.errors
    return True, []
