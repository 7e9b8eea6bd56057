"""
Energy trade contracts, the fee-ordered pending pool, submission and feasibility checks
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

from src.grid.network import Carrier, DeviceKind, Network
from src.grid.power_flow import SolverError, detect_congestion, solve_dc_flow
from src.incentives.tokens import (
    Account, InsufficientBalanceError, Issuance, Side, escrow_fee, is_trading_allowed,
)
from src.simulation.dispatch import Delivery, Schedule
from src.utils.logger import get_logger

logger = get_logger(__name__)


class LedgerError(Exception):
    """Base class for ledger failures"""


class ContractRefused(LedgerError):
    """A submission that never enters the pending pool"""

    def __init__(self, contract_id: str, reason: str):
        self.contract_id = contract_id
        self.reason = reason
        super().__init__(f"contract '{contract_id}' refused: {reason}")


class ContractStatus(str, Enum):
    PENDING = "pending"
    PACKED = "packed"
    EXECUTED = "executed"
    REJECTED = "rejected"
    CANCELLED = "cancelled"


@dataclass
class Contract:
    """A bilateral energy trade: quantity MW per step for `duration` steps"""
    id: str
    seller: str
    buyer: str
    carrier: Carrier
    quantity: float
    price: float  # currency per MWh
    fee: int = 0  # tokens offered to the ordering node
    submitted_at: int = 0
    duration: int = 1
    submitter: str = "seller"
    seller_device: Optional[str] = None
    buyer_device: Optional[str] = None
    status: ContractStatus = ContractStatus.PENDING
    executed_at: Optional[int] = None
    reason: str = ""

    def __post_init__(self):
        if not self.quantity > 0:
            raise ValueError(f"contract '{self.id}': quantity must be > 0")
        if self.seller == self.buyer:
            raise ValueError(f"contract '{self.id}': seller and buyer must differ")
        if self.fee < 0:
            raise ValueError(f"contract '{self.id}': fee must be >= 0")
        if self.duration < 1:
            raise ValueError(f"contract '{self.id}': duration must be >= 1")
        if self.submitter not in ("seller", "buyer"):
            raise ValueError(f"contract '{self.id}': submitter must be seller or buyer")

    @property
    def payer(self) -> str:
        """Actor whose tokens pay the fee"""
        return self.seller if self.submitter == "seller" else self.buyer

    def active_at(self, step: int) -> bool:
        return (self.status == ContractStatus.EXECUTED and self.executed_at is not None
                and self.executed_at <= step < self.executed_at + self.duration)


def priority_key(contract: Contract) -> Tuple[int, int, str]:
    """Fee descending, then earlier submission, then id"""
    return (-contract.fee, contract.submitted_at, contract.id)


class PendingPool:
    """Pending contracts, iterated in fee-priority order"""

    def __init__(self):
        self._contracts: Dict[str, Contract] = {}

    def __len__(self) -> int:
        return len(self._contracts)

    def __contains__(self, contract_id: str) -> bool:
        return contract_id in self._contracts

    def __iter__(self) -> Iterator[Contract]:
        return iter(order_pending(self))

    def add(self, contract: Contract) -> None:
        if contract.id in self._contracts:
            raise LedgerError(f"contract '{contract.id}' already pending")
        self._contracts[contract.id] = contract

    def remove(self, contract_id: str) -> Contract:
        return self._contracts.pop(contract_id)

    def contracts(self) -> List[Contract]:
        return list(self._contracts.values())


def order_pending(pool: PendingPool) -> List[Contract]:
    return sorted(pool.contracts(), key=priority_key)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""
    by_grid: bool = False  # refused because the grid could not take the power

    @classmethod
    def accept(cls) -> "Verdict":
        return cls(True)

    @classmethod
    def reject(cls, reason: str, by_grid: bool = False) -> "Verdict":
        return cls(False, reason, by_grid)


def submit_contract(c: Contract, accounts: Dict[str, Account], pool: PendingPool,
                    timestamp: int = 0, audit: Optional[List[Issuance]] = None) -> ContractStatus:
    """Broadcast a contract into the pending pool, escrowing its fee from the payer"""
    for actor in (c.seller, c.buyer):
        if actor not in accounts:
            raise ContractRefused(c.id, f"unknown actor '{actor}'")
    if not is_trading_allowed(accounts[c.seller], Side.SUPPLY):
        raise ContractRefused(c.id, f"seller '{c.seller}' is restricted")
    if not is_trading_allowed(accounts[c.buyer], Side.PURCHASE):
        raise ContractRefused(c.id, f"buyer '{c.buyer}' is restricted")
    try:
        escrow_fee(accounts[c.payer], c.fee, timestamp=timestamp, audit=audit)
    except InsufficientBalanceError as e:
        raise ContractRefused(c.id, f"insufficient tokens for fee: {e}")

    c.status = ContractStatus.PENDING
    pool.add(c)
    logger.debug(f"Step {timestamp}: contract {c.id} pending (fee {c.fee})")
    return c.status


def resolve_devices(c: Contract, network: Network) -> Tuple[Optional[str], Optional[str]]:
    """Seller/buyer devices: explicit ids or the first eligible device each actor owns"""
    seller = c.seller_device
    if seller is None:
        candidates = [d for d in network.devices_of(c.seller)
                      if d.is_generator and c.carrier in d.carriers]
        seller = candidates[0].id if candidates else None
    buyer = c.buyer_device
    if buyer is None:
        candidates = [d for d in network.devices_of(c.buyer)
                      if d.kind == DeviceKind.LOAD and d.carrier == c.carrier]
        buyer = candidates[0].id if candidates else None
    return seller, buyer


def delivery_for(c: Contract, network: Network) -> Optional[Delivery]:
    seller, buyer = resolve_devices(c, network)
    if seller is None or buyer is None:
        return None
    return Delivery(contract_id=c.id, seller_device=seller, buyer_device=buyer,
                    quantity=c.quantity, carrier=c.carrier)


def validate_contract(c: Contract, network: Network, schedule: Schedule) -> Verdict:
    """Accept iff the schedule plus this trade stays within line and device limits"""
    if c.carrier == Carrier.GAS:
        return Verdict.reject("gas is not traded")

    delivery = delivery_for(c, network)
    if delivery is None:
        return Verdict.reject("no eligible seller or buyer device")
    seller = network.devices.get(delivery.seller_device)
    buyer = network.devices.get(delivery.buyer_device)
    if seller is None or buyer is None or seller.owner != c.seller or buyer.owner != c.buyer:
        return Verdict.reject("device not owned by contract party")

    headroom = schedule.headroom(seller.id, c.carrier)
    if c.quantity > headroom + 1e-9:
        return Verdict.reject(f"device limit: {seller.id} can sell {max(headroom, 0.0):.6g} MW")

    if c.carrier == Carrier.HEAT:
        return Verdict.accept()

    tentative = schedule.with_delivery(delivery)
    low, high = network.slack_device.limit(Carrier.ELECTRICITY)
    before, after = schedule.slack_output(), tentative.slack_output()
    if (after < low - 1e-9 and after < before) or (after > high + 1e-9 and after > before):
        return Verdict.reject(f"device limit: slack {network.slack_device.id} out of range", by_grid=True)
    try:
        flow = solve_dc_flow(network, tentative.injections())
    except SolverError as e:
        return Verdict.reject(f"solver: {e}", by_grid=True)
    report = detect_congestion(flow, network)
    if report.congested:
        return Verdict.reject(f"congestion on {','.join(report.line_ids)}", by_grid=True)
    return Verdict.accept()
