"""
Block execution: re-validate packed contracts in priority order and settle fees
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from src.grid.network import Network
from src.incentives.tokens import Account, Issuance, Right, Side, is_trading_allowed, refund_fee, release_fee
from src.ledger.chain import Block, Chain
from src.ledger.contracts import Contract, ContractStatus, delivery_for, validate_contract
from src.simulation.dispatch import Schedule
from src.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class ExecutionResult:
    executed: List[str] = field(default_factory=list)
    cancelled: List[Tuple[str, str]] = field(default_factory=list)  # (contract id, reason)
    blocked: List[str] = field(default_factory=list)  # cancelled because the grid refused the power
    schedule: Optional[Schedule] = None
    fees_collected: int = 0


def priority_tier(c: Contract, accounts: Dict[str, Account]) -> int:
    """0: priority generation/purchase holders, 1: corridor holders, 2: everyone else"""
    seller_rights = accounts[c.seller].rights
    buyer_rights = accounts[c.buyer].rights
    if Right.PRIORITY_GENERATION in seller_rights or Right.PRIORITY_PURCHASE in buyer_rights:
        return 0
    if Right.CORRIDOR_USE in seller_rights or Right.CORRIDOR_USE in buyer_rights:
        return 1
    return 2


def _cancel(c: Contract, reason: str, accounts: Dict[str, Account], step: int,
            audit: Optional[List[Issuance]], result: ExecutionResult) -> None:
    c.status = ContractStatus.CANCELLED
    c.reason = reason
    refund_fee(accounts[c.payer], c.fee, timestamp=step, audit=audit)
    result.cancelled.append((c.id, reason))
    logger.debug(f"Step {step}: contract {c.id} cancelled ({reason}); "
                 f"{c.seller} and {c.buyer} notified")


def execute_block(block: Block, network: Network, schedule: Schedule, accounts: Dict[str, Account],
                  chain: Chain, step: int, audit: Optional[List[Issuance]] = None,
                  expire: bool = False) -> ExecutionResult:
    """Validate each packed contract against the evolving schedule and execute or cancel it

    Within the block, priority-right holders go first; the fee order is kept inside each tier.
    With expire=True (end-of-run flush) every contract is cancelled and refunded.
    """
    result = ExecutionResult(schedule=schedule)
    ordered = sorted(block.contracts, key=lambda c: priority_tier(c, accounts))

    for c in ordered:
        if expire:
            _cancel(c, "horizon reached", accounts, step, audit, result)
            continue
        if not (is_trading_allowed(accounts[c.seller], Side.SUPPLY)
                and is_trading_allowed(accounts[c.buyer], Side.PURCHASE)):
            _cancel(c, "party restricted", accounts, step, audit, result)
            continue

        verdict = validate_contract(c, network, result.schedule)
        if not verdict.accepted:
            _cancel(c, verdict.reason, accounts, step, audit, result)
            if verdict.by_grid:
                result.schedule = result.schedule.with_blocked(delivery_for(c, network))
                result.blocked.append(c.id)
            continue

        c.status = ContractStatus.EXECUTED
        c.executed_at = step
        result.schedule = result.schedule.with_delivery(delivery_for(c, network))
        release_fee(accounts[c.payer], c.fee)
        chain.collected_fees += c.fee
        result.fees_collected += c.fee
        result.executed.append(c.id)
        logger.debug(f"Step {step}: contract {c.id} executed, {c.quantity} MW {c.seller}->{c.buyer}")

    return result
