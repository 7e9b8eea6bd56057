"""
Token issuance and levy, account caps, fiat exchange and priority rights
"""
import math
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal, localcontext
from enum import Enum
from typing import List, Optional, Set, Tuple

from src.utils.logger import get_logger

logger = get_logger(__name__)

EXACT_DIGITS = 60


class TokenError(Exception):
    """Base class for refused account operations"""


class InsufficientBalanceError(TokenError):
    pass


class RestrictedAccountError(TokenError):
    pass


class DuplicateRightError(TokenError):
    pass


class Right(str, Enum):
    PRIORITY_GENERATION = "priority_generation"
    PRIORITY_PURCHASE = "priority_purchase"
    CORRIDOR_USE = "corridor_use"


class Cause(str, Enum):
    CARBON_REWARD = "carbon_reward"
    CARBON_LEVY = "carbon_levy"
    CONGESTION_REWARD = "congestion_reward"
    FEE_PAYMENT = "fee_payment"
    FEE_REFUND = "fee_refund"
    FIAT_EXCHANGE = "fiat_exchange"
    RIGHT_PURCHASE = "right_purchase"


class Side(str, Enum):
    SUPPLY = "supply"
    PURCHASE = "purchase"


@dataclass(frozen=True)
class TokenRule:
    """Parameters of the piecewise issuance rule"""
    theta: float  # penalty coefficient
    xi: float  # reward coefficient
    f1: float  # lower reward threshold
    f2: float  # saturation threshold
    n_max: int  # issuance cap per period

    def __post_init__(self):
        if not (self.theta > 0 and self.xi > 0):
            raise ValueError("theta and xi must be > 0")
        if not 0 < self.f1 < self.f2:
            raise ValueError(f"need 0 < f1 < f2, got f1={self.f1}, f2={self.f2}")
        if int(self.n_max) != self.n_max or self.n_max <= 0:
            raise ValueError(f"n_max must be a positive integer, got {self.n_max}")


@dataclass(frozen=True)
class Issuance:
    """One auditable balance change"""
    actor: str
    amount: int
    cause: Cause
    timestamp: int
    note: str = ""


@dataclass
class Account:
    actor: str
    balance: int = 0
    balance_cap: int = 1000
    issued_this_period: int = 0
    escrowed: int = 0
    rights: Set[Right] = field(default_factory=set)
    initial_balance: Optional[int] = None

    def __post_init__(self):
        if self.balance_cap <= 0:
            raise ValueError(f"balance_cap must be > 0 for '{self.actor}'")
        if self.balance > self.balance_cap:
            raise ValueError(f"initial balance of '{self.actor}' exceeds its cap")
        if self.initial_balance is None:
            self.initial_balance = self.balance

    @property
    def restricted(self) -> bool:
        return self.balance < 0


def _floor_scaled_expm1(coefficient: float, x: float) -> int:
    """floor(coefficient * (e^x - 1)) on the exact binary values of the floats"""
    with localcontext() as ctx:
        ctx.prec = EXACT_DIGITS
        value = Decimal(coefficient) * (Decimal(x).exp() - 1)
        return int(value.to_integral_value(rounding=ROUND_FLOOR))


def tokens_for_factor(f: float, rule: TokenRule) -> int:
    """Piecewise issuance: levy below 0, dead zone below f1, exponential reward, cap from f2"""
    if not math.isfinite(f):
        raise ValueError(f"contribution factor must be finite, got {f}")
    if f < 0:
        return _floor_scaled_expm1(-rule.theta, -f)
    if f < rule.f1:
        return 0
    if f < rule.f2:
        return _floor_scaled_expm1(rule.xi, f)
    return int(rule.n_max)


def _record(account: Account, amount: int, cause: Cause, timestamp: int,
            audit: Optional[List[Issuance]], note: str = "") -> Issuance:
    issuance = Issuance(actor=account.actor, amount=amount, cause=cause, timestamp=timestamp, note=note)
    if audit is not None:
        audit.append(issuance)
    return issuance


def settle(account: Account, n: int, cause: Cause, rule: TokenRule, timestamp: int = 0,
           audit: Optional[List[Issuance]] = None) -> Tuple[Account, Issuance]:
    """Apply an issuance (clipped by the period cap and the account cap) or a levy (in full)"""
    n = int(n)
    if n > 0:
        room_period = max(0, int(rule.n_max) - account.issued_this_period)
        room_account = max(0, account.balance_cap - account.balance - account.escrowed)
        applied = min(n, room_period, room_account)
        if applied < n:
            logger.debug(f"{account.actor}: issuance {n} clipped to {applied}")
        account.balance += applied
        account.issued_this_period += applied
    else:
        applied = n
        account.balance += applied
        if account.restricted:
            logger.debug(f"{account.actor}: balance {account.balance}, trading restricted")
    return account, _record(account, applied, cause, timestamp, audit)


def reset_period(account: Account) -> Account:
    account.issued_this_period = 0
    return account


def expire_rights(account: Account) -> Account:
    account.rights.clear()
    return account


def exchange_fiat(account: Account, tokens: int, rate: float, timestamp: int = 0,
                  audit: Optional[List[Issuance]] = None) -> Tuple[Account, float]:
    """Redeem tokens for currency at a fixed rate"""
    if tokens <= 0 or rate <= 0:
        raise ValueError("tokens and rate must be positive")
    if account.restricted:
        raise RestrictedAccountError(f"'{account.actor}' is restricted")
    if tokens > account.balance:
        raise InsufficientBalanceError(f"'{account.actor}' holds {account.balance}, wants {tokens}")
    account.balance -= tokens
    _record(account, -tokens, Cause.FIAT_EXCHANGE, timestamp, audit)
    return account, tokens * rate


def buy_right(account: Account, right: Right, price: int, timestamp: int = 0,
              audit: Optional[List[Issuance]] = None) -> Account:
    """Buy a priority right for the current period"""
    if account.restricted:
        raise RestrictedAccountError(f"'{account.actor}' is restricted")
    if right in account.rights:
        raise DuplicateRightError(f"'{account.actor}' already holds {right.value}")
    if account.balance < price:
        raise InsufficientBalanceError(f"'{account.actor}' holds {account.balance}, price {price}")
    account.balance -= price
    account.rights.add(right)
    _record(account, -price, Cause.RIGHT_PURCHASE, timestamp, audit, note=right.value)
    return account


def is_trading_allowed(account: Account, side: Side) -> bool:
    """Negative balances block both feeding in and buying"""
    return not account.restricted


def escrow_fee(account: Account, fee: int, timestamp: int = 0,
               audit: Optional[List[Issuance]] = None) -> Account:
    if fee > account.balance:
        raise InsufficientBalanceError(f"'{account.actor}' holds {account.balance}, fee {fee}")
    if fee > 0:
        account.balance -= fee
        account.escrowed += fee
        _record(account, -fee, Cause.FEE_PAYMENT, timestamp, audit)
    return account


def release_fee(account: Account, fee: int) -> Account:
    """Escrowed fee leaves the account for good (paid to the ordering node)"""
    account.escrowed -= fee
    return account


def refund_fee(account: Account, fee: int, timestamp: int = 0,
               audit: Optional[List[Issuance]] = None) -> Account:
    if fee > 0:
        account.escrowed -= fee
        account.balance += fee
        _record(account, fee, Cause.FEE_REFUND, timestamp, audit)
    return account
