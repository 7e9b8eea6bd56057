"""
Discrete-time simulation loop

Each step runs in a fixed order:

    1. read profiles            2. heat-led CHP coupling
    3. submissions, exchanges and right purchases scheduled this step
    4. form and execute blocks  5. solve the DC flow
    6. detect congestion and apply demand response
    7. trace and stamp flows    8. update accumulators
    9. settle triggered thresholds

Carbon factors are settled once per period from period totals; congestion
accumulators settle on their upper threshold and are drained at period end.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config.settings import DEFAULT_CONGESTION_RULE
from src.grid.network import Carrier, DeviceKind, Network, build_network
from src.grid.power_flow import FlowSolution, detect_congestion, line_loading, solve_dc_flow
from src.grid.tracing import (
    TraceLedger, TraceResult, attribute_heat, clean_fraction, period_clean_energy, stamp_flows,
    trace_sources,
)
from src.incentives.contribution import (
    DemandFactorParams, EmissionRecord, FactorAccumulator, StepTable, SupplyFactorParams, Trigger,
    accumulate_and_check, congestion_factor, demand_factor, drain, provisional_supply_factor,
    supply_factor,
)
from src.incentives.tokens import (
    Account, Cause, Issuance, TokenError, TokenRule, buy_right, exchange_fiat, expire_rights,
    reset_period, settle, tokens_for_factor,
)
from src.ledger.chain import Chain, form_block
from src.ledger.contracts import Contract, ContractRefused, ContractStatus, PendingPool, delivery_for, submit_contract
from src.ledger.execution import ExecutionResult, execute_block
from src.parsers.scenario_parser import ContractRecord, DemandResponseEvent, ScenarioConfig, expand_contracts
from src.simulation.dispatch import Schedule, build_schedule
from src.simulation.report import Report, build_report
from src.utils.logger import get_logger

logger = get_logger(__name__)


class SimulationError(Exception):
    """Raised when the loop is driven outside its horizon"""


@dataclass
class PeriodTotals:
    """Quantities summed over the current accounting period"""
    emissions: Dict[str, float] = field(default_factory=dict)  # tCO2 per actor
    produced_mwh: Dict[str, float] = field(default_factory=dict)  # per generator owner
    dr_mwh: Dict[str, float] = field(default_factory=dict)  # load reduction per actor
    dr_peak_mw: Dict[str, float] = field(default_factory=dict)  # largest single-step reduction
    curtailed_mwh: float = 0.0
    traces: TraceLedger = field(default_factory=TraceLedger)

    def reset(self) -> None:
        self.emissions.clear()
        self.produced_mwh.clear()
        self.dr_mwh.clear()
        self.dr_peak_mw.clear()
        self.curtailed_mwh = 0.0
        self.traces.clear()


@dataclass
class SimState:
    config: ScenarioConfig
    network: Network
    seed: int
    profiles: Dict[str, List[float]]
    accounts: Dict[str, Account]
    carbon: Dict[str, FactorAccumulator]
    congestion: Dict[str, FactorAccumulator]
    chain: Chain
    carbon_rule: TokenRule
    congestion_rule: TokenRule
    supply_params: SupplyFactorParams
    demand_params: DemandFactorParams
    congestion_table: StepTable
    submissions: Dict[int, List[ContractRecord]] = field(default_factory=dict)
    dr_events: Dict[int, List[DemandResponseEvent]] = field(default_factory=dict)
    step: int = 0
    schedule: Optional[Schedule] = None
    pool: PendingPool = field(default_factory=PendingPool)
    contracts: Dict[str, Contract] = field(default_factory=dict)
    period: PeriodTotals = field(default_factory=PeriodTotals)
    audit: List[Issuance] = field(default_factory=list)
    events: List[Dict[str, Any]] = field(default_factory=list)
    timeseries: List[Dict[str, Any]] = field(default_factory=list)
    settlements: List[Dict[str, Any]] = field(default_factory=list)
    congestion_events: List[Dict[str, Any]] = field(default_factory=list)
    fiat: Dict[str, float] = field(default_factory=dict)
    gas_mwh: Dict[str, float] = field(default_factory=dict)
    curtailed_mwh: float = 0.0
    unsold_renewable_mwh: float = 0.0
    refused: List[Tuple[str, int]] = field(default_factory=list)  # (contract id, step the grid refused it)
    unserved_heat_mwh: float = 0.0
    slack_breaches: List[int] = field(default_factory=list)
    finished: bool = False

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def steps_per_period(self) -> int:
        return self.config.schedule.steps_per_period

    @property
    def step_hours(self) -> float:
        return self.config.schedule.step_hours

    def log(self, kind: str, **details: Any) -> None:
        self.events.append({"step": self.step, "kind": kind, **details})


def realize_profiles(config: ScenarioConfig, rng: np.random.Generator) -> Dict[str, List[float]]:
    """Profile values per device for the whole horizon; noise is drawn once, in sorted device order"""
    horizon = config.horizon
    realized: Dict[str, List[float]] = {}
    for device_id in sorted(config.schedule.profiles):
        profile = config.schedule.profiles[device_id]
        if isinstance(profile, list):
            values = np.asarray(profile[:horizon], dtype=float)
        else:
            values = np.asarray(profile.values[:horizon], dtype=float)
            if profile.noise > 0:
                values = values * (1.0 + rng.normal(0.0, profile.noise, size=horizon))
        realized[device_id] = [float(v) for v in values]
    return realized


def init_state(config: ScenarioConfig, seed: Optional[int] = None) -> SimState:
    seed = config.seed if seed is None else seed
    network = build_network(config.topology)
    incentives = config.incentives
    tokens = config.tokens

    congestion_rule = tokens.congestion_rule.model_dump() if tokens.congestion_rule else DEFAULT_CONGESTION_RULE
    state = SimState(
        config=config,
        network=network,
        seed=seed,
        profiles=realize_profiles(config, np.random.default_rng(seed)),
        accounts={
            a.id: Account(actor=a.id, balance=a.initial_balance, balance_cap=a.balance_cap)
            for a in config.actors
        },
        carbon={
            a.id: FactorAccumulator(a.id, incentives.carbon_thresholds.upper, incentives.carbon_thresholds.lower)
            for a in config.actors
        },
        congestion={
            a.id: FactorAccumulator(a.id, incentives.congestion_thresholds.upper,
                                    incentives.congestion_thresholds.lower)
            for a in config.actors
        },
        chain=Chain.with_nodes(config.ledger.node_count),
        carbon_rule=TokenRule(**tokens.carbon_rule.model_dump()),
        congestion_rule=TokenRule(**congestion_rule),
        supply_params=SupplyFactorParams(alpha=incentives.alpha),
        demand_params=DemandFactorParams(
            beta=incentives.beta,
            gamma=incentives.gamma,
            sigma=incentives.sigma,
            dr_credit=StepTable.from_pairs(incentives.dr_credit),
        ),
        congestion_table=StepTable.from_pairs(incentives.congestion_table),
        fiat={a.id: 0.0 for a in config.actors},
    )
    for record in expand_contracts(config.schedule):
        state.submissions.setdefault(record.step, []).append(record)
    for event in config.schedule.dr_events:
        state.dr_events.setdefault(event.step, []).append(event)
    logger.debug(f"Initialized '{config.name}' with seed {seed}, {len(network.devices)} devices, "
                 f"{len(state.chain.nodes)} nodes")
    return state


# stage 3

def _scripted_accounts(state: SimState) -> None:
    s = state.step
    tokens = state.config.tokens
    for event in state.config.schedule.right_purchases:
        if event.step != s:
            continue
        try:
            buy_right(state.accounts[event.actor], event.right, tokens.right_prices[event.right],
                      timestamp=s, audit=state.audit)
            state.log("right_purchase", actor=event.actor, right=event.right.value)
        except TokenError as e:
            state.log("right_refused", actor=event.actor, right=event.right.value, reason=str(e))
    for event in state.config.schedule.exchanges:
        if event.step != s:
            continue
        try:
            _, fiat = exchange_fiat(state.accounts[event.actor], event.tokens, tokens.exchange_rate,
                                    timestamp=s, audit=state.audit)
            state.fiat[event.actor] += fiat
            state.log("exchange", actor=event.actor, tokens=event.tokens, fiat=fiat)
        except TokenError as e:
            state.log("exchange_refused", actor=event.actor, tokens=event.tokens, reason=str(e))


def _submit(state: SimState, record: ContractRecord) -> None:
    c = Contract(
        id=record.id,
        seller=record.seller,
        buyer=record.buyer,
        carrier=record.carrier,
        quantity=record.quantity,
        price=record.price,
        fee=record.fee,
        submitted_at=state.step,
        duration=record.duration,
        submitter=record.submitter,
        seller_device=record.seller_device,
        buyer_device=record.buyer_device,
    )
    state.contracts[c.id] = c
    try:
        submit_contract(c, state.accounts, state.pool, timestamp=state.step, audit=state.audit)
        state.log("submitted", contract=c.id, fee=c.fee)
    except ContractRefused as e:
        c.status = ContractStatus.REJECTED
        c.reason = e.reason
        state.log("refused", contract=c.id, reason=e.reason)
        logger.debug(f"Step {state.step}: {e}")


# stage 4

def _record_execution(state: SimState, result: ExecutionResult) -> None:
    for contract_id in result.executed:
        state.log("executed", contract=contract_id)
    for contract_id, reason in result.cancelled:
        state.log("cancelled", contract=contract_id, reason=reason)
    state.refused.extend((contract_id, state.step) for contract_id in result.blocked)


def _run_blocks(state: SimState, schedule: Schedule) -> Schedule:
    while True:
        block = form_block(state.pool, state.config.ledger.block_threshold, state.chain, state.step)
        if block is None:
            return schedule
        state.log("block", height=block.height, digest=block.digest.hex(),
                  contracts=[c.id for c in block.contracts])
        result = execute_block(block, state.network, schedule, state.accounts, state.chain,
                               state.step, audit=state.audit)
        _record_execution(state, result)
        schedule = result.schedule


# stage 6

def _demand_response(state: SimState, schedule: Schedule) -> Tuple[Schedule, Dict[str, float], Dict[str, float]]:
    """Apply this step's scripted reductions; returns (schedule, shed MW per actor, shed load MW per actor)"""
    relieved: Dict[str, float] = {}
    load_shed: Dict[str, float] = {}
    for event in state.dr_events.get(state.step, []):
        schedule, shed = schedule.with_reduction(event.device, event.reduction)
        if shed <= 0:
            continue
        device = state.network.devices[event.device]
        relieved[device.owner] = relieved.get(device.owner, 0.0) + shed
        if device.kind == DeviceKind.LOAD:
            load_shed[device.owner] = load_shed.get(device.owner, 0.0) + shed
        state.log("demand_response", device=event.device, shed=shed)
    return schedule, relieved, load_shed


# stage 7

def _trace(state: SimState, schedule: Schedule, flow: FlowSolution) -> Tuple[TraceResult, TraceResult]:
    outputs = schedule.electric_outputs()
    consumption = schedule.electric_consumption()
    slack_id = state.network.slack_device.id
    if outputs[slack_id] < 0:
        # slack absorbing a surplus acts as a sink
        consumption[slack_id] = -outputs[slack_id]
        outputs[slack_id] = 0.0
    electric = trace_sources(state.network, flow, outputs, consumption)
    heat = attribute_heat(state.network, schedule.heat_outputs(), schedule.heat_loads, state.step)
    state.period.traces.append(stamp_flows(electric, state.step))
    state.period.traces.append(stamp_flows(heat, state.step))
    return electric, heat


# stage 8

def _accumulate(state: SimState, schedule: Schedule, congested: bool, relieved: Dict[str, float],
                load_shed: Dict[str, float], heat: TraceResult) -> List[Tuple[str, float]]:
    """Update period totals and congestion accumulators; returns triggered (actor, factor) pairs"""
    h = state.step_hours
    network = state.network
    period = state.period

    outputs = schedule.electric_outputs()
    heat_outputs = schedule.heat_outputs()
    for device_id, tonnes in schedule.emissions(h).items():
        owner = network.devices[device_id].owner
        period.emissions[owner] = period.emissions.get(owner, 0.0) + tonnes
        produced = max(0.0, outputs.get(device_id, 0.0)) + heat_outputs.get(device_id, 0.0)
        period.produced_mwh[owner] = period.produced_mwh.get(owner, 0.0) + produced * h
    for actor, mw in load_shed.items():
        period.dr_mwh[actor] = period.dr_mwh.get(actor, 0.0) + mw * h
        period.dr_peak_mw[actor] = max(period.dr_peak_mw.get(actor, 0.0), mw)

    curtailed = sum(schedule.curtailed().values()) * h
    period.curtailed_mwh += curtailed
    state.curtailed_mwh += curtailed
    state.unsold_renewable_mwh += sum(schedule.unsold().values()) * h
    for device_id, mw in schedule.gas_use().items():
        state.gas_mwh[device_id] = state.gas_mwh.get(device_id, 0.0) + mw * h
    state.unserved_heat_mwh += (sum(schedule.heat_loads.values()) - sum(heat.load_mw.values())) * h

    for c in state.contracts.values():
        if c.active_at(state.step):
            amount = c.quantity * c.price * h
            state.fiat[c.buyer] -= amount
            state.fiat[c.seller] += amount

    triggered = []
    factors = {}
    for actor in sorted(relieved):
        value = congestion_factor(relieved[actor], congested, state.congestion_table)
        if value == 0:
            continue
        factors[actor] = value
        acc, trigger = accumulate_and_check(state.congestion[actor], value)
        if trigger != Trigger.NONE:
            triggered.append((actor, acc.history[-1]))
    if congested:
        state.congestion_events[-1]["factors"] = factors
    return triggered


# stage 9 and period end

def _settle_factor(state: SimState, actor: str, value: float, rule: TokenRule,
                   reward: Cause, levy: Optional[Cause] = None) -> int:
    n = tokens_for_factor(value, rule)
    if n == 0:
        return 0
    cause = reward if n > 0 or levy is None else levy
    _, issuance = settle(state.accounts[actor], n, cause, rule, timestamp=state.step, audit=state.audit)
    state.log("settlement", actor=actor, cause=cause.value, factor=value, tokens=issuance.amount)
    return issuance.amount


def _carbon_factor(state: SimState, actor: str, provisional: bool = False) -> Optional[float]:
    """Supply plus demand carbon factor of an actor over the period so far

    Only actors whose generators produced, or whose loads consumed or responded,
    get a factor.
    """
    period = state.period
    devices = state.network.devices_of(actor)
    record = next(a for a in state.config.actors if a.id == actor)
    factor = None

    if record.s_permit is not None and period.produced_mwh.get(actor, 0.0) > 0:
        s_actual = period.emissions.get(actor, 0.0)
        if provisional:
            factor = provisional_supply_factor(record.s_permit, s_actual, state.supply_params)
        else:
            factor = supply_factor(EmissionRecord(actor, record.s_permit, s_actual), state.supply_params)

    loads = [d for d in devices if d.kind == DeviceKind.LOAD]
    sums = {Carrier.ELECTRICITY: [0.0, 0.0], Carrier.HEAT: [0.0, 0.0]}
    for device in loads:
        clean, total = period_clean_energy(period.traces.of_carrier(device.carrier), device.id, state.step_hours)
        sums[device.carrier][0] += clean
        sums[device.carrier][1] += total
    # response credit is keyed by power, not energy
    dr = period.dr_peak_mw.get(actor, 0.0)
    consumed = sums[Carrier.ELECTRICITY][1] + sums[Carrier.HEAT][1]
    if loads and (consumed > 0 or dr > 0):
        clean_e, total_e = sums[Carrier.ELECTRICITY]
        clean_h, total_h = sums[Carrier.HEAT]
        demand = demand_factor(min(clean_e, total_e), total_e, min(clean_h, total_h), total_h,
                               dr, state.demand_params)
        factor = demand if factor is None else factor + demand
    return factor


def _settle_period(state: SimState) -> None:
    period_index = state.step // state.steps_per_period
    rate = state.config.tokens.exchange_rate

    for record in state.config.actors:
        actor = record.id
        factor = _carbon_factor(state, actor)
        tokens = 0
        if factor is not None:
            acc, trigger = accumulate_and_check(state.carbon[actor], factor)
            value = acc.history[-1] if trigger != Trigger.NONE else drain(acc)
            if value is not None:
                tokens = _settle_factor(state, actor, value, state.carbon_rule,
                                        Cause.CARBON_REWARD, Cause.CARBON_LEVY)
        residual = drain(state.congestion[actor])
        congestion_tokens = 0
        if residual is not None:
            congestion_tokens = _settle_factor(state, actor, residual, state.congestion_rule,
                                               Cause.CONGESTION_REWARD)
        state.settlements.append({
            "period": period_index,
            "actor": actor,
            "f_carbon": factor,
            "s_permit": record.s_permit,
            "s_actual": state.period.emissions.get(actor, 0.0),
            "carbon_tokens": tokens,
            "levy_fiat_equivalent": -tokens * rate if tokens < 0 else 0.0,
            "congestion_residual": residual,
            "congestion_tokens": congestion_tokens,
            "clean_fraction": _period_clean_fraction(state, actor),
            "dr_mwh": state.period.dr_mwh.get(actor, 0.0),
            "dr_peak_mw": state.period.dr_peak_mw.get(actor, 0.0),
        })

    for account in state.accounts.values():
        reset_period(account)
        expire_rights(account)
    if state.period.curtailed_mwh > 0:
        logger.warning(f"Period {period_index}: {state.period.curtailed_mwh:.3f} MWh renewable output curtailed")
    logger.info(f"Period {period_index} settled at step {state.step}")
    state.log("period_end", period=period_index)
    state.period.reset()


def _period_clean_fraction(state: SimState, actor: str) -> float:
    clean = total = 0.0
    for device in state.network.devices_of(actor):
        if device.kind == DeviceKind.LOAD and device.carrier == Carrier.ELECTRICITY:
            c, t = period_clean_energy(state.period.traces.of_carrier(Carrier.ELECTRICITY), device.id,
                                       state.step_hours)
            clean += c
            total += t
    return min(1.0, clean / total) if total > 0 else 0.0


def _step_clean_fraction(state: SimState, actor: str, trace: TraceResult) -> float:
    clean = total = 0.0
    for device in state.network.devices_of(actor):
        if device.kind == DeviceKind.LOAD and device.carrier == Carrier.ELECTRICITY:
            mw = trace.load_mw.get(device.id, 0.0)
            if mw > 0:
                clean += clean_fraction(trace, device.id, Carrier.ELECTRICITY) * mw
                total += mw
    return min(1.0, clean / total) if total > 0 else 0.0


def _provisional_factors(state: SimState) -> Dict[str, float]:
    factors = {}
    for record in state.config.actors:
        factor = _carbon_factor(state, record.id, provisional=True)
        factors[record.id] = 0.0 if factor is None else factor
    return factors


def _record_row(state: SimState, trace: TraceResult, factors: Dict[str, float]) -> None:
    """Balances after settlement, carbon factors for the period up to this step"""
    period_index = state.step // state.steps_per_period
    for record in state.config.actors:
        actor = record.id
        state.timeseries.append({
            "step": state.step,
            "period": period_index,
            "actor": actor,
            "balance": state.accounts[actor].balance,
            "f_carbon": factors[actor],
            "f_congestion": state.congestion[actor].cumulative,
            "clean_fraction": _step_clean_fraction(state, actor, trace),
        })


def step(state: SimState) -> SimState:
    """Advance the simulation by one step"""
    if state.finished or state.step >= state.horizon:
        raise SimulationError(f"step {state.step} is outside the horizon of {state.horizon} steps")
    s = state.step
    network = state.network

    # (1) profiles, (2) heat-led CHP with contracts still delivering
    values = {device_id: series[s] for device_id, series in state.profiles.items()}
    ongoing = [delivery_for(c, network) for c in state.contracts.values() if c.active_at(s)]
    refused = [delivery_for(state.contracts[cid], network) for cid, start in state.refused
               if start < s < start + state.contracts[cid].duration]
    schedule = build_schedule(network, s, values, [d for d in ongoing if d is not None],
                              [d for d in refused if d is not None])

    # (3)
    _scripted_accounts(state)
    for record in state.submissions.get(s, []):
        _submit(state, record)

    # (4)
    schedule = _run_blocks(state, schedule)

    # (5) solver failures propagate to the caller
    flow = solve_dc_flow(network, schedule.injections())

    # (6)
    report = detect_congestion(flow, network)
    loading = line_loading(flow, network)
    schedule, relieved, load_shed = _demand_response(state, schedule)
    if relieved:
        flow = solve_dc_flow(network, schedule.injections())
    if report.congested:
        state.congestion_events.append({
            "step": s,
            "lines": report.line_ids,
            "overload": {e.line_id: e.overload for e in report.entries},
            "loading": {line_id: loading[line_id] for line_id in report.line_ids},
            "relieved": {a: relieved[a] for a in sorted(relieved)},
        })
        state.log("congestion", lines=report.line_ids)
    if not schedule.slack_within_limits():
        state.slack_breaches.append(s)
        logger.warning(f"Step {s}: slack output {schedule.slack_output():.3f} MW outside its limits")

    # (7)
    electric, heat = _trace(state, schedule, flow)

    # (8)
    triggered = _accumulate(state, schedule, report.congested, relieved, load_shed, heat)

    # (9)
    for actor, value in triggered:
        _settle_factor(state, actor, value, state.congestion_rule, Cause.CONGESTION_REWARD)

    factors = _provisional_factors(state)
    if (s + 1) % state.steps_per_period == 0:
        _settle_period(state)
    _record_row(state, electric, factors)

    state.schedule = schedule
    state.step += 1
    return state


def finish(state: SimState) -> SimState:
    """Flush the pending pool into final undersized blocks; their contracts expire with a refund"""
    if state.finished:
        return state
    threshold = state.config.ledger.block_threshold
    while len(state.pool) > 0:
        block = form_block(state.pool, threshold, state.chain, state.step, flush=True)
        state.log("block", height=block.height, digest=block.digest.hex(),
                  contracts=[c.id for c in block.contracts])
        result = execute_block(block, state.network, state.schedule, state.accounts, state.chain,
                               state.step, audit=state.audit, expire=True)
        _record_execution(state, result)
    state.finished = True
    return state


def simulate(config: ScenarioConfig, seed: Optional[int] = None) -> SimState:
    state = init_state(config, seed)
    logger.info(f"Running '{config.name}': {config.schedule.periods} period(s) x "
                f"{config.schedule.steps_per_period} step(s), seed {state.seed}")
    while state.step < state.horizon:
        step(state)
    finish(state)
    logger.info(f"Run finished: chain height {state.chain.height}, "
                f"{len(state.congestion_events)} congestion event(s)")
    return state


def run(config: ScenarioConfig, seed: Optional[int] = None) -> Report:
    """Simulate the whole horizon and build the report"""
    return build_report(simulate(config, seed))
