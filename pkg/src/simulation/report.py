"""
Run report: built from the final simulation state, written as report.json,
timeseries.csv and chain.log
"""
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Union

import pandas as pd

from config.settings import (
    CHAIN_FILE, REPORT_FILE, SUMMARY_FORMAT, TIMESERIES_FILE, TIMESERIES_HEADER,
)
from src.incentives.tokens import Cause
from src.ledger.chain import Block, write_chain_log
from src.utils.logger import get_logger

if TYPE_CHECKING:
    from src.simulation.runner import SimState

logger = get_logger(__name__)


@dataclass
class Report:
    scenario: Dict[str, Any]
    totals: Dict[str, Any]
    actors: Dict[str, Dict[str, Any]]
    settlements: List[Dict[str, Any]]
    congestion_events: List[Dict[str, Any]]
    energy: Dict[str, Any]
    chain: Dict[str, Any]
    contracts: List[Dict[str, Any]]
    audit: List[Dict[str, Any]]
    events: List[Dict[str, Any]]
    timeseries: List[Dict[str, Any]]
    blocks: List[Block] = field(default_factory=list, repr=False, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "blocks"}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Report":
        return cls(**{f.name: data[f.name] for f in fields(cls) if f.name != "blocks"})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, allow_nan=False) + "\n"

    def timeseries_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.timeseries, columns=TIMESERIES_HEADER)

    def summary_line(self) -> str:
        return SUMMARY_FORMAT.format(
            issued=self.totals["tokens_issued"],
            levied=self.totals["tokens_levied"],
            congestion=len(self.congestion_events),
            curtailed=self.energy["curtailed_mwh"],
            blocks=self.chain["height"],
            head=self.chain["head"],
        )


def _audit_total(audit: List[Dict[str, Any]], *causes: Cause) -> int:
    wanted = {c.value for c in causes}
    return sum(entry["amount"] for entry in audit if entry["cause"] in wanted)


def build_report(state: "SimState") -> Report:
    """Everything here is derived from the state, so equal states give equal reports"""
    config = state.config
    audit = [
        {"actor": i.actor, "amount": i.amount, "cause": i.cause.value, "timestamp": i.timestamp, "note": i.note}
        for i in state.audit
    ]

    actors: Dict[str, Dict[str, Any]] = {}
    for record in config.actors:
        account = state.accounts[record.id]
        own = [e for e in audit if e["actor"] == record.id]
        actors[record.id] = {
            "role": record.role,
            "initial_balance": account.initial_balance,
            "final_balance": account.balance,
            "balance_cap": account.balance_cap,
            "restricted": account.restricted,
            "issued": _audit_total(own, Cause.CARBON_REWARD, Cause.CONGESTION_REWARD),
            "levied": -_audit_total(own, Cause.CARBON_LEVY),
            "fiat": state.fiat[record.id],
            "trajectory": [row["balance"] for row in state.timeseries if row["actor"] == record.id],
        }

    statuses: Dict[str, int] = {}
    for c in state.contracts.values():
        statuses[c.status.value] = statuses.get(c.status.value, 0) + 1

    levied = -_audit_total(audit, Cause.CARBON_LEVY)
    chain = state.chain
    return Report(
        scenario={
            "name": config.name,
            "seed": state.seed,
            "periods": config.schedule.periods,
            "steps_per_period": config.schedule.steps_per_period,
            "step_hours": config.schedule.step_hours,
            "horizon": config.horizon,
            "economy": config.economy,
        },
        totals={
            "tokens_issued": _audit_total(audit, Cause.CARBON_REWARD, Cause.CONGESTION_REWARD),
            "tokens_levied": levied,
            "levy_fiat_equivalent": levied * config.tokens.exchange_rate,
            "tokens_exchanged": -_audit_total(audit, Cause.FIAT_EXCHANGE),
            "rights_purchased": -_audit_total(audit, Cause.RIGHT_PURCHASE),
            "fees_collected": chain.collected_fees,
            "contracts": statuses,
        },
        actors=actors,
        settlements=list(state.settlements),
        congestion_events=list(state.congestion_events),
        energy={
            "curtailed_mwh": state.curtailed_mwh,
            "unsold_renewable_mwh": state.unsold_renewable_mwh,
            "gas_mwh": {d: state.gas_mwh[d] for d in sorted(state.gas_mwh)},
            "unserved_heat_mwh": state.unserved_heat_mwh,
            "slack_limit_breaches": list(state.slack_breaches),
        },
        chain={
            "height": chain.height,
            "head": chain.head.digest.hex(),
            "ordering_node": chain.ordering_node,
            "node_roles": chain.node_roles(),
            "nodes_consistent": chain.nodes_consistent(),
        },
        contracts=[
            {
                "id": c.id,
                "seller": c.seller,
                "buyer": c.buyer,
                "carrier": c.carrier.value,
                "quantity": c.quantity,
                "status": c.status.value,
                "submitted_at": c.submitted_at,
                "executed_at": c.executed_at,
                "reason": c.reason,
            }
            for c in state.contracts.values()
        ],
        audit=audit,
        events=list(state.events),
        timeseries=list(state.timeseries),
        blocks=list(chain.blocks),
    )


def write_timeseries_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, columns=TIMESERIES_HEADER, lineterminator="\n")


def write_outputs(report: Report, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write report.json, timeseries.csv and chain.log into out_dir"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / REPORT_FILE,
        "timeseries": out / TIMESERIES_FILE,
        "chain": out / CHAIN_FILE,
    }
    paths["report"].write_text(report.to_json(), encoding="utf-8")
    write_timeseries_csv(report.timeseries_frame(), paths["timeseries"])
    write_chain_log(report.blocks, paths["chain"])
    logger.info(f"Wrote {', '.join(str(p) for p in paths.values())}")
    return paths


def load_report(path: Union[str, Path]) -> Report:
    with open(path, "r", encoding="utf-8") as f:
        return Report.from_dict(json.load(f))
