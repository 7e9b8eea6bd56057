"""
Tests for the simulation loop and the run report
"""
import json
import math

import pytest

from src.grid.power_flow import solve_dc_flow
from src.incentives.tokens import Cause, TokenRule, tokens_for_factor
from src.parsers.scenario_parser import ScenarioParser, load_scenario
from src.simulation.report import Report
from src.simulation.runner import SimulationError, init_state, run, simulate, step
from tests.conftest import DEMO_SCENARIO, bus, device, line, minimal_scenario


@pytest.fixture(scope="module")
def demo_config():
    return ScenarioParser(DEMO_SCENARIO).parse()


@pytest.fixture(scope="module")
def demo_report(demo_config):
    return run(demo_config)


def trading_scenario(load=5.0):
    document = minimal_scenario(steps=2, periods=1, L1=[load, load])
    document["schedule"]["contracts"] = [
        {"id": f"k{i}", "seller": "gen", "buyer": "consumer", "quantity": 1.0, "price": 30.0, "fee": i, "step": 0}
        for i in range(3)
    ]
    return load_scenario(document)


class TestStep:
    """Test cases for a single simulation step"""

    def test_zero_load_step(self):
        """All-zero profiles give no flows, no factors and no blocks"""
        state = init_state(load_scenario(minimal_scenario()))
        step(state)

        assert state.step == 1
        assert state.chain.height == 0
        assert state.congestion_events == []
        assert all(row["f_carbon"] == 0.0 for row in state.timeseries)
        assert all(s["f_carbon"] is None and s["carbon_tokens"] == 0 for s in state.settlements)
        flow = solve_dc_flow(state.network, state.schedule.injections())
        assert all(f == 0.0 for f in flow.flows.values())

    def test_three_submissions_one_block(self):
        """Three submissions with a block threshold of 3 form exactly one block"""
        state = init_state(trading_scenario())
        step(state)

        assert state.chain.height == 1
        assert len(state.chain.head.contracts) == 3
        assert [c.fee for c in state.chain.head.contracts] == [2, 1, 0]
        assert all(c.status.value == "executed" for c in state.contracts.values())
        assert len(state.pool) == 0

    def test_outside_horizon(self):
        state = init_state(load_scenario(minimal_scenario()))
        step(state)
        with pytest.raises(SimulationError):
            step(state)

    def test_demand_response_congestion_factor(self, demo_config):
        """A responding load on a congested line accumulates the table value 0.5, then settles 8 tokens"""
        state = init_state(demo_config)
        while state.step <= 10:
            step(state)

        event = state.congestion_events[0]
        assert event["step"] == 10
        assert event["lines"] == ["l45"]
        assert event["loading"]["l45"] > 1.0
        assert event["factors"] == {"campus": 0.5}
        assert state.congestion["campus"].cumulative == pytest.approx(0.5)

        step(state)
        rewards = [i for i in state.audit if i.cause == Cause.CONGESTION_REWARD and i.actor == "campus"]
        assert state.congestion["campus"].cumulative == 0.0
        assert [(i.amount, i.timestamp) for i in rewards] == [(8, 11)]


class TestRun:
    """Test cases for full runs"""

    def test_empty_activity(self):
        """One step of zero profiles: nothing issued, genesis-only chain"""
        report = run(load_scenario(minimal_scenario()))

        assert report.chain["height"] == 0
        assert report.totals["tokens_issued"] == 0
        assert report.totals["tokens_levied"] == 0
        assert report.congestion_events == []
        assert report.totals["contracts"] == {}
        assert [a["final_balance"] for a in report.actors.values()] == [10, 10]

    def test_deterministic(self, demo_config):
        first = run(demo_config, seed=7)
        second = run(demo_config, seed=7)

        assert first.to_json() == second.to_json()
        assert [b.digest for b in first.blocks] == [b.digest for b in second.blocks]

    def test_seed_changes_noise(self, demo_config):
        assert run(demo_config, seed=1).timeseries != run(demo_config, seed=2).timeseries

    def test_clean_generator_gets_alpha(self, demo_config, demo_report):
        """Wind output with zero emissions: F = alpha, tokens = tokens_for_factor(alpha) every period"""
        alpha = demo_config.incentives.alpha
        rule = TokenRule(**demo_config.tokens.carbon_rule.model_dump())
        expected = tokens_for_factor(alpha, rule)
        rows = [s for s in demo_report.settlements if s["actor"] == "windfarm"]

        assert expected == math.floor(rule.xi * math.expm1(alpha)) == 17
        assert [s["f_carbon"] for s in rows] == [alpha] * demo_config.schedule.periods
        assert [s["carbon_tokens"] for s in rows] == [expected] * demo_config.schedule.periods

    @pytest.mark.parametrize("step_hours", [0.25, 1.0, 4.0])
    def test_response_credit_uses_power(self, step_hours):
        """A 2 MW response earns sigma x f(2) = 0.2 x 0.5 whatever the step length"""
        document = minimal_scenario(steps=2, periods=1, L1=[5.0, 5.0])
        document["schedule"]["step_hours"] = step_hours
        document["schedule"]["dr_events"] = [
            {"device": "L1", "step": 0, "reduction": 2.0},
            {"device": "L1", "step": 1, "reduction": 2.0},
        ]
        report = run(load_scenario(document))

        row = next(s for s in report.settlements if s["actor"] == "consumer")
        assert row["f_carbon"] == pytest.approx(0.1)
        assert row["dr_peak_mw"] == pytest.approx(2.0)
        assert row["dr_mwh"] == pytest.approx(4.0 * step_hours)

    def test_grid_refused_wind_is_curtailed(self):
        """A 3 MW two-step wind sale refused by a 2 MW line curtails 6 MWh; unsold wind is 20 MWh"""
        document = minimal_scenario(steps=2, periods=1)
        document["topology"] = {
            "slack_bus": "A",
            "buses": [bus("A"), bus("B")],
            "lines": [line("AB", "A", "B", capacity=2.0)],
            "devices": [
                device("G1", "A", "thermal_gen", "gen", emission_rate=0.8, limits={"electricity": [0, 100]}),
                device("L1", "A", "load", "consumer"),
                device("W", "B", "renewable_gen", "wind"),
            ],
        }
        document["actors"].append({"id": "wind", "balance_cap": 100, "s_permit": 1.0})
        document["ledger"]["block_threshold"] = 1
        document["schedule"]["profiles"] = {"L1": [5.0, 5.0], "W": [10.0, 10.0]}
        document["schedule"]["contracts"] = [
            {"id": "w", "seller": "wind", "buyer": "consumer", "quantity": 3.0, "price": 30.0,
             "step": 0, "duration": 2},
        ]
        report = run(load_scenario(document))

        contract = next(c for c in report.contracts if c["id"] == "w")
        assert contract["status"] == "cancelled"
        assert "congestion" in contract["reason"]
        assert report.energy["curtailed_mwh"] == pytest.approx(6.0)
        assert report.energy["unsold_renewable_mwh"] == pytest.approx(20.0)
        assert "curtailed_mwh=6.000000" in report.summary_line()

    def test_generation_matches_load_every_step(self, demo_config):
        """Electric output equals consumption and bus injections sum to zero at every step"""
        state = init_state(demo_config)
        while state.step < state.horizon:
            step(state)
            schedule = state.schedule
            produced = sum(schedule.electric_outputs().values())
            consumed = sum(schedule.electric_consumption().values())
            assert produced == pytest.approx(consumed, abs=1e-9)
            assert sum(schedule.injections().values.values()) == pytest.approx(0.0, abs=1e-9)

    def test_emitter_levied(self, demo_report):
        gridco = demo_report.actors["gridco"]
        assert gridco["levied"] > 0
        assert gridco["final_balance"] < gridco["initial_balance"]

    def test_restricted_trader_refused(self, demo_report):
        contract = next(c for c in demo_report.contracts if c["id"] == "trader-buy")
        assert contract["status"] == "rejected"
        assert "restricted" in contract["reason"]

    def test_balances_follow_audit(self, demo_report):
        """Final balance = initial balance + every audited change"""
        for actor, info in demo_report.actors.items():
            changes = sum(e["amount"] for e in demo_report.audit if e["actor"] == actor)
            assert info["final_balance"] == info["initial_balance"] + changes
            assert info["final_balance"] <= info["balance_cap"]

    def test_fees_collected_match_audit(self, demo_report):
        paid = -sum(e["amount"] for e in demo_report.audit if e["cause"] == Cause.FEE_PAYMENT.value)
        refunded = sum(e["amount"] for e in demo_report.audit if e["cause"] == Cause.FEE_REFUND.value)
        assert demo_report.totals["fees_collected"] == paid - refunded

    def test_no_contract_left_pending(self, demo_report):
        assert not {"pending", "packed"} & set(demo_report.totals["contracts"])

    def test_energy_sanity(self, demo_config, demo_report):
        energy = demo_report.energy
        assert energy["unsold_renewable_mwh"] >= energy["curtailed_mwh"] >= 0.0
        assert energy["gas_mwh"]["chp-1"] > 0.0
        assert energy["unserved_heat_mwh"] == pytest.approx(0.0, abs=1e-9)
        assert demo_report.chain["nodes_consistent"]
        assert demo_report.chain["ordering_node"] == "node-0"
        assert len(demo_report.timeseries) == demo_config.horizon * len(demo_config.actors)

    def test_timeseries_factor_matches_settlement(self, demo_config, demo_report):
        """At a period's last step the provisional carbon factor equals the settled one"""
        last = demo_config.schedule.steps_per_period - 1
        row = next(r for r in demo_report.timeseries if r["step"] == last and r["actor"] == "windfarm")
        settled = next(s for s in demo_report.settlements if s["period"] == 0 and s["actor"] == "windfarm")
        assert row["f_carbon"] == pytest.approx(settled["f_carbon"])

    def test_simulate_finishes_state(self, demo_config):
        state = simulate(demo_config)
        assert state.finished
        assert len(state.pool) == 0
        assert all(a.escrowed == 0 for a in state.accounts.values())

    def test_json_round_trip(self, demo_report):
        assert Report.from_dict(json.loads(demo_report.to_json())) == demo_report
