"""
Shared fixtures: small topologies, a minimal scenario and random networks
"""
import copy
from pathlib import Path

import numpy as np
import pytest

from src.grid.network import build_network

DEMO_SCENARIO = Path(__file__).resolve().parent.parent / "data" / "demo_scenario.json"


def bus(bus_id, *carriers):
    return {"id": bus_id, "carriers": list(carriers) or ["electricity"]}


def line(line_id, a, b, capacity=10.0, susceptance=10.0):
    return {"id": line_id, "from": a, "to": b, "capacity": capacity, "susceptance": susceptance}


def device(device_id, bus_id, kind, owner, **extra):
    return {"id": device_id, "bus": bus_id, "kind": kind, "owner": owner, **extra}


def two_bus(capacity=10.0):
    """G1 (slack) at A, load L1 at B, one line A-B"""
    return {
        "slack_bus": "A",
        "buses": [bus("A"), bus("B")],
        "lines": [line("AB", "A", "B", capacity=capacity)],
        "devices": [
            device("G1", "A", "thermal_gen", "gen", emission_rate=0.8, limits={"electricity": [0, 100]}),
            device("L1", "B", "load", "consumer"),
        ],
    }


def minimal_scenario(steps=1, periods=1, **profiles):
    """Valid scenario document on the two-bus topology with all-zero profiles by default"""
    horizon = steps * periods
    return {
        "name": "minimal",
        "seed": 1,
        "topology": two_bus(),
        "actors": [
            {"id": "gen", "initial_balance": 10, "balance_cap": 100, "s_permit": 100.0},
            {"id": "consumer", "initial_balance": 10, "balance_cap": 100},
        ],
        "incentives": {
            "alpha": 1.0,
            "beta": 0.5,
            "gamma": 0.3,
            "sigma": 0.2,
            "dr_credit": [[0, 0.0], [1, 0.5]],
            "congestion_table": [[0, 0.0], [1, 0.1], [5, 0.3]],
            "carbon_thresholds": {"upper": 1.0, "lower": -1.0},
            "congestion_thresholds": {"upper": 1.0, "lower": -1.0},
        },
        "tokens": {
            "carbon_rule": {"theta": 10.0, "xi": 10.0, "f1": 0.1, "f2": 1.5, "n_max": 50},
            "exchange_rate": 2.5,
            "right_prices": {"priority_generation": 4, "priority_purchase": 4, "corridor_use": 2},
        },
        "ledger": {"block_threshold": 3, "node_count": 3},
        "schedule": {
            "steps_per_period": steps,
            "periods": periods,
            "profiles": {"L1": profiles.get("L1", [0.0] * horizon)},
        },
    }


@pytest.fixture
def scenario_document():
    return copy.deepcopy(minimal_scenario())


@pytest.fixture
def demo_path():
    return DEMO_SCENARIO


def random_topology(rng, n_buses, meshed):
    """Connected electric topology: random spanning tree plus optional chords"""
    names = [f"N{i}" for i in range(n_buses)]
    lines = []
    for i in range(1, n_buses):
        parent = int(rng.integers(0, i))
        lines.append(line(f"T{i}", names[parent], names[i], capacity=1e6,
                          susceptance=float(rng.uniform(1.0, 20.0))))
    if meshed:
        existing = {frozenset((l["from"], l["to"])) for l in lines}
        for k in range(int(rng.integers(1, n_buses))):
            a, b = rng.choice(n_buses, size=2, replace=False)
            pair = frozenset((names[a], names[b]))
            if pair in existing:
                continue
            existing.add(pair)
            lines.append(line(f"M{k}", names[a], names[b], capacity=1e6,
                              susceptance=float(rng.uniform(1.0, 20.0))))
    devices = [device("G0", names[0], "thermal_gen", "o0", emission_rate=0.5)]
    for i, name in enumerate(names[1:], start=1):
        if rng.random() < 0.5:
            devices.append(device(f"G{i}", name, "renewable_gen", f"o{i}"))
        devices.append(device(f"L{i}", name, "load", f"c{i}"))
    return {"slack_bus": names[0], "buses": [bus(n) for n in names], "lines": lines, "devices": devices}


@pytest.fixture
def random_networks():
    """100 random networks of 2 to 10 buses, half radial and half meshed"""
    rng = np.random.default_rng(2024)
    networks = []
    for k in range(100):
        n = int(rng.integers(2, 11))
        networks.append((build_network(random_topology(rng, n, meshed=bool(k % 2))), rng))
    return networks
