"""
Tests for contract submission, validation, block formation, execution and chain verification
"""
import json
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.grid.network import Carrier, build_network
from src.incentives.tokens import Account, Right
from src.ledger.chain import Chain, form_block, read_chain_log, verify_chain, write_chain_log
from src.ledger.contracts import (
    Contract, ContractRefused, ContractStatus, PendingPool, order_pending, priority_key, submit_contract,
    validate_contract,
)
from src.ledger.execution import execute_block
from src.simulation.dispatch import build_schedule
from tests.conftest import bus, device, line


def trade_network(capacity=1.0):
    """Slack G at A with loads L (buyer) and V (vip); wind W (seller) at B"""
    return build_network({
        "slack_bus": "A",
        "buses": [bus("A"), bus("B")],
        "lines": [line("AB", "A", "B", capacity=capacity)],
        "devices": [
            device("G", "A", "thermal_gen", "grid", emission_rate=0.8, limits={"electricity": [0, 100]}),
            device("L", "A", "load", "buyer"),
            device("V", "A", "load", "vip"),
            device("W", "B", "renewable_gen", "seller"),
        ],
    })


def base_schedule(network):
    return build_schedule(network, 0, {"L": 5.0, "V": 1.0, "W": 10.0})


def accounts(**balances):
    actors = {"grid": 10, "buyer": 10, "vip": 10, "seller": 10}
    actors.update(balances)
    return {a: Account(a, balance=b, balance_cap=100) for a, b in actors.items()}


def contract(cid, quantity=1.0, fee=0, step=0, buyer="buyer", **extra):
    return Contract(id=cid, seller="seller", buyer=buyer, carrier=Carrier.ELECTRICITY,
                    quantity=quantity, price=40.0, fee=fee, submitted_at=step, **extra)


def chain_of(length, threshold=1):
    """Chain with `length` blocks after genesis, one fee-bearing contract each"""
    chain = Chain.with_nodes(3)
    pool = PendingPool()
    for height in range(1, length + 1):
        pool.add(contract(f"c{height}", fee=height % 7, step=height))
        form_block(pool, threshold, chain, timestamp=height)
    return chain


class TestSubmitContract:
    """Test cases for submit_contract"""

    def test_valid_contract_pending(self):
        pool = PendingPool()
        status = submit_contract(contract("c1"), accounts(), pool)
        assert status == ContractStatus.PENDING
        assert "c1" in pool

    def test_restricted_buyer_refused(self):
        with pytest.raises(ContractRefused) as exc:
            submit_contract(contract("c1"), accounts(buyer=-2), PendingPool())
        assert "restricted" in exc.value.reason

    def test_fee_above_balance_refused(self):
        pool = PendingPool()
        with pytest.raises(ContractRefused):
            submit_contract(contract("c1", fee=5), accounts(seller=3), pool)
        assert len(pool) == 0

    def test_fee_escrowed_from_submitter(self):
        book = accounts()
        submit_contract(contract("c1", fee=4, submitter="buyer"), book, PendingPool())
        assert (book["buyer"].balance, book["buyer"].escrowed) == (6, 4)
        assert book["seller"].balance == 10

    def test_unknown_actor(self):
        with pytest.raises(ContractRefused):
            submit_contract(contract("c1", buyer="ghost"), accounts(), PendingPool())

    def test_invalid_contract(self):
        with pytest.raises(ValueError):
            contract("c1", quantity=0.0)


class TestValidateContract:
    """Test cases for validate_contract"""

    def test_within_headroom(self):
        network = trade_network(capacity=10.0)
        assert validate_contract(contract("c1"), network, base_schedule(network)).accepted

    def test_line_overload(self):
        """5 MW from B over a 1 MW line is rejected for congestion"""
        network = trade_network(capacity=1.0)
        verdict = validate_contract(contract("c1", quantity=5.0), network, base_schedule(network))
        assert not verdict.accepted
        assert "congestion" in verdict.reason

    def test_exactly_at_capacity(self):
        network = trade_network(capacity=1.0)
        assert validate_contract(contract("c1", quantity=1.0), network, base_schedule(network)).accepted

    def test_device_limit(self):
        network = trade_network(capacity=100.0)
        verdict = validate_contract(contract("c1", quantity=12.0), network, base_schedule(network))
        assert not verdict.accepted
        assert "device limit" in verdict.reason

    def test_gas_not_traded(self):
        network = trade_network()
        gas = replace(contract("c1"), carrier=Carrier.GAS)
        assert not validate_contract(gas, network, base_schedule(network)).accepted

    def test_foreign_device(self):
        network = trade_network()
        verdict = validate_contract(contract("c1", seller_device="G"), network, base_schedule(network))
        assert not verdict.accepted


class TestOrderPending:
    """Test cases for order_pending"""

    def test_fee_descending(self):
        pool = PendingPool()
        for cid, fee in (("a", 5), ("b", 1), ("c", 9)):
            pool.add(contract(cid, fee=fee))
        assert [c.fee for c in order_pending(pool)] == [9, 5, 1]

    def test_tie_on_submission_step(self):
        pool = PendingPool()
        pool.add(contract("late", fee=3, step=2))
        pool.add(contract("early", fee=3, step=1))
        assert [c.id for c in order_pending(pool)] == ["early", "late"]

    def test_empty(self):
        assert order_pending(PendingPool()) == []

    def test_total_order(self):
        """1000 random pools come out sorted by fee, then step, then id"""
        rng = np.random.default_rng(37)
        for _ in range(1000):
            pool = PendingPool()
            for k in range(int(rng.integers(1, 30))):
                pool.add(contract(f"c{k}", fee=int(rng.integers(0, 5)), step=int(rng.integers(0, 4))))
            ordered = order_pending(pool)
            keys = [priority_key(c) for c in ordered]
            assert keys == sorted(keys)
            assert len(set(keys)) == len(keys)


class TestFormBlock:
    """Test cases for form_block"""

    def test_below_threshold(self):
        pool = PendingPool()
        pool.add(contract("a"))
        pool.add(contract("b"))
        chain = Chain.with_nodes(1)
        assert form_block(pool, 3, chain, timestamp=1) is None
        assert chain.height == 0

    def test_threshold_reached(self):
        pool = PendingPool()
        for k in range(5):
            pool.add(contract(f"c{k}", fee=k))
        chain = Chain.with_nodes(1)
        block = form_block(pool, 3, chain, timestamp=1)

        assert len(block.contracts) == 3
        assert len(pool) == 2
        assert all(c.status == ContractStatus.PACKED for c in block.contracts)

    def test_block_in_fee_order(self):
        pool = PendingPool()
        for cid, fee in (("a", 1), ("b", 9), ("c", 5)):
            pool.add(contract(cid, fee=fee))
        block = form_block(pool, 3, Chain.with_nodes(1), timestamp=1)
        assert [c.fee for c in block.contracts] == [9, 5, 1]

    def test_links_to_head(self):
        chain = chain_of(2)
        assert chain.blocks[2].prev_digest == chain.blocks[1].digest
        assert chain.nodes_consistent()

    def test_flush_forms_undersized_block(self):
        pool = PendingPool()
        pool.add(contract("a"))
        block = form_block(pool, 3, Chain.with_nodes(1), timestamp=9, flush=True)
        assert len(block.contracts) == 1

    def test_node_roles(self):
        chain = Chain.with_nodes(4)
        assert chain.ordering_node == "node-0"
        assert chain.node_roles() == {
            "node-0": "ordering", "node-1": "computation", "node-2": "transaction", "node-3": "computation",
        }


class TestExecuteBlock:
    """Test cases for execute_block"""

    def _packed(self, book, *contracts):
        pool = PendingPool()
        for c in contracts:
            submit_contract(c, book, pool)
        chain = Chain.with_nodes(2)
        return form_block(pool, len(contracts), chain, timestamp=0), chain

    def test_non_conflicting(self):
        network = trade_network(capacity=10.0)
        book = accounts()
        block, chain = self._packed(book, contract("a", fee=2), contract("b", fee=1))
        result = execute_block(block, network, base_schedule(network), book, chain, step=0)

        assert result.executed == ["a", "b"]
        assert result.fees_collected == 3
        assert chain.collected_fees == 3
        assert book["seller"].escrowed == 0 and book["seller"].balance == 7

    def test_shared_line(self):
        """Two 1 MW trades on a 1 MW line: the higher fee executes, the other is cancelled and refunded"""
        network = trade_network(capacity=1.0)
        book = accounts()
        block, chain = self._packed(book, contract("low", fee=1), contract("high", fee=4))
        result = execute_block(block, network, base_schedule(network), book, chain, step=0)

        assert result.executed == ["high"]
        assert [cid for cid, _ in result.cancelled] == ["low"]
        assert block.contracts[1].status == ContractStatus.CANCELLED
        assert book["seller"].balance == 6
        assert chain.collected_fees == 4

    def test_priority_holder_first(self):
        """A PriorityPurchase holder with the lower fee is validated first"""
        network = trade_network(capacity=1.0)
        book = accounts()
        book["vip"].rights.add(Right.PRIORITY_PURCHASE)
        block, chain = self._packed(book, contract("plain", fee=5), contract("vip", fee=1, buyer="vip"))
        result = execute_block(block, network, base_schedule(network), book, chain, step=0)

        assert result.executed == ["vip"]
        assert [cid for cid, _ in result.cancelled] == ["plain"]

    def test_expire_refunds_all(self):
        network = trade_network(capacity=10.0)
        book = accounts()
        block, chain = self._packed(book, contract("a", fee=2))
        result = execute_block(block, network, base_schedule(network), book, chain, step=5, expire=True)

        assert result.cancelled == [("a", "horizon reached")]
        assert book["seller"].balance == 10
        assert chain.collected_fees == 0

    def test_grid_refusal_is_curtailment(self):
        """The cancelled 1 MW wind sale is curtailed; the rest of the unsold wind is not"""
        network = trade_network(capacity=1.0)
        book = accounts()
        block, chain = self._packed(book, contract("low", fee=1), contract("high", fee=4))
        result = execute_block(block, network, base_schedule(network), book, chain, step=0)

        assert result.blocked == ["low"]
        assert result.schedule.unsold() == {"W": pytest.approx(9.0)}
        assert result.schedule.curtailed() == {"W": pytest.approx(1.0)}

    def test_device_limit_is_not_curtailment(self):
        """Selling more than the available wind is cancelled without curtailing anything"""
        network = trade_network(capacity=50.0)
        book = accounts()
        block, chain = self._packed(book, contract("big", quantity=12.0))
        result = execute_block(block, network, base_schedule(network), book, chain, step=0)

        assert result.cancelled[0][1].startswith("device limit: W")
        assert result.blocked == []
        assert result.schedule.curtailed() == {"W": 0.0}
        assert result.schedule.unsold() == {"W": 10.0}

    def test_executed_contract_active_window(self):
        network = trade_network(capacity=10.0)
        book = accounts()
        block, chain = self._packed(book, contract("a", duration=3))
        execute_block(block, network, base_schedule(network), book, chain, step=4)

        c = block.contracts[0]
        assert [c.active_at(s) for s in range(3, 8)] == [False, True, True, True, False]


class TestVerifyChain:
    """Test cases for verify_chain and chain.log"""

    def test_untampered(self):
        assert verify_chain(chain_of(10).blocks) is None

    def test_flipped_bit(self):
        """Flipping one payload bit in block 4 is caught at height 4"""
        blocks = list(chain_of(50).blocks)
        payload = bytearray(blocks[4].payload)
        payload[-9] ^= 0x01
        blocks[4] = replace(blocks[4], payload=bytes(payload))
        assert verify_chain(blocks) == 4

    def test_sampled_bit_flips(self):
        """1000 random single-bit flips are each caught at the mutated height"""
        original = list(chain_of(50).blocks)
        rng = np.random.default_rng(41)
        for _ in range(1000):
            height = int(rng.integers(0, len(original)))
            payload = bytearray(original[height].payload)
            bit = int(rng.integers(0, len(payload) * 8))
            payload[bit // 8] ^= 1 << (bit % 8)
            blocks = list(original)
            blocks[height] = replace(blocks[height], payload=bytes(payload))
            assert verify_chain(blocks) == height

    def test_tampered_prev_digest(self):
        blocks = list(chain_of(5).blocks)
        blocks[2] = replace(blocks[2], prev_digest=bytes(32))
        assert verify_chain(blocks) == 2

    def test_lowest_height_reported(self):
        blocks = list(chain_of(50).blocks)
        for height in (30, 12):
            blocks[height] = replace(blocks[height], digest=bytes(32))
        assert verify_chain(blocks) == 12

    def test_chain_log_round_trip(self):
        chain = chain_of(20, threshold=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "chain.log"
            write_chain_log(chain.blocks, path)
            restored = read_chain_log(path)

        assert [b.digest for b in restored] == [b.digest for b in chain.blocks]
        assert verify_chain(restored) is None

    def test_edited_log_detected(self):
        """Changing one fee in the exported log breaks that block's digest"""
        chain = chain_of(8)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "chain.log"
            write_chain_log(chain.blocks, path)
            lines = path.read_text(encoding="utf-8").splitlines()
            record = json.loads(lines[6])
            record["contracts"][0]["fee"] += 1
            lines[6] = json.dumps(record)
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            restored = read_chain_log(path)

        assert verify_chain(restored) == 6


class TestFeeConservation:
    """Balances, escrow and collected fees always add up to the same total"""

    @staticmethod
    def _total(book, chain):
        return sum(a.balance + a.escrowed for a in book.values()) + chain.collected_fees

    def test_submit_execute_cancel_expire(self):
        rng = np.random.default_rng(31)
        for trial in range(50):
            network = trade_network(capacity=float(rng.uniform(0.5, 4.0)))
            book = accounts()
            chain = Chain.with_nodes(3)
            pool = PendingPool()
            start = self._total(book, chain)

            for i in range(int(rng.integers(2, 10))):
                c = contract(f"t{trial}-{i}", quantity=float(rng.uniform(0.2, 3.0)),
                             fee=int(rng.integers(0, 5)), buyer=str(rng.choice(["buyer", "vip"])),
                             submitter=str(rng.choice(["seller", "buyer"])))
                try:
                    submit_contract(c, book, pool)
                except ContractRefused:
                    pass
                assert self._total(book, chain) == start

            block = form_block(pool, 3, chain, timestamp=0)
            if block is not None:
                execute_block(block, network, base_schedule(network), book, chain, step=0)
                assert self._total(book, chain) == start

            while len(pool) > 0:
                block = form_block(pool, 3, chain, timestamp=1, flush=True)
                execute_block(block, network, base_schedule(network), book, chain, step=1, expire=True)
            assert self._total(book, chain) == start
            assert all(a.escrowed == 0 for a in book.values())
