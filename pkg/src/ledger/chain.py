"""
Hash-chained blocks, simulated node copies, block formation and tamper-evident verification

Canonical block serialization (all integers little-endian):

    u64 height | 32 bytes prev_digest | u64 timestamp | u32 contract count | contract*

    contract := str id | str seller | str buyer | str carrier | f64 quantity | f64 price
                | u64 fee | u64 submitted_at | u32 duration | str submitter
                | str seller_device | str buyer_device
    str      := u32 byte length | UTF-8 bytes   (absent device ids are empty strings)

digest = SHA-256(serialization).
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from src.grid.network import Carrier
from src.ledger.contracts import Contract, ContractStatus, PendingPool, order_pending
from src.utils.logger import get_logger

logger = get_logger(__name__)

GENESIS_DIGEST = bytes(32)


def _pack_str(value: Optional[str]) -> bytes:
    raw = (value or "").encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_contract(c: Contract) -> bytes:
    return b"".join([
        _pack_str(c.id),
        _pack_str(c.seller),
        _pack_str(c.buyer),
        _pack_str(c.carrier.value),
        struct.pack("<d", float(c.quantity)),
        struct.pack("<d", float(c.price)),
        struct.pack("<Q", int(c.fee)),
        struct.pack("<Q", int(c.submitted_at)),
        struct.pack("<I", int(c.duration)),
        _pack_str(c.submitter),
        _pack_str(c.seller_device),
        _pack_str(c.buyer_device),
    ])


def encode_block(height: int, prev_digest: bytes, contracts: Sequence[Contract], timestamp: int) -> bytes:
    header = struct.pack("<Q", height) + prev_digest + struct.pack("<Q", timestamp)
    body = struct.pack("<I", len(contracts)) + b"".join(encode_contract(c) for c in contracts)
    return header + body


@dataclass(frozen=True)
class Block:
    height: int
    prev_digest: bytes
    contracts: Tuple[Contract, ...]
    timestamp: int
    payload: bytes
    digest: bytes

    @classmethod
    def create(cls, height: int, prev_digest: bytes, contracts: Sequence[Contract], timestamp: int) -> "Block":
        payload = encode_block(height, prev_digest, contracts, timestamp)
        return cls(
            height=height,
            prev_digest=prev_digest,
            contracts=tuple(contracts),
            timestamp=timestamp,
            payload=payload,
            digest=hashlib.sha256(payload).digest(),
        )

    def to_record(self) -> Dict:
        """chain.log line, fields in serialization order"""
        return {
            "height": self.height,
            "prev_digest": self.prev_digest.hex(),
            "timestamp": self.timestamp,
            "contracts": [
                {
                    "id": c.id,
                    "seller": c.seller,
                    "buyer": c.buyer,
                    "carrier": c.carrier.value,
                    "quantity": c.quantity,
                    "price": c.price,
                    "fee": c.fee,
                    "submitted_at": c.submitted_at,
                    "duration": c.duration,
                    "submitter": c.submitter,
                    "seller_device": c.seller_device,
                    "buyer_device": c.buyer_device,
                }
                for c in self.contracts
            ],
            "digest": self.digest.hex(),
        }


def genesis_block() -> Block:
    return Block.create(0, GENESIS_DIGEST, (), 0)


@dataclass
class Chain:
    """The canonical chain plus one synchronized copy per simulated node

    Node 0 is the ordering node and collects fees; the others alternate between
    computation (flow tracing) and transaction (settlement) roles.
    """
    blocks: List[Block] = field(default_factory=lambda: [genesis_block()])
    nodes: Dict[str, List[Block]] = field(default_factory=dict)
    collected_fees: int = 0

    @classmethod
    def with_nodes(cls, node_count: int) -> "Chain":
        chain = cls()
        for i in range(max(1, node_count)):
            chain.nodes[f"node-{i}"] = list(chain.blocks)
        return chain

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.head.height

    @property
    def ordering_node(self) -> str:
        return next(iter(self.nodes), "node-0")

    def node_roles(self) -> Dict[str, str]:
        roles = {}
        for i, node in enumerate(self.nodes):
            roles[node] = "ordering" if i == 0 else ("computation" if i % 2 else "transaction")
        return roles

    def append(self, block: Block) -> None:
        self.blocks.append(block)
        for copy in self.nodes.values():
            copy.append(block)

    def nodes_consistent(self) -> bool:
        reference = [b.digest for b in self.blocks]
        return all([b.digest for b in copy] == reference for copy in self.nodes.values())


def form_block(pool: PendingPool, threshold: int, chain: Chain, timestamp: int,
               flush: bool = False) -> Optional[Block]:
    """Pack the top `threshold` pending contracts into a new block

    With flush=True an undersized block is emitted for whatever remains.
    """
    if threshold < 1:
        raise ValueError("block threshold must be >= 1")
    if len(pool) < threshold and not (flush and len(pool) > 0):
        return None

    packed = order_pending(pool)[:threshold]
    for c in packed:
        pool.remove(c.id)
        c.status = ContractStatus.PACKED
    block = Block.create(chain.height + 1, chain.head.digest, packed, timestamp)
    chain.append(block)
    logger.debug(f"Step {timestamp}: block {block.height} with {len(packed)} contracts, "
                 f"{len(pool)} still pending")
    return block


def verify_chain(blocks: Iterable[Block]) -> Optional[int]:
    """Return the lowest height failing verification, or None when the chain is intact"""
    prev: Optional[Block] = None
    for position, block in enumerate(blocks):
        expected_prev = GENESIS_DIGEST if prev is None else prev.digest
        if (
            block.height != position
            or block.prev_digest != expected_prev
            or encode_block(block.height, block.prev_digest, block.contracts, block.timestamp) != block.payload
            or hashlib.sha256(block.payload).digest() != block.digest
        ):
            return position
        prev = block
    return None


def write_chain_log(blocks: Iterable[Block], path: Path) -> None:
    """One compact JSON record per block, genesis first"""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for block in blocks:
            f.write(json.dumps(block.to_record(), ensure_ascii=False, separators=(",", ":")) + "\n")


def read_chain_log(path: Path) -> List[Block]:
    """Rebuild blocks from chain.log, keeping the stored digests for verification"""
    blocks = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            contracts = tuple(
                Contract(
                    id=c["id"],
                    seller=c["seller"],
                    buyer=c["buyer"],
                    carrier=Carrier(c["carrier"]),
                    quantity=c["quantity"],
                    price=c["price"],
                    fee=c["fee"],
                    submitted_at=c["submitted_at"],
                    duration=c["duration"],
                    submitter=c["submitter"],
                    seller_device=c["seller_device"],
                    buyer_device=c["buyer_device"],
                    status=ContractStatus.PACKED,
                )
                for c in record["contracts"]
            )
            prev_digest = bytes.fromhex(record["prev_digest"])
            payload = encode_block(record["height"], prev_digest, contracts, record["timestamp"])
            blocks.append(Block(
                height=record["height"],
                prev_digest=prev_digest,
                contracts=contracts,
                timestamp=record["timestamp"],
                payload=payload,
                digest=bytes.fromhex(record["digest"]),
            ))
    return blocks
