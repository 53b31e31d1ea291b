"""Trusted-repeater key transport over a chain of QKD links.

Every link leaves identical secret key material in the stores of its two
endpoints. A network key travels hop by hop as a one-time-pad ciphertext;
each intermediate node decrypts it with the pad it shares with the previous
node and re-encrypts it for the next one, so it sees the key in plaintext.
"""

from __future__ import annotations

import hashlib
import math
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .authchan import AuthenticatedChannel, MsgType
from .keycore import BitString, EpsilonReport, SecurityParams, compose_epsilon, xor_combine

_RELAY_HEADER = struct.Struct(">HI")


class InsufficientKeyMaterialError(RuntimeError):
    """A hop lacks pad bits for the requested relay; nothing was consumed."""


class PathNotFoundError(LookupError):
    pass


class PadReuseError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class NodeId:
    name: str

    def __str__(self) -> str:
        return self.name


def _node(x) -> NodeId:
    return x if isinstance(x, NodeId) else NodeId(str(x))


def _pair(a, b) -> tuple[NodeId, NodeId]:
    return tuple(sorted((_node(a), _node(b))))


class LinkKeyStore:
    """One node's copy of the key shared with a neighbour.

    Bits are handed out strictly in order and never twice; a consumption
    bitmap over absolute bit indices backs that claim with an audit.
    """

    def __init__(self, owner: NodeId, pair: tuple[NodeId, NodeId]):
        self.owner = owner
        self.pair = pair
        self._pool = np.zeros(0, dtype=np.uint8)
        self._used = np.zeros(0, dtype=bool)
        self._cursor = 0
        self.produced = 0
        self.consumed = 0
        self.reuse_events = 0
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return self.produced - self.consumed

    def deposit(self, bits: BitString) -> None:
        with self._lock:
            self._pool = np.concatenate([self._pool, bits.bits])
            self._used = np.concatenate([self._used, np.zeros(bits.length, dtype=bool)])
            self.produced += bits.length

    def take(self, nbits: int) -> tuple[BitString, int]:
        """Consume ``nbits`` pad bits; returns them with their start index."""
        with self._lock:
            if self.remaining < nbits:
                raise InsufficientKeyMaterialError(
                    f"{self.owner} holds {self.remaining} bits for {self.pair}, need {nbits}")
            start = self._cursor
            span = slice(start, start + nbits)
            if self._used[span].any():
                self.reuse_events += int(self._used[span].sum())
                raise PadReuseError(f"pad bits of {self.pair} at {start} already consumed")
            self._used[span] = True
            self._cursor += nbits
            self.consumed += nbits
            return BitString.from_bits(self._pool[span]), start

    def audit(self) -> bool:
        """True iff exactly the first ``consumed`` bits are marked used, once each."""
        with self._lock:
            used = int(self._used.sum())
            return (self.reuse_events == 0 and used == self.consumed
                    and bool(self._used[:self.consumed].all()))


@dataclass(frozen=True)
class RelayPath:
    nodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(_node(n) for n in self.nodes))
        if len(self.nodes) < 2:
            raise ValueError("a relay path needs at least two nodes")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("relay path visits a node twice")

    @property
    def hops(self) -> list[tuple[NodeId, NodeId]]:
        return list(zip(self.nodes[:-1], self.nodes[1:]))

    @property
    def source(self) -> NodeId:
        return self.nodes[0]

    @property
    def destination(self) -> NodeId:
        return self.nodes[-1]

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class TrustEvent:
    node: NodeId
    key_digest: str
    hop: int


@dataclass(frozen=True)
class HopRecord:
    hop: int
    sender: NodeId
    receiver: NodeId
    pad_start: int
    ciphertext: BitString


@dataclass
class DeliveryRecord:
    key: BitString
    delivered: BitString
    path: RelayPath
    hops: list = field(default_factory=list)
    trust_events: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.delivered == self.key

    @property
    def pad_bits(self) -> int:
        return self.key.length * len(self.hops)


def generate_network_key(length: int, seed) -> BitString:
    """Uniform key from a seeded generator (stands in for a hardware QRNG)."""
    if length < 1:
        raise ValueError("key length must be >= 1")
    return BitString.random(length, np.random.default_rng(seed))


def network_epsilon(params: SecurityParams, path: RelayPath) -> EpsilonReport:
    return compose_epsilon(params, len(path))


def secret_key_rate(l_sec_final: int, tau_s: float) -> float:
    if not tau_s > 0:
        raise ValueError(f"duration must be positive, got {tau_s}")
    return l_sec_final / tau_s


def _digest(bits: BitString) -> str:
    return hashlib.sha256(bits.data + struct.pack(">I", bits.length)).hexdigest()[:16]


@dataclass
class _Link:
    pair: tuple[NodeId, NodeId]
    stores: dict
    channel: AuthenticatedChannel
    rate_bps: float = 0.0
    carry: float = 0.0

    def endpoint(self, node: NodeId):
        return self.channel.a if node == self.pair[0] else self.channel.b


class Network:
    """Nodes, links and their key stores, with a simulated clock.

    Links can be fed explicitly with ``deposit`` or continuously at a secret
    key rate (``set_supply``), in which case advancing the clock adds fresh
    key to both ends of the link.
    """

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng()
        self.nodes: set[NodeId] = set()
        self.links: dict[tuple[NodeId, NodeId], _Link] = {}
        self.now = 0.0
        self.trust_log: list[TrustEvent] = []
        self._lock = threading.Lock()

    def add_link(self, a, b, channel: AuthenticatedChannel | None = None,
                 rate_bps: float = 0.0) -> None:
        a, b = _node(a), _node(b)
        if a == b:
            raise ValueError("a link needs two distinct nodes")
        pair = _pair(a, b)
        if pair in self.links:
            raise ValueError(f"link {pair} already exists")
        chan = channel or AuthenticatedChannel.provision(self.rng, names=(str(pair[0]), str(pair[1])))
        stores = {n: LinkKeyStore(n, pair) for n in pair}
        self.links[pair] = _Link(pair, stores, chan, rate_bps)
        self.nodes.update(pair)

    def link(self, a, b) -> _Link:
        try:
            return self.links[_pair(a, b)]
        except KeyError:
            raise PathNotFoundError(f"no link between {a} and {b}") from None

    def store(self, owner, peer) -> LinkKeyStore:
        return self.link(owner, peer).stores[_node(owner)]

    def deposit(self, a, b, bits: BitString) -> None:
        """Key established by the link: both endpoints get identical copies."""
        for s in self.link(a, b).stores.values():
            s.deposit(bits)

    def set_supply(self, a, b, rate_bps: float) -> None:
        if rate_bps < 0:
            raise ValueError("rate must be non-negative")
        self.link(a, b).rate_bps = rate_bps

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("time runs forward only")
        with self._lock:
            self.now += dt
        for ln in self.links.values():
            if ln.rate_bps <= 0 or dt == 0:
                continue
            total = ln.carry + ln.rate_bps * dt
            whole = math.floor(total + 1e-9)
            ln.carry = max(0.0, total - whole)
            if whole:
                self.deposit(*ln.pair, BitString.random(whole, self.rng))

    def find_path(self, src, dst) -> RelayPath:
        src, dst = _node(src), _node(dst)
        if src not in self.nodes or dst not in self.nodes:
            raise PathNotFoundError(f"unknown node in ({src}, {dst})")
        prev = {src: None}
        queue = deque([src])
        while queue:
            cur = queue.popleft()
            if cur == dst:
                break
            for a, b in sorted(self.links):
                nxt = b if a == cur else a if b == cur else None
                if nxt is not None and nxt not in prev:
                    prev[nxt] = cur
                    queue.append(nxt)
        if dst not in prev or src == dst:
            raise PathNotFoundError(f"no relay path from {src} to {dst}")
        nodes = [dst]
        while prev[nodes[-1]] is not None:
            nodes.append(prev[nodes[-1]])
        return RelayPath(tuple(reversed(nodes)))

    def relay_key(self, key: BitString, path: RelayPath) -> DeliveryRecord:
        """Carry ``key`` from path source to destination under per-hop pads.

        All hops are checked for enough pad material first, so a short hop
        defers the relay without touching any store.
        """
        with self._lock:
            for a, b in path.hops:
                ln = self.link(a, b)
                short = [s for s in ln.stores.values() if s.remaining < key.length]
                if short:
                    raise InsufficientKeyMaterialError(
                        f"hop {a}-{b} holds {short[0].remaining} pad bits, need {key.length}")
            record = DeliveryRecord(key=key, delivered=key, path=path)
            current = key
            for i, (a, b) in enumerate(path.hops):
                ln = self.link(a, b)
                pad, start = ln.stores[a].take(key.length)
                ct = xor_combine(current, pad)
                ln.endpoint(a).send(MsgType.RELAY_CIPHERTEXT,
                                    _RELAY_HEADER.pack(i, key.length) + ct.data)
                msg = ln.endpoint(b).recv(MsgType.RELAY_CIPHERTEXT)
                hop, nbits = _RELAY_HEADER.unpack_from(msg.payload)
                received = BitString(msg.payload[_RELAY_HEADER.size:], nbits)
                pad_b, _ = ln.stores[b].take(nbits)
                current = xor_combine(received, pad_b)
                record.hops.append(HopRecord(hop, a, b, start, ct))
                if b != path.destination:
                    ev = TrustEvent(b, _digest(current), i)
                    record.trust_events.append(ev)
                    self.trust_log.append(ev)
            record.delivered = current
            return record

    def authenticate_links(self) -> bool:
        """Close the relay traffic of every link with a tag exchange."""
        ok = True
        for ln in self.links.values():
            if len(ln.channel.a.sent) or len(ln.channel.b.sent):
                ok &= ln.channel.authenticate_round()
        return ok

    def _wait_for(self, path: RelayPath, nbits: int) -> float:
        wait = 0.0
        for a, b in path.hops:
            ln = self.link(a, b)
            missing = nbits - min(s.remaining for s in ln.stores.values())
            if missing <= 0:
                continue
            if ln.rate_bps <= 0:
                raise InsufficientKeyMaterialError(f"hop {a}-{b} produces no key")
            wait = max(wait, (missing - ln.carry) / ln.rate_bps)
        return max(wait, 0.0)

    def request_renewal_key(self, pair, key_len: int = 256,
                            seed=None) -> tuple[BitString, float]:
        """Deliver a fresh end-to-end key; returns it with the simulated wait."""
        src, dst = (_node(x) for x in pair)
        path = self.find_path(src, dst)
        wait = self._wait_for(path, key_len)
        self.advance(wait)
        # float rounding can leave a hop a bit short of the exact crossing
        while True:
            extra = self._wait_for(path, key_len)
            if extra == 0.0:
                break
            self.advance(extra + 1e-9)
            wait += extra + 1e-9
        key = generate_network_key(key_len, self.rng if seed is None else seed)
        record = self.relay_key(key, path)
        return record.delivered, wait
