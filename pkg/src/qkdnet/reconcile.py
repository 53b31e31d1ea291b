"""Blind LDPC reconciliation of sifted frames and hash-based verification.

A frame is one 4096-bit codeword. 10% of its positions are punctured: Alice
fills them with private random bits, so the remaining 3686 positions carry
key. Alice sends her syndrome; Bob decodes with no knowledge of the error
rate. When decoding fails, Bob names the positions his decoder is least sure
about and Alice discloses their values, a few at a time, until the decoder
converges or the round cap is hit.

Leak accounting per frame is ``m - rank(H_P) + disclosed`` where ``H_P`` are
the columns of the punctured positions: punctured bits are independent of the
key, so the syndrome only reveals ``m - rank(H_P)`` bits about it. Disclosed
punctured values are counted in full, which upper-bounds the rank drop.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .authchan import HEADER, Endpoint, MsgType, decode_frame
from .keycore import BitString, LengthMismatchError, binary_entropy
from .ldpc import LdpcCode, bp_decode_llr, build_code, gf2_rank
from .privacy import SeedLengthError, toeplitz_bits

FRAME_BITS = 4096
RATE_POOL = (0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9)
DEFAULT_RATE = 0.7
PUNCTURE_FRACTION = 0.10
DISCLOSURE_FRACTION = 0.0025
ROUND_CAP = 80
MAX_ITER = 60
STALL_ITER = 10
VERIFY_TAG_BITS = 50
VERIFY_BLOCK_BITS = 1 << 20
CODE_SEED = 20170704

_REVEALED_LLR = 50.0
# decoder LLR assumes the current disclosure sits this far above capacity
_ASSUMED_EFFICIENCY = 1.15
# a converged word is accepted only if every undisclosed bit is this sure
_CONFIDENCE_LLR = 2.0

_SUB_REQUEST, _SUB_VALUES, _SUB_DONE, _SUB_GIVE_UP = 0, 1, 2, 3


class ReconciliationFailure(RuntimeError):
    """Frame could not be decoded within the round cap; it is discarded."""

    def __init__(self, message: str, leak_ec: int = 0, failed_frames=()):
        super().__init__(message)
        self.leak_ec = leak_ec
        self.failed_frames = tuple(failed_frames)


@dataclass(frozen=True, eq=False)
class FrameCode:
    """A mother code plus its puncturing pattern."""

    code: LdpcCode
    punctured: np.ndarray
    key_positions: np.ndarray
    punctured_rank: int

    @property
    def rate(self) -> float:
        return self.code.rate

    @property
    def key_bits(self) -> int:
        return int(self.key_positions.size)

    @property
    def base_leak(self) -> int:
        return self.code.m - self.punctured_rank


def _untainted_punctures(code: LdpcCode, count: int, rng: np.random.Generator) -> np.ndarray:
    # degree-3 variables no two of which share a check; degree-2 variables
    # are never punctured since the staircase then hosts light codewords
    deg = code.var_degrees()
    csc = code.matrix.tocsc()
    used = np.zeros(code.m, dtype=bool)
    chosen: list[int] = []
    for v in rng.permutation(np.flatnonzero(deg == 3)):
        checks = csc.indices[csc.indptr[v]:csc.indptr[v + 1]]
        if not used[checks].any():
            used[checks] = True
            chosen.append(int(v))
            if len(chosen) == count:
                break
    if len(chosen) < count:
        taken = set(chosen)
        rest = [int(v) for v in rng.permutation(np.flatnonzero(deg >= 3)) if v not in taken]
        chosen += rest[:count - len(chosen)]
    if len(chosen) < count:
        raise ValueError(f"cannot puncture {count} positions of {code.id}")
    return np.sort(np.array(chosen, dtype=np.int64))


@lru_cache(maxsize=32)
def frame_code(rate: float, n: int = FRAME_BITS, seed: int = CODE_SEED,
               puncture_fraction: float = PUNCTURE_FRACTION) -> FrameCode:
    m = int(round(n * (1.0 - rate)))
    code = build_code(n, 1.0 - m / n, seed)
    p = int(round(puncture_fraction * n))
    rng = np.random.default_rng([seed, n, m, 1])
    punctured = _untainted_punctures(code, p, rng) if p else np.zeros(0, dtype=np.int64)
    key = np.setdiff1d(np.arange(n), punctured)
    h_p = code.matrix[:, punctured].toarray() if p else np.zeros((m, 0), dtype=np.uint8)
    return FrameCode(code, punctured, key, gf2_rank(h_p))


def frame_key_bits(n: int = FRAME_BITS, puncture_fraction: float = PUNCTURE_FRACTION) -> int:
    return n - int(round(puncture_fraction * n))


def select_rate(qber_estimate: float | None, pool=RATE_POOL, n: int = FRAME_BITS,
                puncture_fraction: float = PUNCTURE_FRACTION) -> float:
    """Mother rate for the next frame given the last measured QBER.

    Picks the code whose undisclosed leak is the largest one not above the
    Shannon limit ``h(q)``; disclosures then close the remaining gap in small
    steps. With no estimate the default middle rate is used.
    """
    if qber_estimate is None:
        return DEFAULT_RATE
    limit = binary_entropy(min(max(qber_estimate, 0.0), 0.5))
    k = frame_key_bits(n, puncture_fraction)
    p = n - k
    for rate in sorted(pool):
        start = (round(n * (1.0 - rate)) - p) / k
        if start <= limit:
            return rate
    return max(pool)


def _assumed_llr(leak_fraction: float) -> float:
    # invert h(q) = leak / efficiency on a fixed grid; no channel estimate used
    target = min(max(leak_fraction / _ASSUMED_EFFICIENCY, 0.03), 0.95)
    lo, hi = 1e-4, 0.5
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if binary_entropy(mid) < target:
            lo = mid
        else:
            hi = mid
    q = 0.5 * (lo + hi)
    return float(np.log((1.0 - q) / q))


def _plausible(decoded: np.ndarray, noisy: np.ndarray, leak: int) -> bool:
    k = noisy.size
    flips = int(np.count_nonzero(decoded != noisy))
    return leak >= k * binary_entropy(min(flips / k, 0.5))


@dataclass
class FrameResult:
    corrected: BitString
    leak_ec: int
    rounds: int
    converged: bool
    disclosed_positions: frozenset
    rate: float


@dataclass
class ReconciliationResult:
    corrected_bob: BitString
    leak_ec: int
    rounds: int
    converged: bool
    disclosed_positions: frozenset = field(default_factory=frozenset)
    frames: list = field(default_factory=list)


def reconcile_frame(alice: BitString, bob: BitString, alice_end: Endpoint, bob_end: Endpoint,
                    fc: FrameCode, frame_id: int, rng: np.random.Generator,
                    round_cap: int = ROUND_CAP, increment: int | None = None,
                    max_iter: int = MAX_ITER) -> FrameResult:
    """Run the blind protocol on one frame with both parties in-process.

    ``alice``/``bob`` hold the key positions only; ``rng`` is Alice's private
    source for the punctured filler bits.
    """
    code = fc.code
    k = fc.key_bits
    if alice.length != k or bob.length != k:
        raise LengthMismatchError(f"frame needs {k} key bits, got {alice.length}/{bob.length}")
    if increment is None:
        increment = max(1, int(round(DISCLOSURE_FRACTION * code.n)))
    rate_code = int(round(code.rate * 1000))

    # Alice: codeword = key bits plus private filler in punctured positions
    word = np.zeros(code.n, dtype=np.uint8)
    word[fc.key_positions] = alice.bits
    word[fc.punctured] = rng.integers(0, 2, size=fc.punctured.size, dtype=np.uint8)
    syndrome = code.syndrome_bits(word)
    alice_end.send(MsgType.SYNDROME, struct.pack(">IH", frame_id, rate_code)
                   + BitString.from_bits(syndrome).data)

    # Bob
    msg = bob_end.recv(MsgType.SYNDROME)
    _, _ = struct.unpack_from(">IH", msg.payload)
    target = BitString(msg.payload[6:], code.m).bits
    noisy = np.zeros(code.n, dtype=np.uint8)
    noisy[fc.key_positions] = bob.bits
    known = np.zeros(code.n, dtype=bool)
    known_vals = np.zeros(code.n, dtype=np.uint8)
    sign = 1.0 - 2.0 * noisy.astype(np.float64)
    on_key = np.zeros(code.n, dtype=bool)
    on_key[fc.key_positions] = True
    leak = fc.base_leak
    disclosed: list[int] = []
    c2v = None
    rounds = 0
    converged = False
    hard = noisy
    while True:
        rounds += 1
        prior = np.where(on_key, _assumed_llr(leak / k) * sign, 0.0)
        prior[known] = _REVEALED_LLR * (1.0 - 2.0 * known_vals[known])
        hard, converged, post, _, c2v = bp_decode_llr(code, prior, target, max_iter, c2v,
                                                       stall=STALL_ITER)
        if converged and (np.abs(post[~known]).min(initial=np.inf) < _CONFIDENCE_LLR
                          or not _plausible(hard[fc.key_positions], bob.bits, leak)):
            # a word this far from Bob's key cannot be pinned down by so few
            # disclosed bits: treat it as a decoding failure
            converged = False
        if converged:
            bob_end.send(MsgType.DISCLOSURE, struct.pack(">IB", frame_id, _SUB_DONE))
            alice_end.recv(MsgType.DISCLOSURE)
            break
        if rounds >= round_cap:
            bob_end.send(MsgType.DISCLOSURE, struct.pack(">IB", frame_id, _SUB_GIVE_UP))
            alice_end.recv(MsgType.DISCLOSURE)
            break
        cand = np.flatnonzero(~known)
        pick = np.sort(cand[np.argsort(np.abs(post[cand]), kind="stable")[:increment]])
        bob_end.send(MsgType.DISCLOSURE, struct.pack(">IBH", frame_id, _SUB_REQUEST, pick.size)
                     + pick.astype(">u2").tobytes())
        # Alice answers with her codeword values at the requested positions
        req = alice_end.recv(MsgType.DISCLOSURE)
        _, _, count = struct.unpack_from(">IBH", req.payload)
        asked = np.frombuffer(req.payload, dtype=">u2", count=count, offset=7).astype(np.int64)
        alice_end.send(MsgType.DISCLOSURE, struct.pack(">IBH", frame_id, _SUB_VALUES, count)
                       + BitString.from_bits(word[asked]).data)
        reply = bob_end.recv(MsgType.DISCLOSURE)
        vals = BitString(reply.payload[7:], count).bits
        known[pick] = True
        known_vals[pick] = vals
        leak += count
        disclosed.extend(pick.tolist())

    corrected = BitString.from_bits(hard[fc.key_positions]) if converged else bob
    return FrameResult(corrected, leak, rounds, converged, frozenset(disclosed), code.rate)


class Reconciler:
    """Per-link reconciliation state: code choice follows measured QBER.

    The frame protocol itself never sees an error-rate estimate; only the
    choice of mother code for the *next* frame does.
    """

    def __init__(self, pool=RATE_POOL, n: int = FRAME_BITS, code_seed: int = CODE_SEED,
                 round_cap: int = ROUND_CAP, rng: np.random.Generator | None = None):
        self.pool = tuple(sorted(pool))
        self.n = n
        self.code_seed = code_seed
        self.round_cap = round_cap
        self.rng = rng if rng is not None else np.random.default_rng()
        self.qber_estimate: float | None = None
        self._rate = DEFAULT_RATE if DEFAULT_RATE in self.pool else self.pool[len(self.pool) // 2]
        self._next_id = 0
        self._lock = threading.Lock()

    @property
    def frame_bits(self) -> int:
        return frame_key_bits(self.n)

    @property
    def rate(self) -> float:
        return self._rate

    def observe_qber(self, q: float) -> None:
        self.qber_estimate = q
        self._rate = select_rate(q, self.pool, self.n)

    def _step_down(self) -> None:
        lower = [r for r in self.pool if r < self._rate]
        if lower:
            self._rate = lower[-1]

    def reconcile(self, alice: BitString, bob: BitString, alice_end: Endpoint,
                  bob_end: Endpoint) -> FrameResult:
        with self._lock:
            frame_id = self._next_id
            self._next_id += 1
            rate = self._rate
        fc = frame_code(rate, self.n, self.code_seed)
        res = reconcile_frame(alice, bob, alice_end, bob_end, fc, frame_id, self.rng,
                              round_cap=self.round_cap)
        if res.converged:
            # Bob's own correction count is the parameter estimate for this frame
            q = bob.hamming(res.corrected) / bob.length
            self.observe_qber(q)
        else:
            self._step_down()
        return res


def blind_reconcile(alice: BitString, bob: BitString, channel,
                    reconciler: Reconciler | None = None) -> ReconciliationResult:
    """Reconcile a multi-frame key over ``channel`` (endpoint ``a`` is Alice).

    Raises ReconciliationFailure if any frame fails; the caller discards
    those frames (``failed_frames`` lists their indices).
    """
    rec = reconciler if reconciler is not None else Reconciler(rng=channel.rng)
    k = rec.frame_bits
    if alice.length != bob.length:
        raise LengthMismatchError("Alice and Bob keys differ in length")
    if alice.length % k:
        raise LengthMismatchError(f"key length {alice.length} is not a multiple of {k}")
    parts, frames, failed = [], [], []
    leak = rounds = 0
    disclosed: set[int] = set()
    for i in range(alice.length // k):
        sl = slice(i * k, (i + 1) * k)
        res = rec.reconcile(alice[sl], bob[sl], channel.a, channel.b)
        frames.append(res)
        parts.append(res.corrected)
        leak += res.leak_ec
        rounds = max(rounds, res.rounds)
        disclosed.update(i * rec.n + p for p in res.disclosed_positions)
        if not res.converged:
            failed.append(i)
    if failed:
        raise ReconciliationFailure(
            f"{len(failed)} of {len(frames)} frames failed after {rec.round_cap} rounds",
            leak_ec=leak, failed_frames=failed)
    return ReconciliationResult(BitString.concat(parts), leak, rounds, True,
                                frozenset(disclosed), frames)


def verification_seed_length(n: int, tag_bits: int = VERIFY_TAG_BITS) -> int:
    return n + tag_bits - 1


def verification_tag(key: BitString, seed: BitString, tag_bits: int = VERIFY_TAG_BITS) -> BitString:
    """50-bit Toeplitz tag; a longer seed is truncated to the length needed."""
    need = verification_seed_length(key.length, tag_bits)
    if seed.length < need:
        raise SeedLengthError(f"verification seed needs {need} bits, got {seed.length}")
    return BitString.from_bits(toeplitz_bits(key.bits, seed.bits[:need], tag_bits))


def verify_block(key_a: BitString, key_b: BitString, seed: BitString,
                 tag_bits: int = VERIFY_TAG_BITS) -> tuple[bool, int]:
    """Compare 50-bit Toeplitz tags of both keys; returns (match, disclosed bits)."""
    if key_a.length != key_b.length:
        raise LengthMismatchError("verified keys differ in length")
    match = verification_tag(key_a, seed, tag_bits) == verification_tag(key_b, seed, tag_bits)
    return match, tag_bits


def verify_over_channel(key_a: BitString, key_b: BitString, alice_end: Endpoint,
                        bob_end: Endpoint, rng: np.random.Generator,
                        tag_bits: int = VERIFY_TAG_BITS) -> tuple[bool, int]:
    """Alice sends seed and tag, Bob answers with a verdict."""
    seed = BitString.random(verification_seed_length(key_a.length, tag_bits), rng)
    tag = verification_tag(key_a, seed, tag_bits)
    alice_end.send(MsgType.VERIFY_TAG, struct.pack(">I", seed.length) + seed.data + tag.data)
    msg = bob_end.recv(MsgType.VERIFY_TAG)
    (seed_len,) = struct.unpack_from(">I", msg.payload)
    nbytes = (seed_len + 7) // 8
    recv_seed = BitString(msg.payload[4:4 + nbytes], seed_len)
    recv_tag = BitString(msg.payload[4 + nbytes:], tag_bits)
    ok = verification_tag(key_b, recv_seed, tag_bits) == recv_tag
    bob_end.send(MsgType.VERIFY_VERDICT, b"\x01" if ok else b"\x00")
    alice_end.recv(MsgType.VERIFY_VERDICT)
    return ok, tag_bits


def transcript_leak(frames: bytes, punctured_rank: dict[int, int] | int = 0) -> int:
    """Recount disclosed key-derived bits from a raw frame transcript.

    Sums syndrome bits (less the punctured rank of the code they came from),
    disclosed values and verification tags. ``punctured_rank`` maps the
    syndrome's rate code (rate*1000) to the rank, or is a single int.
    """
    leak = 0
    pos = 0
    while pos < len(frames):
        (length, _, _) = HEADER.unpack_from(frames, pos)
        type_code, payload = decode_frame(frames[pos:pos + HEADER.size + length])
        pos += HEADER.size + length
        if type_code == MsgType.SYNDROME:
            _, rate_code = struct.unpack_from(">IH", payload)
            m = int(round(FRAME_BITS * (1.0 - rate_code / 1000)))
            rank = punctured_rank if isinstance(punctured_rank, int) else punctured_rank[rate_code]
            leak += m - rank
        elif type_code == MsgType.DISCLOSURE and payload[4] == _SUB_VALUES:
            (count,) = struct.unpack_from(">H", payload, 5)
            leak += count
        elif type_code == MsgType.VERIFY_TAG:
            leak += VERIFY_TAG_BITS
    return leak
