"""Post-processing of one link over a simulated campaign.

Sifted bits arrive window by window. They are cut into frames and
reconciled; converged frames pile up into a verification block of at least
2^20 bits (a shorter remainder is flushed when the campaign ends). Each
block is verified, its error rate estimated, compressed to secret key, and
the round is closed by the mutual authentication of the channel traffic.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .authchan import AuthenticatedChannel, MsgType, Tamper
from .keycore import BitString, SecurityParams
from .linksim import DEFAULT_WINDOW_S, LinkParams, sifted_stream
from .netnode import secret_key_rate
from .privacy import (EstimateInvalidError, InsufficientKeyError, KeyBlock, QberAbort, Stage,
                      estimate_qber, estimate_y1, pa_seed_length, plan_secret_length,
                      privacy_amplify)
from .reconcile import VERIFY_BLOCK_BITS, Reconciler, verify_over_channel

# this many failed frames in a row means the link is not producing key
FAILURE_RUN_ABORT = 10

_ACCOUNTING = struct.Struct(">IIId")
_PA_SEED = struct.Struct(">III")


class LinkStatus(enum.Enum):
    OK = "ok"
    ABORTED = "aborted"
    AUTH_FAILED = "auth_failed"


@dataclass(frozen=True)
class WindowRecord:
    index: int
    start_s: float
    qber_process: float
    qber_realized: float
    qber_estimated: float | None
    sifted_bits: int


@dataclass(frozen=True)
class BlockSummary:
    index: int
    l_ver: int
    leak_ec: int
    qber: float
    l_sec_raw: int
    l_sec_final: int
    duration_s: float


@dataclass
class LinkStats:
    name: str
    duration_s: float
    sifted_bits: int = 0
    reconciled_bits: int = 0
    verified_bits: int = 0
    secret_bits: int = 0
    reserved_bits: int = 0
    leak_ec: int = 0
    frames: int = 0
    failed_frames: int = 0
    blocks: int = 0
    discarded_blocks: int = 0
    auth_rounds: int = 0
    status: LinkStatus = LinkStatus.OK
    reason: str = ""
    windows: list = field(default_factory=list)
    block_log: list = field(default_factory=list)
    secret_blocks: list = field(default_factory=list)

    def rate(self, bits: int) -> float:
        return secret_key_rate(bits, self.duration_s) if self.duration_s > 0 else 0.0

    @property
    def secret_rate(self) -> float:
        return self.rate(self.secret_bits)


class _Halt(Exception):
    def __init__(self, status: LinkStatus, reason: str):
        super().__init__(reason)
        self.status = status
        self.reason = reason


class LinkPipeline:
    """Run the whole post-processing chain for one link.

    ``seed`` fixes everything: the sifted stream, the channel's public
    randomness and Alice's private filler bits.
    """

    def __init__(self, params: LinkParams, security: SecurityParams | None = None,
                 seed=0, window_s: float = DEFAULT_WINDOW_S,
                 block_bits: int = VERIFY_BLOCK_BITS, tamper: Tamper | None = None,
                 keep_keys: bool = False):
        self.params = params
        self.security = security or SecurityParams()
        self.window_s = window_s
        self.block_bits = block_bits
        self.keep_keys = keep_keys
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        stream_ss, chan_ss, alice_ss = ss.spawn(3)
        self._stream_seed = stream_ss
        self.channel = AuthenticatedChannel.provision(
            np.random.default_rng(chan_ss), l_auth=self.security.l_auth,
            names=("alice", "bob"), tamper=tamper)
        self.reconciler = Reconciler(rng=np.random.default_rng(alice_ss))
        self._reset_block()

    def _reset_block(self) -> None:
        self._alice: list[np.ndarray] = []
        self._bob_before: list[np.ndarray] = []
        self._bob_after: list[np.ndarray] = []
        self._block_leak = 0
        self._block_bits = 0
        self._block_start: float | None = None

    def run(self, duration_s: float) -> LinkStats:
        stats = LinkStats(self.params.name, duration_s)
        k = self.reconciler.frame_bits
        buf_a = np.zeros(0, dtype=np.uint8)
        buf_b = np.zeros(0, dtype=np.uint8)
        fail_run = 0
        try:
            for win in sifted_stream(self.params, duration_s, self._stream_seed, self.window_s):
                buf_a = np.concatenate([buf_a, win.pair.alice.bits])
                buf_b = np.concatenate([buf_b, win.pair.bob.bits])
                stats.sifted_bits += win.pair.alice.length
                estimates = []
                end_s = win.start_s + win.pair.duration_s
                while buf_a.size >= k:
                    a, b = buf_a[:k], buf_b[:k]
                    buf_a, buf_b = buf_a[k:], buf_b[k:]
                    res = self.reconciler.reconcile(BitString.from_bits(a), BitString.from_bits(b),
                                                    self.channel.a, self.channel.b)
                    stats.frames += 1
                    stats.leak_ec += res.leak_ec
                    if not res.converged:
                        stats.failed_frames += 1
                        fail_run += 1
                        if fail_run >= FAILURE_RUN_ABORT:
                            raise _Halt(LinkStatus.ABORTED,
                                        f"{fail_run} consecutive frames failed to reconcile")
                        continue
                    fail_run = 0
                    estimates.append(self.reconciler.qber_estimate)
                    self._add_frame(a, b, res.corrected.bits, res.leak_ec, win.start_s)
                    stats.reconciled_bits += k
                    if self._block_bits >= self.block_bits:
                        self._finish_block(stats, end_s)
                stats.windows.append(WindowRecord(
                    win.index, win.start_s, win.qber, win.pair.true_qber,
                    float(np.mean(estimates)) if estimates else None, win.pair.alice.length))
            if self._block_bits:
                self._finish_block(stats, duration_s)
        except _Halt as halt:
            stats.status = halt.status
            stats.reason = halt.reason
        self.channel.close()
        return stats

    def _add_frame(self, alice, bob_before, bob_after, leak, t) -> None:
        if self._block_start is None:
            self._block_start = t
        self._alice.append(alice)
        self._bob_before.append(bob_before)
        self._bob_after.append(bob_after)
        self._block_leak += leak
        self._block_bits += alice.size

    def _finish_block(self, stats: LinkStats, end_s: float) -> None:
        ch = self.channel
        block_id = stats.blocks
        stats.blocks += 1
        key_a = BitString.from_bits(np.concatenate(self._alice))
        key_b = BitString.from_bits(np.concatenate(self._bob_after))
        before = BitString.from_bits(np.concatenate(self._bob_before))
        leak = self._block_leak
        span = end_s - (self._block_start or 0.0)
        self._reset_block()

        match, tag_bits = verify_over_channel(key_a, key_b, ch.a, ch.b, ch.rng)
        leak += tag_bits
        stats.leak_ec += tag_bits
        secret = None
        if not match:
            stats.discarded_blocks += 1
        else:
            stats.verified_bits += key_a.length
            # Bob measured the error rate from his own corrections
            q = estimate_qber(before, key_b)
            ch.b.send(MsgType.BLOCK_ACCOUNTING, _ACCOUNTING.pack(block_id, key_b.length, leak, q))
            _, l_ver, leak_rx, q_rx = _ACCOUNTING.unpack(ch.a.recv(MsgType.BLOCK_ACCOUNTING).payload)
            block = KeyBlock(Stage.VERIFIED, key_a, l_ver=l_ver, leak_ec=leak_rx, qber=q_rx,
                             duration_s=span)
            try:
                est = estimate_y1(self.params.eta, self.params.mu)
                l_raw, _ = plan_secret_length(block, est, self.security)
            except QberAbort as exc:
                raise _Halt(LinkStatus.ABORTED, str(exc)) from None
            except EstimateInvalidError as exc:
                raise _Halt(LinkStatus.ABORTED, str(exc)) from None
            if l_raw > 2 * self.security.l_auth:
                seed = BitString.random(pa_seed_length(l_ver, l_raw), ch.rng)
                ch.a.send(MsgType.PA_SEED, _PA_SEED.pack(block_id, l_raw, seed.length) + seed.data)
                msg = ch.b.recv(MsgType.PA_SEED)
                _, _, seed_len = _PA_SEED.unpack_from(msg.payload)
                seed_b = BitString(msg.payload[_PA_SEED.size:], seed_len)
                try:
                    secret = privacy_amplify(block, est, self.security, seed)
                    secret_b = privacy_amplify(KeyBlock(
                        Stage.VERIFIED, key_b, l_ver=l_ver, leak_ec=leak_rx, qber=q_rx,
                        duration_s=span), est, self.security, seed_b)
                except InsufficientKeyError:
                    secret = None
                else:
                    if secret_b.bits != secret.bits:
                        secret = None
        # the round's traffic is authenticated before any key leaves the link
        if not ch.authenticate_round():
            raise _Halt(LinkStatus.AUTH_FAILED,
                        f"authentication failed after block {block_id}; key quarantined")
        stats.auth_rounds += 1
        if secret is not None:
            ch.replenish(secret.reserved)
            stats.secret_bits += secret.l_sec_final
            stats.reserved_bits += secret.reserved.length
            stats.block_log.append(BlockSummary(block_id, secret.l_ver, secret.leak_ec,
                                                secret.qber, secret.l_sec_raw,
                                                secret.l_sec_final, span))
            if self.keep_keys:
                stats.secret_blocks.append(secret)


def run_link(params: LinkParams, duration_s: float, seed=0, **kwargs) -> LinkStats:
    return LinkPipeline(params, seed=seed, **kwargs).run(duration_s)
