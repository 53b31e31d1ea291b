"""Classical channel between two nodes with Wegman-Carter style authentication.

Every frame is recorded in a per-direction transcript. At the end of a
post-processing round each side tags its outgoing transcript with a Toeplitz
hash encrypted by a 40-bit one-time pad drawn from the shared pool, and the
peer checks the tag against what it actually received.

Wire frame: 4-byte big-endian payload length, version byte (0x01), type
byte, payload.
"""

from __future__ import annotations

import enum
import struct
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .keycore import BitString
from .privacy import toeplitz_bits

PROTOCOL_VERSION = 0x01
HEADER = struct.Struct(">IBB")
L_AUTH = 40
BOOTSTRAP_BITS = 1024


class MsgType(enum.IntEnum):
    PING = 0x00
    SYNDROME = 0x10
    DISCLOSURE = 0x11
    VERIFY_TAG = 0x12
    VERIFY_VERDICT = 0x13
    PA_SEED = 0x20
    BLOCK_ACCOUNTING = 0x21
    AUTH_TAG = 0x30
    AUTH_VERDICT = 0x31
    RELAY_CIPHERTEXT = 0x40


# authentication traffic itself is not part of what gets authenticated
_UNTRANSCRIBED = {MsgType.AUTH_TAG, MsgType.AUTH_VERDICT}


class ChannelClosedError(RuntimeError):
    pass


class PoolExhaustedError(RuntimeError):
    pass


class AuthenticationError(RuntimeError):
    pass


class FrameError(ValueError):
    pass


def encode_frame(type_code: int, payload: bytes) -> bytes:
    return HEADER.pack(len(payload), PROTOCOL_VERSION, type_code) + payload


def decode_frame(frame: bytes) -> tuple[int, bytes]:
    if len(frame) < HEADER.size:
        raise FrameError("frame shorter than header")
    length, version, type_code = HEADER.unpack_from(frame)
    if version != PROTOCOL_VERSION:
        raise FrameError(f"unsupported protocol version {version:#04x}")
    if len(frame) != HEADER.size + length:
        raise FrameError(f"length field {length} disagrees with frame size {len(frame)}")
    return type_code, frame[HEADER.size:]


class Direction(enum.Enum):
    A_TO_B = "a_to_b"
    B_TO_A = "b_to_a"


class ChannelTranscript:
    """Append-only record of the frames in one direction for the current round."""

    def __init__(self, direction: Direction):
        self.direction = direction
        self._buf = bytearray()
        self._lock = threading.Lock()

    def append(self, data: bytes) -> None:
        with self._lock:
            self._buf += data

    @property
    def bytes(self) -> bytes:
        with self._lock:
            return bytes(self._buf)

    def bitstring(self) -> BitString:
        return BitString(self.bytes, 8 * len(self))

    def reset(self) -> None:
        with self._lock:
            self._buf.clear()

    def __len__(self) -> int:
        return len(self._buf)


class AuthKeyPool:
    """Secret bits reserved for MAC one-time pads, consumed strictly in order."""

    def __init__(self, initial: BitString | None = None):
        self._bits = np.zeros(0, dtype=np.uint8)
        self._cursor = 0
        self.consumed = 0
        self.deposited = 0
        self._lock = threading.Lock()
        if initial is not None:
            self.deposit(initial)

    def deposit(self, bits: BitString) -> None:
        with self._lock:
            self._bits = np.concatenate([self._bits[self._cursor:], bits.bits])
            self._cursor = 0
            self.deposited += bits.length

    def take(self, nbits: int) -> BitString:
        with self._lock:
            if self.remaining < nbits:
                raise PoolExhaustedError(
                    f"need {nbits} pad bits, pool holds {self.remaining}")
            out = self._bits[self._cursor:self._cursor + nbits]
            self._cursor += nbits
            self.consumed += nbits
            return BitString.from_bits(out)

    @property
    def remaining(self) -> int:
        return int(self._bits.size - self._cursor)

    @property
    def available(self) -> BitString:
        return BitString.from_bits(self._bits[self._cursor:])


def auth_seed_length(transcript_bits: int, l_auth: int = L_AUTH) -> int:
    return transcript_bits + l_auth - 1


def mac_tag(transcript: ChannelTranscript | BitString, seed: BitString,
            otp: BitString) -> BitString:
    """Toeplitz hash of the transcript, one-time padded with ``otp``."""
    data = transcript.bitstring() if isinstance(transcript, ChannelTranscript) else transcript
    if otp.length == 0:
        raise PoolExhaustedError("no pad bits supplied")
    digest = toeplitz_bits(data.bits, seed.bits, otp.length)
    return BitString.from_bits(digest ^ otp.bits)


def verify_round(local_transcript, remote_tag: BitString, seed: BitString,
                 otp: BitString) -> bool:
    return mac_tag(local_transcript, seed, otp) == remote_tag


@dataclass(frozen=True)
class Message:
    type: int
    payload: bytes


Tamper = Callable[[Direction, bytes], bytes]


class Endpoint:
    """One side of a channel: sends, receives and keeps its own transcripts."""

    def __init__(self, channel: AuthenticatedChannel, name: str,
                 outgoing: Direction, incoming: Direction, pool: AuthKeyPool):
        self.channel = channel
        self.name = name
        self.out_dir = outgoing
        self.in_dir = incoming
        self.sent = ChannelTranscript(outgoing)
        self.received = ChannelTranscript(incoming)
        self.pool = pool
        self.inbox: deque[bytes] = deque()
        self.bytes_sent = 0

    @property
    def peer(self) -> Endpoint:
        return self.channel.b if self is self.channel.a else self.channel.a

    def send(self, type_code: int, payload: bytes = b"") -> bytes:
        return self.channel._transmit(self, int(type_code), bytes(payload))

    def recv(self, expect: Optional[int] = None) -> Message:
        if not self.inbox:
            raise ChannelClosedError(f"{self.name}: nothing to receive")
        frame = self.inbox.popleft()
        type_code, payload = decode_frame(frame)
        if type_code not in _UNTRANSCRIBED:
            self.received.append(frame)
        if expect is not None and type_code != expect:
            raise FrameError(f"{self.name}: expected type {expect:#04x}, got {type_code:#04x}")
        return Message(type_code, payload)


class AuthenticatedChannel:
    """In-process reliable ordered link between endpoints ``a`` and ``b``.

    Both endpoints hold their own copy of the shared pad pool. ``tamper`` (if
    set) sees every frame in transit and may rewrite it, modelling an active
    adversary on the wire.
    """

    def __init__(self, shared_secret: BitString, rng: np.random.Generator,
                 l_auth: int = L_AUTH, names: tuple[str, str] = ("a", "b"),
                 tamper: Optional[Tamper] = None):
        self.l_auth = l_auth
        self.rng = rng
        self.tamper = tamper
        self.a = Endpoint(self, names[0], Direction.A_TO_B, Direction.B_TO_A,
                          AuthKeyPool(shared_secret))
        self.b = Endpoint(self, names[1], Direction.B_TO_A, Direction.A_TO_B,
                          AuthKeyPool(shared_secret))
        self.closed = False
        self.halted = False
        self.rounds_completed = 0
        self._lock = threading.Lock()

    @classmethod
    def provision(cls, rng: np.random.Generator, bootstrap_bits: int = BOOTSTRAP_BITS,
                  **kwargs) -> AuthenticatedChannel:
        """Channel whose pools start from freshly drawn pre-shared secret."""
        return cls(BitString.random(bootstrap_bits, rng), rng, **kwargs)

    def close(self) -> None:
        self.closed = True

    def _transmit(self, sender: Endpoint, type_code: int, payload: bytes) -> bytes:
        with self._lock:
            if self.closed:
                raise ChannelClosedError("channel is closed")
            frame = encode_frame(type_code, payload)
            if type_code not in _UNTRANSCRIBED:
                sender.sent.append(frame)
            sender.bytes_sent += len(frame)
            wire = frame if self.tamper is None else self.tamper(sender.out_dir, frame)
            sender.peer.inbox.append(wire)
            return frame

    def _tag_exchange(self, tagger: Endpoint, checker: Endpoint) -> bool:
        transcript = tagger.sent.bitstring()
        seed = BitString.random(auth_seed_length(transcript.length, self.l_auth), self.rng)
        tag = mac_tag(transcript, seed, tagger.pool.take(self.l_auth))
        tagger.send(MsgType.AUTH_TAG, struct.pack(">I", seed.length) + seed.data + tag.data)

        msg = checker.recv(MsgType.AUTH_TAG)
        otp = checker.pool.take(self.l_auth)
        try:
            (seed_len,) = struct.unpack_from(">I", msg.payload)
            seed_bytes = msg.payload[4:4 + (seed_len + 7) // 8]
            recv_seed = BitString(seed_bytes, seed_len)
            recv_tag = BitString(msg.payload[4 + len(seed_bytes):], self.l_auth)
            ok = (recv_seed.length == auth_seed_length(checker.received.bitstring().length,
                                                       self.l_auth)
                  and verify_round(checker.received, recv_tag, recv_seed, otp))
        except (ValueError, struct.error):
            ok = False
        checker.send(MsgType.AUTH_VERDICT, b"\x01" if ok else b"\x00")
        verdict = tagger.recv(MsgType.AUTH_VERDICT)
        return ok and verdict.payload == b"\x01"

    def authenticate_round(self) -> bool:
        """Tag both directions; on success reset transcripts, else halt the link.

        Each endpoint's pool is debited ``2*l_auth`` bits either way.
        """
        if self.halted:
            raise AuthenticationError("link halted after a failed authentication")
        ok_ab = self._tag_exchange(self.a, self.b)
        ok_ba = self._tag_exchange(self.b, self.a)
        if ok_ab and ok_ba:
            for ep in (self.a, self.b):
                ep.sent.reset()
                ep.received.reset()
            self.rounds_completed += 1
            return True
        self.halted = True
        return False

    def replenish(self, reserved: BitString) -> None:
        """Add freshly reserved secret bits to both endpoints' pools."""
        self.a.pool.deposit(reserved)
        self.b.pool.deposit(reserved)


def flip_byte_tamper(direction: Direction, frame_index: int, byte_offset: int,
                     mask: int = 0x01) -> Tamper:
    """Adversary that flips bits of one byte of the ``frame_index``-th frame
    travelling in ``direction`` (counting only that direction's frames)."""
    seen = {"n": 0}

    def tamper(d: Direction, frame: bytes) -> bytes:
        if d is not direction:
            return frame
        idx = seen["n"]
        seen["n"] += 1
        if idx != frame_index:
            return frame
        buf = bytearray(frame)
        pos = HEADER.size + byte_offset if len(frame) > HEADER.size else len(frame) - 1
        pos = min(pos, len(buf) - 1)
        buf[pos] ^= mask
        return bytes(buf)

    return tamper
