import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qkdnet.authchan import (BOOTSTRAP_BITS, HEADER, L_AUTH, AuthenticatedChannel, AuthKeyPool,
                             AuthenticationError, ChannelClosedError, ChannelTranscript, Direction,
                             FrameError, MsgType, PoolExhaustedError, auth_seed_length,
                             decode_frame, encode_frame, flip_byte_tamper, mac_tag, verify_round)
from qkdnet.keycore import BitString


def chan(seed=0, **kw):
    return AuthenticatedChannel.provision(np.random.default_rng(seed), **kw)


def chatter(ch, rounds=3, rng=None):
    rng = rng or np.random.default_rng(1)
    for i in range(rounds):
        ch.a.send(MsgType.SYNDROME, rng.bytes(40 + i))
        ch.b.recv(MsgType.SYNDROME)
        ch.b.send(MsgType.DISCLOSURE, rng.bytes(7))
        ch.a.recv(MsgType.DISCLOSURE)


class TestFraming:
    def test_header_only_frame(self):
        frame = encode_frame(MsgType.PING, b"")
        assert len(frame) == 6
        assert frame == bytes([0, 0, 0, 0, 0x01, 0x00])

    def test_hundred_byte_payload(self):
        frame = encode_frame(MsgType.PA_SEED, bytes(range(100)))
        assert len(frame) == 106
        assert frame[:6] == struct.pack(">IBB", 100, 1, 0x20)

    @given(st.sampled_from(list(MsgType)), st.binary(max_size=300))
    def test_roundtrip(self, t, payload):
        assert decode_frame(encode_frame(t, payload)) == (t, payload)

    def test_bad_frames(self):
        with pytest.raises(FrameError):
            decode_frame(b"\x00\x00")
        with pytest.raises(FrameError):
            decode_frame(HEADER.pack(0, 2, 0))
        with pytest.raises(FrameError):
            decode_frame(HEADER.pack(5, 1, 0) + b"abc")

    def test_type_codes(self):
        assert [int(t) for t in MsgType] == [0x00, 0x10, 0x11, 0x12, 0x13, 0x20, 0x21,
                                              0x30, 0x31, 0x40]


class TestMessaging:
    def test_in_order_delivery_and_transcripts(self):
        ch = chan()
        ch.a.send(MsgType.PING, b"one")
        ch.a.send(MsgType.PING, b"two")
        assert ch.b.recv().payload == b"one"
        assert ch.b.recv(MsgType.PING).payload == b"two"
        assert ch.a.sent.bytes == ch.b.received.bytes
        assert ch.a.sent.direction is Direction.A_TO_B

    def test_send_after_close(self):
        ch = chan()
        ch.close()
        with pytest.raises(ChannelClosedError):
            ch.a.send(MsgType.PING)

    def test_unexpected_type(self):
        ch = chan()
        ch.a.send(MsgType.PING)
        with pytest.raises(FrameError):
            ch.b.recv(MsgType.SYNDROME)

    def test_empty_inbox(self):
        with pytest.raises(ChannelClosedError):
            chan().b.recv()


class TestMac:
    def test_empty_transcript_zero_pad(self, rng):
        seed = BitString.random(auth_seed_length(0), rng)
        assert mac_tag(BitString.zeros(0), seed, BitString.zeros(40)) == BitString.zeros(40)

    def test_complementary_pads(self, rng):
        t = ChannelTranscript(Direction.A_TO_B)
        t.append(rng.bytes(64))
        seed = BitString.random(auth_seed_length(len(t) * 8), rng)
        ones = BitString.from_bits(np.ones(40, dtype=np.uint8))
        assert mac_tag(t, seed, BitString.zeros(40)) ^ mac_tag(t, seed, ones) == ones

    def test_one_bit_change_always_detected(self, rng):
        msg = BitString.random(800, rng)
        flip = np.zeros(800, dtype=np.uint8)
        flip[401] = 1
        other = msg ^ BitString.from_bits(flip)
        otp = BitString.random(40, rng)
        for _ in range(1000):
            seed = BitString.random(auth_seed_length(800), rng)
            assert mac_tag(msg, seed, otp) != mac_tag(other, seed, otp)

    def test_verify_round_function(self, rng):
        msg = BitString.random(100, rng)
        seed, otp = BitString.random(139, rng), BitString.random(40, rng)
        assert verify_round(msg, mac_tag(msg, seed, otp), seed, otp)

    def test_missing_pad(self, rng):
        with pytest.raises(PoolExhaustedError):
            mac_tag(BitString.zeros(8), BitString.random(8, rng), BitString.zeros(0))


class TestPool:
    def test_take_in_order(self):
        pool = AuthKeyPool(BitString.from_str("1100101"))
        assert pool.take(3) == BitString.from_str("110")
        assert pool.available == BitString.from_str("0101")
        pool.deposit(BitString.from_str("11"))
        assert pool.take(6) == BitString.from_str("010111")
        assert (pool.consumed, pool.deposited, pool.remaining) == (9, 9, 0)
        with pytest.raises(PoolExhaustedError):
            pool.take(1)


class TestRounds:
    def test_honest_round(self):
        ch = chan()
        chatter(ch)
        assert ch.authenticate_round()
        assert len(ch.a.sent) == len(ch.b.received) == 0
        for ep in (ch.a, ch.b):
            assert ep.pool.consumed == 2 * L_AUTH

    def test_pool_conservation_with_reservation(self):
        ch = chan(3)
        rng = np.random.default_rng(9)
        rounds = 20
        for _ in range(rounds):
            chatter(ch, 2, rng)
            assert ch.authenticate_round()
            ch.replenish(BitString.random(2 * L_AUTH, rng))
        for ep in (ch.a, ch.b):
            assert ep.pool.consumed == rounds * 2 * L_AUTH
            assert ep.pool.remaining == BOOTSTRAP_BITS
        assert ch.a.pool.available == ch.b.pool.available

    def test_bootstrap_runs_out_without_reservation(self):
        ch = chan()
        for _ in range(BOOTSTRAP_BITS // (2 * L_AUTH)):
            assert ch.authenticate_round()
        with pytest.raises(PoolExhaustedError):
            ch.authenticate_round()

    @pytest.mark.parametrize("direction", list(Direction))
    def test_tampering_detected_and_halts(self, direction):
        ch = chan(tamper=flip_byte_tamper(direction, frame_index=1, byte_offset=3))
        chatter(ch)
        assert not ch.authenticate_round()
        assert ch.halted
        with pytest.raises(AuthenticationError):
            ch.authenticate_round()

    def test_transcripts_symmetric_without_tampering(self):
        ch = chan()
        chatter(ch, 4)
        assert ch.a.sent.bytes == ch.b.received.bytes
        assert ch.b.sent.bytes == ch.a.received.bytes
