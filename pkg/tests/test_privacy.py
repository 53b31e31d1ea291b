import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qkdnet.keycore import BitString, LengthMismatchError, SecurityParams
from qkdnet.privacy import (EstimateInvalidError, InsufficientKeyError, KeyBlock, QberAbort,
                            SeedLengthError, Stage, estimate_q1, estimate_qber, estimate_y1,
                            pa_penalty, pa_seed_length, plan_secret_length, privacy_amplify,
                            secret_key_length, toeplitz_bits, toeplitz_hash)

ETA_13DB = 10 ** -1.3


def oracle_key_length(l_ver, y1, q1, leak, eps_pa):
    # written independently: natural logs throughout
    h = 0.0 if q1 in (0.0, 1.0) else -(q1 * math.log(q1) + (1 - q1) * math.log(1 - q1)) / math.log(2)
    value = l_ver * y1 * (1 - h) - leak - 5 * math.log(1 / eps_pa) / math.log(2)
    return max(0, math.floor(value))


def oracle_toeplitz(x, seed, out_len):
    n = len(x)
    mat = np.array([[seed[i - j + n - 1] for j in range(n)] for i in range(out_len)], dtype=np.int64)
    return (mat @ np.asarray(x, dtype=np.int64)) % 2


class TestEstimates:
    def test_qber_counts(self):
        a = BitString.zeros(1000)
        b = BitString.from_bits(np.r_[np.ones(30), np.zeros(970)].astype(np.uint8))
        assert estimate_qber(a, a) == 0.0
        assert estimate_qber(a, b) == 0.03
        assert estimate_qber(a, BitString.from_bits(np.ones(1000, dtype=np.uint8))) == 1.0
        with pytest.raises(LengthMismatchError):
            estimate_qber(a, BitString.zeros(999))

    @pytest.mark.parametrize("eta,mu,y1", [(ETA_13DB, 0.02, 0.8044), (10 ** -0.7, 0.03, 0.9270)])
    def test_single_photon_share(self, eta, mu, y1):
        est = estimate_y1(eta, mu)
        assert est.y1_hat == pytest.approx(y1, abs=5e-4)
        assert est.y1_hat == pytest.approx((eta * mu - est.p2) / (eta * mu), rel=1e-12)

    def test_single_photon_limit(self):
        assert estimate_y1(1.0, 1e-6).y1_hat == pytest.approx(1.0, abs=1e-6)

    def test_multiphoton_dominated(self):
        with pytest.raises(EstimateInvalidError):
            estimate_y1(1e-5, 0.5)

    def test_q1(self):
        assert estimate_q1(0.0, 0.8) == 0.0
        assert estimate_q1(0.03, 0.8044) == pytest.approx(0.03730, abs=1e-4)
        with pytest.raises(QberAbort) as info:
            estimate_q1(0.10, 0.8)
        assert info.value.q1_hat == pytest.approx(0.125)


class TestKeyLength:
    def test_penalty(self):
        assert pa_penalty(1e-12) == pytest.approx(199.32, abs=5e-3)

    def test_reference_block(self):
        # exact single-photon estimates for 13 dB, mu=0.02, q=0.03
        est = estimate_y1(ETA_13DB, 0.02)
        q1 = estimate_q1(0.03, est.y1_hat)
        got = secret_key_length(2 ** 20, est.y1_hat, q1, 264998, 1e-12)
        assert got == pytest.approx(384514, abs=2)
        assert got == oracle_key_length(2 ** 20, est.y1_hat, q1, 264998, 1e-12)

    def test_degenerate_inputs(self):
        assert secret_key_length(0, 0.8, 0.03, 0, 1e-12) == 0
        assert secret_key_length(10 ** 6, 0.8, 0.5, 1000, 1e-12) == 0
        l = 123456
        assert secret_key_length(l, 0.9, 0.0, 0, 1e-12) == math.floor(l * 0.9 - 199.32)

    @given(st.integers(0, 2 ** 22), st.floats(0.01, 1.0), st.floats(0.0, 0.5),
           st.integers(0, 2 ** 20), st.floats(1e-15, 0.1))
    def test_matches_oracle(self, l_ver, y1, q1, leak, eps_pa):
        assert abs(secret_key_length(l_ver, y1, q1, leak, eps_pa)
                   - oracle_key_length(l_ver, y1, q1, leak, eps_pa)) <= 1

    def test_monotone_on_grid(self):
        base = dict(l_ver=2 ** 20, y1_hat=0.8, q1_hat=0.04, leak_ec=200000, eps_pa=1e-12)
        grids = {"q1_hat": np.linspace(0, 0.11, 23), "leak_ec": np.arange(0, 600000, 25000),
                 "l_ver": np.arange(0, 2 ** 21, 2 ** 16), "y1_hat": np.linspace(0.3, 1.0, 15)}
        for name, grid in grids.items():
            vals = [secret_key_length(**{**base, name: type(base[name])(g)}) for g in grid]
            diffs = np.diff(vals)
            if name in ("q1_hat", "leak_ec"):
                assert np.all(diffs <= 0), name
            else:
                assert np.all(diffs >= 0), name


class TestToeplitz:
    def test_identity_seed(self):
        x = BitString.from_str("1011001110")
        n = x.length
        seed = np.zeros(2 * n - 1, dtype=np.uint8)
        seed[n - 1] = 1
        assert toeplitz_hash(x, BitString.from_bits(seed), n) == x

    def test_zero_input(self, rng):
        seed = BitString.random(300 + 50 - 1, rng)
        assert toeplitz_hash(BitString.zeros(300), seed, 50) == BitString.zeros(50)

    def test_seed_length(self, rng):
        with pytest.raises(SeedLengthError):
            toeplitz_hash(BitString.zeros(10), BitString.random(12, rng), 4)

    @given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2 ** 32))
    def test_matches_dense_matrix(self, n, out_len, seed):
        r = np.random.default_rng(seed)
        x = r.integers(0, 2, n, dtype=np.uint8)
        s = r.integers(0, 2, n + out_len - 1, dtype=np.uint8)
        assert np.array_equal(toeplitz_bits(x, s, out_len), oracle_toeplitz(x, s, out_len))

    def test_fft_path_matches_dense(self, rng):
        # long outputs go through the FFT path; compare against a dense product
        n, out_len = 700, 300
        x = rng.integers(0, 2, n, dtype=np.uint8)
        s = rng.integers(0, 2, n + out_len - 1, dtype=np.uint8)
        assert np.array_equal(toeplitz_bits(x, s, out_len), oracle_toeplitz(x, s, out_len))

    def test_fft_path_large_is_linear(self, rng):
        n, out_len = 200_000, 150_000
        a = rng.integers(0, 2, n, dtype=np.uint8)
        b = rng.integers(0, 2, n, dtype=np.uint8)
        s = rng.integers(0, 2, n + out_len - 1, dtype=np.uint8)
        lhs = toeplitz_bits(a ^ b, s, out_len)
        assert np.array_equal(lhs, toeplitz_bits(a, s, out_len) ^ toeplitz_bits(b, s, out_len))
        # spot-check a few rows against direct parity
        for i in (0, 1, 77_777, out_len - 1):
            row = s[i:i + n][::-1]
            assert lhs[i] == int(row[np.flatnonzero(a ^ b)].sum() % 2)

    def test_no_collisions_for_distinct_inputs(self):
        r = np.random.default_rng(2024)
        a = r.integers(0, 2, 256, dtype=np.uint8)
        b = a.copy()
        b[17] ^= 1
        collisions = 0
        for _ in range(10 ** 4):
            s = r.integers(0, 2, 256 + 49, dtype=np.uint8)
            collisions += np.array_equal(toeplitz_bits(a, s, 50), toeplitz_bits(b, s, 50))
        assert collisions == 0


def verified_block(bits, qber=0.03, leak=0):
    return KeyBlock(Stage.VERIFIED, bits, l_ver=bits.length, leak_ec=leak, qber=qber)


class TestPrivacyAmplify:
    def test_split_and_lengths(self, rng):
        bits = BitString.random(20000, rng)
        block = verified_block(bits, leak=3000)
        est = estimate_y1(ETA_13DB, 0.02)
        params = SecurityParams()
        l_raw, _ = plan_secret_length(block, est, params)
        seed = BitString.random(pa_seed_length(bits.length, l_raw), rng)
        out = privacy_amplify(block, est, params, seed)
        assert out.stage is Stage.SECRET
        assert out.l_sec_raw == l_raw
        assert out.l_sec_final == l_raw - 80 == out.bits.length
        assert out.reserved.length == 80
        # conservation: reservation and key together are the full hash output
        assert out.reserved + out.bits == toeplitz_hash(bits, seed, l_raw)

    def test_reservation_boundary(self, rng):
        est = estimate_y1(1.0, 1e-6)
        # l*y1 - 199.32 floors to exactly 80 for l = 280
        block = verified_block(BitString.random(280, rng), qber=0.0)
        assert plan_secret_length(block, est, SecurityParams())[0] == 80
        with pytest.raises(InsufficientKeyError):
            privacy_amplify(block, est, SecurityParams(), BitString.random(359, rng))

    def test_reference_reservation(self, rng):
        est = estimate_y1(ETA_13DB, 0.02)
        block = verified_block(BitString.random(2 ** 20, rng), leak=264998)
        seed = BitString.random(pa_seed_length(2 ** 20, 384514), rng)
        out = privacy_amplify(block, est, SecurityParams(), seed)
        assert (out.l_sec_raw, out.l_sec_final) == (384514, 384434)
        assert out.reserved.length == 80

    def test_requires_verified_stage(self, rng):
        block = KeyBlock(Stage.SIFTED, BitString.random(1000, rng))
        with pytest.raises(ValueError):
            privacy_amplify(block, estimate_y1(0.5, 0.1), SecurityParams(), BitString.zeros(1))

    def test_abort_on_high_q1(self, rng):
        block = verified_block(BitString.random(5000, rng), qber=0.1)
        with pytest.raises(QberAbort):
            plan_secret_length(block, estimate_y1(ETA_13DB, 0.02), SecurityParams())

    def test_wrong_seed_length(self, rng):
        block = verified_block(BitString.random(5000, rng), qber=0.0)
        with pytest.raises(SeedLengthError):
            privacy_amplify(block, estimate_y1(1.0, 1e-6), SecurityParams(), BitString.zeros(10))

    def test_secret_block_length_invariant(self):
        with pytest.raises(ValueError):
            KeyBlock(Stage.SECRET, BitString.zeros(5), l_sec_final=4)
