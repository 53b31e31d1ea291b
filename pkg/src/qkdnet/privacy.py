"""Parameter estimation, secret-key length and Toeplitz privacy amplification."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .keycore import BitString, LengthMismatchError, SecurityParams, binary_entropy
from .linksim import two_photon_prob

Q_CRITICAL = 0.11


class EstimateInvalidError(ValueError):
    """Multiphoton emissions could account for every detection."""


class QberAbort(RuntimeError):
    def __init__(self, q1_hat: float, threshold: float = Q_CRITICAL):
        super().__init__(f"single-photon QBER {q1_hat:.4f} >= critical {threshold}")
        self.q1_hat = q1_hat
        self.threshold = threshold


class InsufficientKeyError(RuntimeError):
    pass


class SeedLengthError(ValueError):
    pass


class Stage(enum.Enum):
    SIFTED = "sifted"
    VERIFIED = "verified"
    SECRET = "secret"


@dataclass(frozen=True)
class KeyBlock:
    stage: Stage
    bits: BitString
    l_ver: int = 0
    leak_ec: int = 0
    qber: float = 0.0
    duration_s: float = 0.0
    l_sec_raw: int = 0
    l_sec_final: int = 0
    reserved: BitString = field(default_factory=lambda: BitString.zeros(0))

    def __post_init__(self):
        if self.stage is Stage.SECRET and self.bits.length != self.l_sec_final:
            raise ValueError("secret block length must equal l_sec_final")


@dataclass(frozen=True)
class SinglePhotonEstimate:
    y1_hat: float
    eta: float
    mu: float
    p2: float
    q1_hat: float = 0.0


def estimate_qber(bob_before: BitString, bob_after: BitString) -> float:
    if bob_before.length != bob_after.length:
        raise LengthMismatchError("keys before and after correction differ in length")
    if bob_before.length == 0:
        return 0.0
    return bob_before.hamming(bob_after) / bob_before.length


def estimate_y1(eta: float, mu: float) -> SinglePhotonEstimate:
    """Share of detections attributable to single-photon pulses.

    Pessimistic: every two-photon pulse is assumed detected by the adversary's
    photon-number splitting, and pulses with more photons are neglected.
    """
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta={eta} outside (0, 1]")
    p2 = two_photon_prob(mu)
    signal = eta * mu
    if signal <= p2:
        raise EstimateInvalidError(
            f"eta*mu={signal:.3e} does not exceed two-photon probability {p2:.3e}")
    return SinglePhotonEstimate(y1_hat=(signal - p2) / signal, eta=eta, mu=mu, p2=p2)


def estimate_q1(q: float, y1_hat: float, q_critical: float = Q_CRITICAL) -> float:
    """Error rate of single-photon pulses if every error happened on them."""
    if not 0.0 < y1_hat <= 1.0:
        raise ValueError(f"y1_hat={y1_hat} outside (0, 1]")
    if not 0.0 <= q < 0.5:
        raise ValueError(f"q={q} outside [0, 0.5)")
    q1 = q / y1_hat
    if q1 >= q_critical:
        raise QberAbort(q1, q_critical)
    return q1


def pa_penalty(eps_pa: float) -> float:
    return 5.0 * math.log2(1.0 / eps_pa)


def secret_key_length(l_ver: int, y1_hat: float, q1_hat: float, leak_ec: int,
                      eps_pa: float) -> int:
    if not 0.0 < eps_pa < 1.0:
        raise ValueError("eps_pa must lie in (0, 1)")
    if l_ver <= 0:
        return 0
    # q1_hat can exceed 1/2 only on aborted blocks; entropy is capped at 1 there
    h = binary_entropy(min(q1_hat, 0.5))
    raw = l_ver * y1_hat * (1.0 - h) - leak_ec - pa_penalty(eps_pa)
    return max(0, math.floor(raw))


def _toeplitz_direct(x: np.ndarray, seed: np.ndarray, out_len: int) -> np.ndarray:
    n = x.size
    rr = seed[::-1]
    ones = np.flatnonzero(x)
    out = np.empty(out_len, dtype=np.uint8)
    for i in range(out_len):
        start = out_len - 1 - i
        out[i] = int(rr[start:start + n][ones].sum()) & 1
    return out


_FFT_CHUNK = 1 << 16


def _toeplitz_fft(x: np.ndarray, seed: np.ndarray, out_len: int) -> np.ndarray:
    # chunking the input keeps every convolution sum <= _FFT_CHUNK, far
    # inside float64's exact-integer range after rounding
    n = x.size
    acc = np.zeros(out_len, dtype=np.uint8)
    r = seed.astype(np.float64)
    for j0 in range(0, n, _FFT_CHUNK):
        chunk = x[j0:j0 + _FFT_CHUNK]
        if not chunk.any():
            continue
        size = chunk.size
        a = n - 1 - j0 - (size - 1)
        b = out_len + n - 1 - j0
        seg = r[a:b]
        full = seg.size + size - 1
        nfft = 1 << (full - 1).bit_length()
        conv = np.fft.irfft(np.fft.rfft(seg, nfft) * np.fft.rfft(chunk.astype(np.float64), nfft), nfft)
        vals = np.rint(conv[size - 1:size - 1 + out_len]).astype(np.int64)
        acc ^= (vals & 1).astype(np.uint8)
    return acc


def toeplitz_bits(x: np.ndarray, seed: np.ndarray, out_len: int) -> np.ndarray:
    """Multiply ``x`` by the out_len x n Toeplitz matrix T[i, j] = seed[i - j + n - 1]."""
    n = x.size
    if out_len <= 0:
        raise ValueError("out_len must be positive")
    if seed.size != n + out_len - 1:
        raise SeedLengthError(
            f"seed needs {n + out_len - 1} bits for a {out_len}x{n} Toeplitz matrix, "
            f"got {seed.size}")
    if n == 0:
        return np.zeros(out_len, dtype=np.uint8)
    if out_len <= 128:
        return _toeplitz_direct(x, seed, out_len)
    return _toeplitz_fft(x, seed, out_len)


def toeplitz_hash(data: BitString, seed: BitString, out_len: int) -> BitString:
    return BitString.from_bits(toeplitz_bits(data.bits, seed.bits, out_len))


def pa_seed_length(l_ver: int, l_out: int) -> int:
    return l_ver + l_out - 1


def plan_secret_length(block: KeyBlock, est: SinglePhotonEstimate,
                       params: SecurityParams) -> tuple[int, float]:
    """Return ``(l_sec_raw, q1_hat)`` for a verified block (may raise QberAbort)."""
    q1 = estimate_q1(block.qber, est.y1_hat)
    return secret_key_length(block.l_ver, est.y1_hat, q1, block.leak_ec, params.eps_pa), q1


def privacy_amplify(block: KeyBlock, est: SinglePhotonEstimate, params: SecurityParams,
                    seed: BitString) -> KeyBlock:
    """Compress a verified block and split off the authentication reservation.

    The first ``2*l_auth`` hashed bits go to ``reserved`` (the MAC key pool);
    the rest is the usable secret key.
    """
    if block.stage is not Stage.VERIFIED:
        raise ValueError(f"expected a verified block, got {block.stage.value}")
    l_raw, q1 = plan_secret_length(block, est, params)
    reserve = 2 * params.l_auth
    if l_raw <= reserve:
        raise InsufficientKeyError(
            f"secret length {l_raw} does not exceed the {reserve}-bit reservation")
    if seed.length != pa_seed_length(block.bits.length, l_raw):
        raise SeedLengthError(
            f"PA seed must be {pa_seed_length(block.bits.length, l_raw)} bits, got {seed.length}")
    hashed = toeplitz_bits(block.bits.bits, seed.bits, l_raw)
    return replace(block, stage=Stage.SECRET,
                   bits=BitString.from_bits(hashed[reserve:]),
                   reserved=BitString.from_bits(hashed[:reserve]),
                   l_sec_raw=l_raw, l_sec_final=l_raw - reserve)
