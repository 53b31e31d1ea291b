"""Stochastic stand-in for a point-to-point QKD link.

A link is reduced to what post-processing sees: correlated sifted bits
arriving at a fixed average rate, with an error rate that wanders from one
time window to the next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Iterator

import numpy as np

from .keycore import BitString

PRNG_ALGORITHM = "numpy.random.PCG64"
DEFAULT_WINDOW_S = 60.0
_QBER_CEIL = math.nextafter(0.5, 0.0)


@dataclass(frozen=True)
class LinkParams:
    loss_db: float
    mu: float
    sifted_rate: float
    qber_mean: float
    qber_jitter: float = 0.0
    distance_km: float = 1.0
    name: str = "link"

    def __post_init__(self):
        if self.loss_db < 0:
            raise ValueError("loss_db must be non-negative")
        if not 0.0 < self.mu < 1.0:
            raise ValueError(f"mu={self.mu} outside the weak-pulse regime (0, 1)")
        if self.sifted_rate <= 0:
            raise ValueError("sifted_rate must be positive")
        if not 0.0 <= self.qber_mean < 0.5:
            raise ValueError(f"qber_mean={self.qber_mean} outside [0, 0.5)")
        if self.qber_jitter < 0:
            raise ValueError("qber_jitter must be non-negative")
        if self.distance_km <= 0:
            raise ValueError("distance_km must be positive")

    @property
    def eta(self) -> float:
        return transmittance_from_db(self.loss_db)

    def as_dict(self) -> dict:
        return asdict(self)


# The two links of the Moscow demonstration. QBER levels are a read of the
# "few percent" traces, not measured values.
POLARIZATION_LINK = LinkParams(loss_db=13.0, mu=0.02, sifted_rate=100.0,
                               qber_mean=0.03, qber_jitter=0.005,
                               distance_km=30.0, name="polarization")
PHASE_LINK = LinkParams(loss_db=7.0, mu=0.03, sifted_rate=200.0,
                        qber_mean=0.03, qber_jitter=0.005,
                        distance_km=15.0, name="phase")


@dataclass(frozen=True)
class SiftedPair:
    alice: BitString
    bob: BitString
    true_qber: float
    duration_s: float


def transmittance_from_db(loss_db: float) -> float:
    if loss_db < 0 or math.isnan(loss_db):
        raise ValueError(f"loss must be non-negative, got {loss_db}")
    return 10.0 ** (-loss_db / 10.0)


def two_photon_prob(mu: float) -> float:
    """Poisson probability that a coherent pulse carries exactly two photons."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    return math.exp(-mu) * mu * mu / 2.0


def _window_qbers(params: LinkParams, windows: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(params.qber_mean, params.qber_jitter, size=windows)
    if params.qber_jitter == 0:
        q[:] = params.qber_mean
    return np.clip(q, 0.0, _QBER_CEIL)


def qber_timeseries(params: LinkParams, windows: int, seed: int) -> np.ndarray:
    """Per-window QBER: Gaussian around the mean, clamped to [0, 0.5)."""
    if windows < 1:
        raise ValueError("windows must be >= 1")
    return _window_qbers(params, windows, np.random.default_rng(seed))


def _flip_pair(alice_bits: np.ndarray, q: float, rng: np.random.Generator) -> np.ndarray:
    flips = rng.random(alice_bits.size) < q
    return alice_bits ^ flips.astype(np.uint8)


def generate_sifted_pair(params: LinkParams, block_len: int, seed: int) -> SiftedPair:
    if block_len < 1:
        raise ValueError("block_len must be >= 1")
    rng = np.random.default_rng(seed)
    q_window = float(_window_qbers(params, 1, rng)[0])
    alice = rng.integers(0, 2, size=block_len, dtype=np.uint8)
    bob = _flip_pair(alice, q_window, rng)
    flipped = int(np.count_nonzero(alice != bob))
    return SiftedPair(alice=BitString.from_bits(alice), bob=BitString.from_bits(bob),
                      true_qber=flipped / block_len,
                      duration_s=block_len / params.sifted_rate)


@dataclass(frozen=True)
class SiftedWindow:
    index: int
    start_s: float
    qber: float
    pair: SiftedPair


def sifted_stream(params: LinkParams, duration_s: float, seed: int,
                  window_s: float = DEFAULT_WINDOW_S) -> Iterator[SiftedWindow]:
    """Yield the sifted key produced in each window of a run.

    Bits per window follow the sifted rate exactly on average: window ``i``
    carries ``floor(rate*(i+1)*w) - floor(rate*i*w)`` bits. A trailing
    partial window is included.
    """
    if duration_s < 0:
        raise ValueError("duration must be non-negative")
    windows = math.ceil(duration_s / window_s) if duration_s > 0 else 0
    if windows == 0:
        return
    rng = np.random.default_rng(seed)
    qbers = _window_qbers(params, windows, rng)
    produced = 0
    for i in range(windows):
        end = min((i + 1) * window_s, duration_s)
        target = math.floor(params.sifted_rate * end + 1e-9)
        count = target - produced
        produced = target
        alice = rng.integers(0, 2, size=count, dtype=np.uint8)
        bob = _flip_pair(alice, float(qbers[i]), rng)
        realized = float(np.count_nonzero(alice != bob)) / count if count else 0.0
        pair = SiftedPair(BitString.from_bits(alice), BitString.from_bits(bob),
                          realized, end - i * window_s)
        yield SiftedWindow(i, i * window_s, float(qbers[i]), pair)
