"""Sparse binary LDPC codes and a syndrome-domain sum-product decoder.

Codes are described by their edge list sorted by check node, which is all
the decoder needs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .keycore import BitString, LengthMismatchError


class CodeConstructionError(RuntimeError):
    pass


# Node-perspective variable degree mixes, keyed by the highest rate they are
# used for. Tuned empirically on 4096-bit frames with the blind schedule.
_VAR_DEGREE_PROFILES = (
    (0.55, {2: 0.45, 3: 0.35, 8: 0.20}),
    (0.65, {2: 0.45, 3: 0.38, 8: 0.17}),
    (0.78, {2: 0.40, 3: 0.45, 8: 0.15}),
    (1.00, {2: 0.30, 3: 0.58, 8: 0.12}),
)


def _var_degree_profile(rate: float) -> dict[int, float]:
    for upper, profile in _VAR_DEGREE_PROFILES:
        if rate <= upper:
            return profile
    return _VAR_DEGREE_PROFILES[-1][1]


@dataclass(frozen=True, eq=False)
class LdpcCode:
    n: int
    m: int
    rows: np.ndarray  # check index per edge, sorted ascending
    cols: np.ndarray  # variable index per edge
    seed: int

    @property
    def rate(self) -> float:
        return 1.0 - self.m / self.n

    @cached_property
    def id(self) -> str:
        digest = hashlib.sha256(self.rows.tobytes() + self.cols.tobytes())
        return f"ldpc-{self.n}-{self.m}-{digest.hexdigest()[:12]}"

    @property
    def num_edges(self) -> int:
        return int(self.rows.size)

    @cached_property
    def check_ptr(self) -> np.ndarray:
        return np.searchsorted(self.rows, np.arange(self.m + 1)).astype(np.int64)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        data = np.ones(self.rows.size, dtype=np.uint8)
        return sp.csr_matrix((data, (self.rows, self.cols)), shape=(self.m, self.n))

    def var_degrees(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n)

    def check_degrees(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.m)

    def has_4_cycles(self) -> bool:
        h = self.matrix.astype(np.int32)
        overlap = (h.T @ h).tocoo()
        off = overlap.row != overlap.col
        return bool(np.any(overlap.data[off] >= 2))

    def syndrome_bits(self, bits: np.ndarray) -> np.ndarray:
        vals = bits[self.cols].astype(np.int64)
        return (np.add.reduceat(vals, self.check_ptr[:-1]) & 1).astype(np.uint8)


def _degree_sequence(n: int, profile: dict[int, float]) -> np.ndarray:
    degrees = sorted(profile)
    counts = [int(round(profile[d] * n)) for d in degrees]
    counts[0] += n - sum(counts)
    return np.repeat(np.array(degrees), counts)


def build_code(n: int, rate: float, seed: int) -> LdpcCode:
    """Construct a random irregular LDPC code, deterministic in ``(n, rate, seed)``.

    Edges are placed variable by variable onto the least-loaded checks that do
    not close a length-4 cycle, so the Tanner graph has girth >= 6 unless the
    size forces a fallback (then the least-loaded check is used regardless).
    """
    return _build_code_cached(int(n), round(float(rate), 12), int(seed))


@lru_cache(maxsize=64)
def _build_code_cached(n: int, rate: float, seed: int) -> LdpcCode:
    if not 0.0 < rate < 1.0:
        raise ValueError(f"rate must be in (0, 1), got {rate}")
    m_exact = n * (1.0 - rate)
    m = int(round(m_exact))
    if abs(m - m_exact) > 1e-6 or m < 1:
        raise ValueError(f"n*(1-rate) = {m_exact} is not a positive integer")
    if m < 2:
        raise CodeConstructionError("need at least 2 checks for degree-2 variables")

    rng = np.random.default_rng([seed, n, m])
    var_deg = np.minimum(_degree_sequence(n, _var_degree_profile(rate)), m)
    # degree-2 variables beyond m-1 would have to close cycles among
    # themselves, which yields very light codewords
    excess = int(np.sum(var_deg == 2)) - (m - 1)
    if excess > 0:
        var_deg[np.flatnonzero(var_deg == 2)[:excess]] = min(3, m)
    var_deg = var_deg[rng.permutation(n)]
    if int(var_deg.sum()) < 2 * m:
        raise CodeConstructionError(
            f"{int(var_deg.sum())} edges cannot give {m} checks degree >= 2")

    check_vars: list[list[int]] = [[] for _ in range(m)]
    var_checks: list[list[int]] = [[] for _ in range(n)]
    load = np.zeros(m, dtype=np.int64)

    def connect(v: int, c: int) -> None:
        var_checks[v].append(c)
        check_vars[c].append(v)
        load[c] += 1

    # degree-2 variables form a staircase over a random check order
    chain = rng.permutation(m)
    for i, v in enumerate(np.flatnonzero(var_deg == 2)):
        connect(int(v), int(chain[i]))
        connect(int(v), int(chain[i + 1]))

    # tiny random tie-breaker so equal loads are chosen uniformly
    jitter = rng.random(m) * 0.5
    rest = np.flatnonzero(var_deg > 2)
    rest = rest[np.argsort(-var_deg[rest], kind="stable")]
    for v in rest:
        v = int(v)
        blocked = np.zeros(m, dtype=bool)
        for _ in range(var_deg[v]):
            score = load + jitter
            score[blocked] = np.inf
            c = int(np.argmin(score))
            if not np.isfinite(score[c]):
                # every check closes a 4-cycle: settle for a simple edge
                score = load + jitter
                score[var_checks[v]] = np.inf
                c = int(np.argmin(score))
            connect(v, c)
            jitter[c] = rng.random() * 0.5
            blocked[c] = True
            for u in check_vars[c]:
                blocked[var_checks[u]] = True

    if load.min() < 2:
        raise CodeConstructionError("degree constraints unsatisfiable at this size")
    rows = np.repeat(np.arange(m), load)
    cols = np.concatenate([np.sort(np.array(vs, dtype=np.int64)) for vs in check_vars])
    return LdpcCode(n=n, m=m, rows=rows.astype(np.int64), cols=cols, seed=seed)


def compute_syndrome(code: LdpcCode, key: BitString) -> BitString:
    if key.length != code.n:
        raise LengthMismatchError(f"key has {key.length} bits, code expects {code.n}")
    return BitString.from_bits(code.syndrome_bits(key.bits))


_LLR_CLIP = 1e-15


class BPResult(NamedTuple):
    hard: np.ndarray
    converged: bool
    posterior: np.ndarray
    iterations: int
    c2v: np.ndarray


def bp_decode_llr(code: LdpcCode, prior: np.ndarray, syndrome: np.ndarray,
                  max_iter: int = 60, c2v: np.ndarray | None = None,
                  stall: int | None = None) -> BPResult:
    """Sum-product on prior LLRs (positive favours 0) against a target syndrome.

    ``c2v`` optionally warm-starts the check-to-variable messages from an
    earlier run. With ``stall`` set, decoding gives up early once the number
    of unsatisfied checks has not reached a new minimum for that many
    iterations. Hard decisions at LLR exactly zero resolve to 0.
    """
    rows, cols = code.rows, code.cols
    starts = code.check_ptr[:-1]
    edge_sign_s = (1.0 - 2.0 * syndrome.astype(np.float64))[rows]
    prior = np.asarray(prior, dtype=np.float64)
    if c2v is None:
        c2v = np.zeros(rows.size)

    posterior = prior + np.bincount(cols, weights=c2v, minlength=code.n)
    hard = (posterior < 0).astype(np.uint8)
    if np.array_equal(code.syndrome_bits(hard), syndrome):
        return BPResult(hard, True, posterior, 0, c2v)

    best, best_it = code.m + 1, 0
    for it in range(1, max_iter + 1):
        v2c = posterior[cols] - c2v
        t = np.tanh(0.5 * v2c)
        neg = (t < 0).astype(np.int64)
        logmag = np.log(np.clip(np.abs(t), 1e-300, 1.0))
        tot_log = np.add.reduceat(logmag, starts)
        tot_neg = np.add.reduceat(neg, starts)
        ext_mag = np.minimum(np.exp(tot_log[rows] - logmag), 1.0 - _LLR_CLIP)
        ext_sign = 1.0 - 2.0 * ((tot_neg[rows] - neg) & 1)
        c2v = 2.0 * np.arctanh(ext_mag * ext_sign * edge_sign_s)

        posterior = prior + np.bincount(cols, weights=c2v, minlength=code.n)
        hard = (posterior < 0).astype(np.uint8)
        unsat = int(np.count_nonzero(code.syndrome_bits(hard) != syndrome))
        if unsat == 0:
            return BPResult(hard, True, posterior, it, c2v)
        if unsat < best:
            best, best_it = unsat, it
        elif stall is not None and it - best_it >= stall:
            return BPResult(hard, False, posterior, it, c2v)
    return BPResult(hard, False, posterior, max_iter, c2v)


def bp_decode(code: LdpcCode, noisy: BitString, target_syndrome: BitString,
              llr_prior, max_iter: int = 60) -> tuple[BitString, bool]:
    """Decode ``noisy`` towards the word whose syndrome is ``target_syndrome``.

    ``llr_prior`` is the channel LLR magnitude, either a scalar or one value
    per position (0 marks a position with no channel information).
    """
    if noisy.length != code.n:
        raise LengthMismatchError(f"noisy word has {noisy.length} bits, code expects {code.n}")
    if target_syndrome.length != code.m:
        raise LengthMismatchError(
            f"syndrome has {target_syndrome.length} bits, code expects {code.m}")
    mag = np.broadcast_to(np.asarray(llr_prior, dtype=np.float64), (code.n,))
    prior = mag * (1.0 - 2.0 * noisy.bits.astype(np.float64))
    hard, ok, *_ = bp_decode_llr(code, prior, np.asarray(target_syndrome.bits),
                                 max_iter=max_iter)
    if ok and np.array_equal(hard, noisy.bits):
        return noisy, True
    return BitString.from_bits(hard), ok


def llr_from_qber(q: float) -> float:
    if not 0.0 < q < 0.5:
        raise ValueError(f"q must be in (0, 0.5), got {q}")
    return float(np.log((1.0 - q) / q))


def gf2_rank(dense: np.ndarray) -> int:
    """Rank over GF(2) of a 0/1 matrix (rows are packed into Python ints)."""
    if dense.size == 0:
        return 0
    m = np.asarray(dense, dtype=np.uint8)
    if m.shape[0] < m.shape[1]:
        m = m.T
    packed = np.packbits(m, axis=1)
    rows = [int.from_bytes(r.tobytes(), "big") for r in packed]
    rank = 0
    pivots: dict[int, int] = {}
    for r in rows:
        while r:
            top = r.bit_length() - 1
            if top in pivots:
                r ^= pivots[top]
            else:
                pivots[top] = r
                rank += 1
                break
    return rank
