"""Measure blind reconciliation efficiency and convergence on simulated frames.

    python scripts/calibrate_reconciliation.py --qber 0.01 0.03 0.05 --frames 100
"""

import argparse
import time

import numpy as np

from qkdnet.authchan import AuthenticatedChannel
from qkdnet.keycore import BitString, binary_entropy
from qkdnet.reconcile import Reconciler


def run(q, frames, seed):
    rng = np.random.default_rng(seed)
    chan = AuthenticatedChannel.provision(rng)
    rec = Reconciler(rng=rng)
    k = rec.frame_bits
    conv = correct = leak = 0
    rounds = []
    t0 = time.perf_counter()
    for _ in range(frames):
        a = rng.integers(0, 2, k, dtype=np.uint8)
        b = a ^ (rng.random(k) < q).astype(np.uint8)
        res = rec.reconcile(BitString.from_bits(a), BitString.from_bits(b), chan.a, chan.b)
        conv += res.converged
        correct += res.converged and np.array_equal(res.corrected.bits, a)
        leak += res.leak_ec
        rounds.append(res.rounds)
    elapsed = time.perf_counter() - t0
    ratio = leak / (frames * k)
    print(f"q={q:.3f} converged={conv/frames:.3f} correct={correct/frames:.3f} "
          f"leak/k={ratio:.4f} f={ratio/binary_entropy(q):.3f} "
          f"bound={1.3*binary_entropy(q):.4f} mean_rounds={np.mean(rounds):.1f} "
          f"time={elapsed:.1f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--qber", type=float, nargs="+", default=[0.01, 0.03, 0.05])
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    for q in args.qber:
        run(q, args.frames, args.seed)


if __name__ == "__main__":
    main()
