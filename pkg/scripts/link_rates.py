"""Secret key rate of the two reference links over one simulated hour.

    python scripts/link_rates.py --duration 3600 --seed 2017
"""

import argparse
import time

from qkdnet.linksim import PHASE_LINK, POLARIZATION_LINK
from qkdnet.pipeline import run_link


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--duration", type=float, default=3600.0)
    ap.add_argument("--seed", type=int, default=2017)
    args = ap.parse_args()
    for params in (POLARIZATION_LINK, PHASE_LINK):
        t0 = time.perf_counter()
        st = run_link(params, args.duration, seed=args.seed)
        print(f"{params.name:>14}: {params.loss_db:4.1f} dB mu={params.mu:.2f}  "
              f"sifted {st.rate(st.sifted_bits):6.1f} bit/s  "
              f"secret {st.secret_rate:6.1f} bit/s  "
              f"frames {st.frames} (failed {st.failed_frames})  blocks {st.blocks}  "
              f"status {st.status.value}  [{time.perf_counter() - t0:.1f}s]")


if __name__ == "__main__":
    main()
