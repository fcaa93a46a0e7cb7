"""Monte-Carlo check that E[x_t^2] tracks k_t^4 along the forward chain.

    python scripts/energy_law_mc.py --samples 10000 --ratio 0.999
"""

import argparse
import math

import numpy as np

from sadm.diffusion import NoiseDraw, forward_step, stream_id
from sadm.schedule import ScheduleConfig, build_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--dim", type=int, default=4)
    ap.add_argument("--ratio", type=float, default=0.999)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=100)
    args = ap.parse_args()

    s = build_schedule(ScheduleConfig(attenuation_ratio=args.ratio))
    n, d = args.samples, args.dim
    rng = np.random.default_rng(args.seed)
    x = np.where(rng.random((n, d)) < 0.5, -1.0, 1.0)

    print(f"{'t':>5} {'k_t^4':>12} {'MC mean':>12} {'z':>7}")
    worst = 0.0
    for t in range(1, s.T + 1):
        x = forward_step(x, t, s, NoiseDraw(args.seed, stream_id(t, "mc"), (n, d)))
        if t % args.every == 0 or t in (1, 10):
            e = (x**2).mean(axis=1)
            z = (e.mean() - s.k[t] ** 4) / (e.std(ddof=1) / math.sqrt(n))
            worst = max(worst, abs(z))
            print(f"{t:>5} {s.k[t] ** 4:>12.6f} {e.mean():>12.6f} {z:>7.2f}")
    print(f"max |z| = {worst:.2f}")


if __name__ == "__main__":
    main()
