"""Oracle-denoiser sampling under a few plan variants.

The oracle returns the exact noise, so any PSNR loss comes from the plan
itself (scale changes, initial noise level), not from a learned model.

    python scripts/oracle_pyramid_demo.py --size 64 --seeds 5
"""

import argparse

import numpy as np

from sadm.quality import PSNR_CAP_DB, psnr
from sadm.sampler import DEFAULT_FACTORS, OracleDenoiser, make_pyramid_plan, pyramid_sample
from sadm.schedule import build_schedule


def test_image(seed, size):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.full((size, size, 3), 0.5)
    for c in range(3):
        for _ in range(4):
            fy, fx = rng.integers(0, 6, size=2)
            img[:, :, c] += 0.1 * np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return np.clip(img, 0, 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    s = build_schedule()
    shape = (args.size, args.size)
    variants = {
        "flat": dict(factors=[1] * 10),
        "pyramid coarse-to-fine": dict(factors=DEFAULT_FACTORS),
        "pyramid fine-to-coarse": dict(factors=DEFAULT_FACTORS, coarse_to_fine=False),
        "pyramid, unit-variance init": dict(factors=DEFAULT_FACTORS, unit_init=True),
    }
    for name, v in variants.items():
        unit = v.pop("unit_init", False)
        plan = make_pyramid_plan(s, 10, v.pop("factors"), base_shape=shape, **v)
        scores = []
        for seed in range(args.seeds):
            x0 = test_image(seed, args.size)
            out = pyramid_sample(plan, OracleDenoiser(x0, s), None, s, seed, base_shape=shape, unit_init=unit)
            scores.append(min(psnr(out, x0), PSNR_CAP_DB))
        print(f"{name:<30} PSNR mean {np.mean(scores):6.2f} dB  min {np.min(scores):6.2f} dB")


if __name__ == "__main__":
    main()
