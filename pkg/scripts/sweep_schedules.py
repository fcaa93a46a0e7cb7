"""Compare signal decay across attenuation ratios.

    python scripts/sweep_schedules.py --ratios 0.99,0.999,0.9999 --out runs/sweep
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from sadm.schedule import ScheduleConfig, build_schedule, schedule_to_table, table_to_csv

CHECKPOINTS = (1, 10, 100, 250, 500, 750, 1000)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ratios", default="0.99,0.999,0.9999")
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    base = ScheduleConfig(total_steps=args.steps)
    ratios = [float(r) for r in args.ratios.split(",")]
    scheds = {r: build_schedule(replace(base, attenuation_ratio=r), on_infeasible="collapse") for r in ratios}
    ts = [t for t in CHECKPOINTS if t <= args.steps]

    print("signal_coef S_t")
    print("t".rjust(6) + "".join(f"{r:>14g}" for r in ratios))
    for t in ts:
        print(f"{t:>6}" + "".join(f"{scheds[r].signal_coef[t]:>14.4e}" for r in ratios))
    print("\nk_t^4 (expected energy of x_t)")
    for t in ts:
        print(f"{t:>6}" + "".join(f"{scheds[r].k[t] ** 4:>14.4e}" for r in ratios))
    for r, s in scheds.items():
        if s.collapse_step is not None:
            print(f"\nratio {r:g}: recurrence infeasible from t={s.collapse_step}; a_t set to 0 from there")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        for r, s in scheds.items():
            (args.out / f"schedule_ratio_{r:g}.csv").write_text(table_to_csv(schedule_to_table(s)))
        summary = {f"{r:g}": {"collapse_step": s.collapse_step, "S_T": float(s.signal_coef[-1])} for r, s in scheds.items()}
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
