"""Command-line entry point: ``sadm <command> [options]``.

Exit codes: 0 success, 1 a verification check failed, 2 usage or input error.
The seed falls back to ``$SADM_SEED`` and then to 0.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .diffusion import NoiseDraw, forward_marginal, stream_id
from .image import (
    ImageTensor,
    PNGDecodeError,
    clamp,
    pad_to_multiple,
    read_png_file,
    unpad,
    write_png_file,
)
from .prior import DEFAULT_GAMMA, assemble_condition, dehaze_prior, hist_equalize
from .quality import PSNR_CAP_DB, psnr, ssim
from .sampler import DEFAULT_FACTORS, OracleDenoiser, make_pyramid_plan, pyramid_sample
from .schedule import (
    InfeasibleScheduleError,
    ScheduleConfig,
    build_schedule,
    schedule_to_table,
    table_to_csv,
    table_to_json,
)
from .verify import SUITES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SADM_SEED")
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise UsageError(f"SADM_SEED={env!r} is not an integer")
    return 0


def _config(args) -> ScheduleConfig:
    return ScheduleConfig(
        total_steps=args.steps,
        attenuation_ratio=args.ratio,
        b_sq_start=args.b2_start,
        b_sq_end=args.b2_end,
        degenerate_ddpm=args.ddpm,
    )


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _cap(db: float) -> float:
    return PSNR_CAP_DB if math.isinf(db) else min(db, PSNR_CAP_DB)


def _factors(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--factors expects comma-separated integers, got {text!r}")


# ---------------------------------------------------------------- commands


def cmd_schedule(args) -> int:
    cfg = _config(args)
    if args.sweep:
        try:
            ratios = [float(r) for r in args.sweep.split(",")]
        except ValueError:
            raise UsageError(f"--sweep expects comma-separated ratios, got {args.sweep!r}")
        if args.out is None:
            raise UsageError("--sweep writes one file per ratio; give --out DIR")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = []
        for r in ratios:
            sub = replace(cfg, attenuation_ratio=r, degenerate_ddpm=False)
            sched = build_schedule(sub, on_infeasible="collapse")
            ext = "json" if args.format == "json" else "csv"
            path = out_dir / f"schedule_ratio_{r:g}.{ext}"
            rows = schedule_to_table(sched)
            path.write_text(table_to_json(rows, sub) if ext == "json" else table_to_csv(rows))
            summary.append({"ratio": r, "path": str(path), "collapse_step": sched.collapse_step,
                            "final_signal_coef": float(sched.signal_coef[-1])})
        _write_json(None, {"sweep": summary})
        return EXIT_OK

    sched = build_schedule(cfg)
    rows = schedule_to_table(sched)
    text = table_to_json(rows, cfg) if args.format == "json" else table_to_csv(rows)
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_forward(args) -> int:
    sched = build_schedule(_config(args))
    t = sched.check_t(args.t)
    seed = _seed(args)
    out = Path(args.out)
    sidecar = {
        "t": t,
        "seed": seed,
        "signal_coef": float(sched.signal_coef[t]),
        "noise_std": math.sqrt(sched.noise_var[t]),
        "k_t": float(sched.k[t]),
        "k_t4": float(sched.k[t] ** 4),
        "schedule_config": sched.config.to_dict(),
    }
    if t == 0:
        shutil.copyfile(args.input, out)
        img = read_png_file(out)
        sidecar.update(pre_clamp_mean=float(img.data.mean()), pre_clamp_var=float(img.data.var()),
                       clamped_fraction=0.0)
    else:
        img = read_png_file(args.input)
        noise = NoiseDraw(seed, stream_id(t, "marginal"), img.shape)
        xt = forward_marginal(img, t, sched, noise)
        raw = xt.data
        sidecar.update(
            pre_clamp_mean=float(raw.mean()),
            pre_clamp_var=float(raw.var()),
            pre_clamp_min=float(raw.min()),
            pre_clamp_max=float(raw.max()),
            clamped_fraction=float(np.mean((raw < 0) | (raw > 1))),
        )
        write_png_file(out, clamp(xt))
    _write_json(args.sidecar or out.with_suffix(out.suffix + ".json"), sidecar)
    return EXIT_OK


def cmd_prior(args) -> int:
    img = read_png_file(args.input)
    if img.channels == 4:
        img = ImageTensor(img.data[:, :, :3])
    if args.mode == "dehaze":
        out = dehaze_prior(img, train_mode=args.train_mode, gamma=args.gamma)
    else:
        out = hist_equalize(img)
    write_png_file(args.out, clamp(out))
    return EXIT_OK


def cmd_sample_oracle(args) -> int:
    sched = build_schedule(_config(args))
    seed = _seed(args)
    gt = read_png_file(args.gt)
    if gt.channels == 4:
        gt = ImageTensor(gt.data[:, :, :3])
    if gt.channels != 3:
        raise UsageError(f"ground truth must be RGB, got {gt.channels} channels")
    factors = _factors(args.factors) if args.pyramid == "on" else [1] * args.sample_steps
    if len(factors) != args.sample_steps:
        raise UsageError(f"--factors has {len(factors)} entries but --sample-steps is {args.sample_steps}")

    padded = pad_to_multiple(gt, max(factors))
    low_src = read_png_file(args.low) if args.low else ImageTensor(gt.data * 0.25)
    low = pad_to_multiple(ImageTensor(low_src.data[:, :, :3]), max(factors))
    if low.shape != padded.shape:
        raise UsageError(f"--low shape {low_src.shape} does not match ground truth {gt.shape}")
    cond = assemble_condition(low, prior=args.prior)
    plan = make_pyramid_plan(sched, args.sample_steps, factors, base_shape=padded.shape[:2],
                             coarse_to_fine=not args.fine_to_coarse)
    out = pyramid_sample(plan, OracleDenoiser(padded, sched), cond, sched, seed, unit_init=args.unit_init)
    out = unpad(ImageTensor(out.data, clamped=True, orig_hw=padded.orig_hw))
    write_png_file(args.out, out)

    written = read_png_file(args.out)
    report = {
        "psnr_db": _cap(psnr(out, gt)),
        "psnr_db_8bit": _cap(psnr(written, gt)),
        "ssim": ssim(written, gt) if min(gt.shape[:2]) >= 11 else None,
        "pyramid": args.pyramid,
        "plan": [list(s) for s in plan.steps],
        "seed": seed,
        "schedule_config": sched.config.to_dict(),
    }
    out_path = Path(args.out)
    _write_json(args.report or out_path.with_suffix(out_path.suffix + ".json"), report)
    return EXIT_OK


def cmd_verify(args) -> int:
    sched = build_schedule(_config(args))
    if args.perturb_a:
        a = sched.a.copy()
        a[1:] += args.perturb_a
        a.setflags(write=False)
        sched = replace(sched, a=a)
    report = run_suite(args.suite, sched, samples=args.samples, seed=_seed(args))
    if args.perturb_a:
        report["perturb_a"] = args.perturb_a
    _write_json(args.out, report)
    if not args.quiet:
        for c in report["checks"]:
            flag = "PASS" if c["passed"] else "FAIL"
            print(f"{flag} {c['name']}: {c['measured']:.3e} (tol {c['tolerance']:.1e})", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_metrics(args) -> int:
    a, b = read_png_file(args.a), read_png_file(args.b)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {args.a} is {a.shape}, {args.b} is {b.shape}")
    doc = {"psnr_db": _cap(psnr(a, b)), "ssim": ssim(a, b)}
    _write_json(args.out, doc)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("schedule")
    g.add_argument("--steps", type=int, default=1000, help="diffusion steps T")
    g.add_argument("--ratio", type=float, default=0.999, help="per-step attenuation ratio")
    g.add_argument("--b2-start", type=float, default=4e-5)
    g.add_argument("--b2-end", type=float, default=1e-2)
    g.add_argument("--ddpm", action="store_true", help="force k_t = 1 (plain DDPM)")
    common.add_argument("--seed", type=lambda s: int(s, 0), default=None)

    parser = argparse.ArgumentParser(prog="sadm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", parents=[common], help="dump schedule coefficients")
    p.add_argument("--sweep", help="comma-separated ratios, one table each")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("forward", parents=[common], help="noise a PNG to step t")
    p.add_argument("input")
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sidecar", help="coefficient JSON (default OUT.json)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("prior", parents=[common], help="dehaze or histogram-equalise a PNG")
    p.add_argument("input")
    p.add_argument("mode", choices=("dehaze", "hiseq"))
    p.add_argument("--train-mode", action="store_true", help="apply luminance gamma")
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prior)

    p = sub.add_parser("sample-oracle", parents=[common], help="oracle-denoiser sampling demo")
    p.add_argument("gt")
    p.add_argument("--pyramid", choices=("on", "off"), default="on")
    p.add_argument("--factors", default=",".join(map(str, DEFAULT_FACTORS)))
    p.add_argument("--sample-steps", type=int, default=10)
    p.add_argument("--fine-to-coarse", action="store_true", help="execute the factor list as written")
    p.add_argument("--unit-init", action="store_true", help="start from unit-variance noise")
    p.add_argument("--low", help="low-light PNG for the condition stack")
    p.add_argument("--prior", choices=("dehaze", "hiseq", "none"), default="dehaze")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="report JSON (default OUT.json)")
    p.set_defaults(func=cmd_sample_oracle)

    p = sub.add_parser("verify", parents=[common], help="run identity and Monte-Carlo checks")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--perturb-a", type=float, default=0.0, help="fault injection: add to every a_t")
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("metrics", parents=[common], help="PSNR and SSIM between two PNGs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="JSON path (default stdout)")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, PNGDecodeError, InfeasibleScheduleError, ValueError, OSError) as exc:
        print(f"sadm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
