"""Signal-attenuation noise schedule.

Forward step: ``x_t = k_t * (a_t * x_{t-1} + b_t * eps_t)``, with the per-step
attenuation ``k_t = ratio * k_{t-1}`` (``k_0 = 1``) and the second-moment
constraint

    k_{t-1}^4 * a_t^2 + b_t^2 = k_t^2

which keeps ``E||x_t||^2 = k_t^4`` for unit-energy inputs. The closed-form
marginal is ``x_t = S_t * x_0 + sqrt(V_t) * eps``, where ``S_t = kbar_t * abar_t``
(``signal_coef``) and ``V_t = k_t^4 - S_t^2`` (``noise_var``).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "ScheduleConfig",
    "NoiseSchedule",
    "InfeasibleScheduleError",
    "build_schedule",
    "schedule_to_table",
    "table_to_csv",
    "table_to_json",
    "TABLE_COLUMNS",
]

TABLE_COLUMNS = ("t", "k", "a", "b_sq", "signal_coef", "noise_std")


class InfeasibleScheduleError(ValueError):
    """Raised when ``k_t^2 <= b_t^2`` so that ``a_t^2`` would be non-positive."""

    def __init__(self, t: int, k_sq: float, b_sq: float):
        self.t = t
        super().__init__(
            f"schedule infeasible at t={t}: k_t^2={k_sq:.6g} <= b_t^2={b_sq:.6g} "
            "(a_t^2 would be non-positive); raise the attenuation ratio, lower "
            "the b^2 ramp, or build with on_infeasible='collapse'"
        )


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 1000
    attenuation_ratio: float = 0.999
    b_sq_start: float = 4e-5
    b_sq_end: float = 1e-2
    degenerate_ddpm: bool = False

    def __post_init__(self):
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ValueError(f"total_steps must be a positive integer, got {self.total_steps}")
        if not 0.0 < self.attenuation_ratio <= 1.0:
            raise ValueError(f"attenuation_ratio must lie in (0, 1], got {self.attenuation_ratio}")
        if not 0.0 < self.b_sq_start <= self.b_sq_end < 1.0:
            raise ValueError(
                f"need 0 < b_sq_start <= b_sq_end < 1, got {self.b_sq_start}, {self.b_sq_end}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step and cumulative coefficients, all indexed ``0..T``.

    ``log_signal`` is ``log(S_t)``; every ratio of signal coefficients goes
    through it because ``kbar_t`` alone underflows towards 1e-218 at T=1000.
    ``collapse_step`` is the first t whose b_t^2 was clipped to k_t^2 (only in
    ``on_infeasible='collapse'`` builds); from there on the signal is gone.
    """

    config: ScheduleConfig
    k: np.ndarray
    a: np.ndarray
    b_sq: np.ndarray
    k_bar: np.ndarray
    a_bar: np.ndarray
    signal_coef: np.ndarray
    log_signal: np.ndarray
    noise_var: np.ndarray
    collapse_step: int | None = field(default=None)

    @property
    def T(self) -> int:
        return len(self.k) - 1

    @property
    def noise_std(self) -> np.ndarray:
        return np.sqrt(self.noise_var)

    def check_t(self, t: int, low: int = 0) -> int:
        if int(t) != t or not low <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{low}, {self.T}]")
        return int(t)

    def signal_ratio(self, p: int, t: int) -> float:
        """``S_p / S_t`` evaluated in the log domain."""
        lp, lt = self.log_signal[p], self.log_signal[t]
        if not np.isfinite(lt):
            raise ValueError(f"signal coefficient vanished at t={t} (collapsed schedule)")
        return math.exp(lp - lt)


def build_schedule(config: ScheduleConfig | None = None, on_infeasible: str = "raise") -> NoiseSchedule:
    """Build the attenuation schedule for ``config``.

    ``on_infeasible`` controls what happens when ``k_t^2 <= b_t^2``:
    ``"raise"`` (default) throws :class:`InfeasibleScheduleError` naming the
    first offending t; ``"collapse"`` clips ``b_t^2`` to ``k_t^2`` so that
    ``a_t = 0``, which annihilates the signal while keeping the recurrence
    exact. The collapse mode only exists for ratio sweeps such as 0.99.
    """
    cfg = config or ScheduleConfig()
    if on_infeasible not in ("raise", "collapse"):
        raise ValueError(f"on_infeasible must be 'raise' or 'collapse', got {on_infeasible!r}")
    T = cfg.total_steps
    t = np.arange(T + 1, dtype=np.float64)

    if cfg.degenerate_ddpm:
        k = np.ones(T + 1)
    else:
        k = cfg.attenuation_ratio ** t

    b_sq = np.zeros(T + 1)
    b_sq[1:] = np.linspace(cfg.b_sq_start, cfg.b_sq_end, T)

    k_sq = k * k
    collapse_step = None
    bad = np.nonzero(k_sq[1:] <= b_sq[1:])[0]
    if bad.size:
        first = int(bad[0]) + 1
        if on_infeasible == "raise":
            raise InfeasibleScheduleError(first, k_sq[first], b_sq[first])
        collapse_step = first
        b_sq[1:] = np.minimum(b_sq[1:], k_sq[1:])

    a_sq = np.ones(T + 1)
    a_sq[1:] = (k_sq[1:] - b_sq[1:]) / k[:-1] ** 4
    a = np.sqrt(np.maximum(a_sq, 0.0))
    a[0] = 1.0

    with np.errstate(divide="ignore"):
        log_k = np.log(k)
        log_a = np.log(a)
    log_k[0] = log_a[0] = 0.0
    log_k_bar = np.cumsum(log_k)
    log_a_bar = np.cumsum(log_a)
    log_signal = log_k_bar + log_a_bar

    # per-step products never underflow, unlike kbar on its own
    signal_coef = np.cumprod(k * a)
    signal_coef[0] = 1.0

    # V_t = k_t^2 a_t^2 V_{t-1} + k_t^2 b_t^2 equals k_t^4 - S_t^2 by induction,
    # without the cancellation of the direct difference at small t
    noise_var = np.zeros(T + 1)
    for i in range(1, T + 1):
        noise_var[i] = k_sq[i] * (a[i] * a[i] * noise_var[i - 1] + b_sq[i])

    return NoiseSchedule(
        config=cfg,
        k=_readonly(k),
        a=_readonly(a),
        b_sq=_readonly(b_sq),
        k_bar=_readonly(np.exp(log_k_bar)),
        a_bar=_readonly(np.exp(log_a_bar)),
        signal_coef=_readonly(signal_coef),
        log_signal=_readonly(log_signal),
        noise_var=_readonly(noise_var),
        collapse_step=collapse_step,
    )


def schedule_to_table(schedule: NoiseSchedule) -> Iterator[dict]:
    """Yield one record per timestep with the columns of :data:`TABLE_COLUMNS`
    plus ``log_signal_coef``."""
    for i in range(schedule.T + 1):
        yield {
            "t": i,
            "k": float(schedule.k[i]),
            "a": float(schedule.a[i]),
            "b_sq": float(schedule.b_sq[i]),
            "signal_coef": float(schedule.signal_coef[i]),
            "noise_std": math.sqrt(schedule.noise_var[i]),
            "log_signal_coef": float(schedule.log_signal[i]),
        }


def table_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for row in rows:
        # 17 significant digits round-trip every double
        writer.writerow([row["t"]] + [format(row[c], ".17g") for c in TABLE_COLUMNS[1:]])
    return buf.getvalue()


def table_to_json(rows, config: ScheduleConfig | None = None) -> str:
    rows = list(rows)
    for row in rows:
        if not math.isfinite(row["log_signal_coef"]):
            row["log_signal_coef"] = None
    doc = {"columns": list(TABLE_COLUMNS) + ["log_signal_coef"], "rows": rows}
    if config is not None:
        doc["config"] = config.to_dict()
    return json.dumps(doc, indent=1)
