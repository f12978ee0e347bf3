"""Latency benchmark: single-shot forecast versus autoregressive rollout."""

from __future__ import annotations

import csv
import gc
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

MIN_TRIALS = 30
WARMUP = 5


@dataclass(frozen=True)
class LatencyStats:
    median: float
    p10: float
    p90: float

    @classmethod
    def of(cls, samples) -> "LatencyStats":
        s = np.asarray(samples, dtype=np.float64)
        return cls(float(np.median(s)), float(np.percentile(s, 10)), float(np.percentile(s, 90)))


@dataclass
class BenchResult:
    tau_steps: list[int]
    flexi: list[LatencyStats]
    baseline: list[LatencyStats]
    trials: int

    def __post_init__(self):
        if self.trials < MIN_TRIALS:
            raise ConfigurationError(f"at least {MIN_TRIALS} trials are required, got {self.trials}")

    def _at(self, stats: list[LatencyStats], steps: int) -> float:
        return stats[self.tau_steps.index(steps)].median

    def flexi_ratio(self, hi: int, lo: int) -> float:
        return self._at(self.flexi, hi) / self._at(self.flexi, lo)

    def baseline_ratio(self, hi: int, lo: int) -> float:
        return self._at(self.baseline, hi) / self._at(self.baseline, lo)

    def speedup(self, steps: int) -> float:
        return self._at(self.baseline, steps) / self._at(self.flexi, steps)

    def rows(self):
        for s, f, b in zip(self.tau_steps, self.flexi, self.baseline):
            yield {
                "tau_steps": s,
                "flexi_median": f.median,
                "flexi_p10": f.p10,
                "flexi_p90": f.p90,
                "baseline_median": b.median,
                "baseline_p10": b.p10,
                "baseline_p90": b.p90,
                "speedup": b.median / f.median,
            }

    def to_dict(self) -> dict:
        return {
            "tau_steps": self.tau_steps,
            "trials": self.trials,
            "flexi": [asdict(s) for s in self.flexi],
            "baseline": [asdict(s) for s in self.baseline],
        }

    def write(self, directory: str | Path) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        rows = list(self.rows())
        with open(d / "bench.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        (d / "bench.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return d / "bench.csv", d / "bench.json"


def pin_single_worker() -> None:
    """Best effort: one CPU for this process and one BLAS thread."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    if hasattr(os, "sched_setaffinity"):
        try:
            cpus = sorted(os.sched_getaffinity(0))
            os.sched_setaffinity(0, {cpus[0]})
        except OSError:
            pass


def _time_interleaved(fns: Sequence, trials: int) -> list[list[float]]:
    """Time every callable once per round; rounds are interleaved so drift hits all alike."""
    out: list[list[float]] = [[] for _ in fns]
    enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(trials + WARMUP):
            for k, fn in enumerate(fns):
                t0 = time.perf_counter()
                fn()
                out[k].append(time.perf_counter() - t0)
    finally:
        if enabled:
            gc.enable()
    return [o[WARMUP:] for o in out]


def run_bench(
    flexi,
    baseline,
    u_now: np.ndarray,
    u_window: np.ndarray,
    zeta: float,
    tau_steps: Sequence[int],
    dt: float,
    trials: int = 300,
) -> BenchResult:
    """Time ``flexi.forecast`` and ``baseline.rollout_forecast`` for every horizon.

    Inputs are prepared beforehand; each timed call covers forward computation only.
    Horizons are interleaved within each round and the first ``WARMUP``
    rounds are discarded.
    """
    if trials < MIN_TRIALS:
        raise ConfigurationError(f"at least {MIN_TRIALS} trials are required, got {trials}")
    steps = [int(s) for s in tau_steps]
    if not steps or min(steps) < 1:
        raise ConfigurationError("tau steps must be positive integers")
    u_now = np.asarray(u_now, dtype=np.float64)
    u_window = np.asarray(u_window, dtype=np.float64)
    fns = []
    for s in steps:
        fns.append(lambda tau=s * dt: flexi.forecast(u_now, tau, zeta))
        fns.append(lambda s=s: baseline.rollout_forecast(u_window, zeta, s))
    samples = _time_interleaved(fns, trials)
    f_stats = [LatencyStats.of(x) for x in samples[0::2]]
    b_stats = [LatencyStats.of(x) for x in samples[1::2]]
    return BenchResult(steps, f_stats, b_stats, trials)
