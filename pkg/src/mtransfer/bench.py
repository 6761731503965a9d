"""Timing of repeated test-mode stylizations."""

from __future__ import annotations

import resource
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .network import STAGES, MTNetwork, ScalePlan, mt_forward
from .tensor import Tensor


@dataclass
class BenchReport:
    reps: int
    size: int
    levels: int
    times: list[float]
    stage_totals: dict[str, float] = field(default_factory=dict)
    peak_rss_bytes: int | None = None

    @property
    def mean(self) -> float:
        return statistics.fmean(self.times)

    @property
    def std(self) -> float:
        return statistics.pstdev(self.times) if len(self.times) > 1 else 0.0

    @property
    def total(self) -> float:
        return sum(self.times)

    def stage_means(self) -> dict[str, float]:
        return {k: v / self.reps for k, v in self.stage_totals.items()}

    def split_error(self) -> float:
        """Relative gap between the summed stage times and the total."""
        return abs(sum(self.stage_totals.values()) - self.total) / self.total

    def as_dict(self) -> dict:
        return {
            "reps": self.reps,
            "size": self.size,
            "levels": self.levels,
            "mean_s": self.mean,
            "std_s": self.std,
            "total_s": self.total,
            "stage_mean_s": self.stage_means(),
            "split_error": self.split_error(),
            "peak_rss_bytes": self.peak_rss_bytes,
        }

    def format(self) -> str:
        lines = [
            f"reps={self.reps} size={self.size} levels={self.levels}",
            f"mean {self.mean * 1e3:.3f} ms  std {self.std * 1e3:.3f} ms",
        ]
        for name, t in self.stage_means().items():
            lines.append(f"  {name:<8} {t * 1e3:9.3f} ms  ({100 * t / self.mean:5.1f}%)")
        if self.peak_rss_bytes is not None:
            lines.append(f"peak RSS {self.peak_rss_bytes / 2**20:.1f} MiB")
        return "\n".join(lines)


def peak_rss_bytes() -> int | None:
    try:
        rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (AttributeError, OSError):  # pragma: no cover
        return None
    # kilobytes on Linux, bytes on macOS
    return int(rss) if sys.platform == "darwin" else int(rss) * 1024


def run_bench(net: MTNetwork, plan: ScalePlan, reps: int, levels: int = 3, seed: int = 0) -> BenchReport:
    """Run ``reps`` forwards of one fixed random input; the model is already loaded."""
    if reps < 1:
        raise ConfigError(f"repetitions must be >= 1, got {reps}")
    size = plan.sizes[levels - 1]
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((1, 3, size, size)).astype(net.style.out.weight.dtype))
    stages = {name: 0.0 for name in STAGES[: 2 * levels]}
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        mt_forward(net, x, plan, levels, timings=stages)
        times.append(time.perf_counter() - t0)
    return BenchReport(reps, size, levels, times, stages, peak_rss_bytes())


__all__ = ["BenchReport", "peak_rss_bytes", "run_bench"]
