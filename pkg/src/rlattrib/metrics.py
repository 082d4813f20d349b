"""Per-round run logs, sample-efficiency/runtime reductions and seed statistics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

RUNLOG_COLUMNS = ("round", "test_return", "n_filtered")
TIMING_COLUMNS = ("round", "wall_ms_collect", "wall_ms_influence", "wall_ms_optimize")


class TooFewSeeds(ValueError):
    pass


@dataclass
class RoundRow:
    round: int
    test_return: float
    n_filtered: int = 0
    wall_ms_collect: float = 0.0
    wall_ms_influence: float = 0.0
    wall_ms_optimize: float = 0.0

    @property
    def wall_ms(self) -> float:
        return self.wall_ms_collect + self.wall_ms_influence + self.wall_ms_optimize


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    label: str = "standard"
    seed: int = 0

    def __post_init__(self):
        for i, row in enumerate(self.rows, start=1):
            if row.round != i:
                raise ValueError(f"rounds must be contiguous from 1; row {i} has round {row.round}")

    def append(self, row: RoundRow) -> None:
        if row.round != len(self.rows) + 1:
            raise ValueError(f"expected round {len(self.rows) + 1}, got {row.round}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    @property
    def returns(self) -> np.ndarray:
        return np.array([r.test_return for r in self.rows])

    @property
    def cumulative_wall_ms(self) -> np.ndarray:
        return np.cumsum([r.wall_ms for r in self.rows])

    @classmethod
    def from_returns(cls, returns, wall_ms=None, label="standard", seed=0) -> "RunLog":
        wall = [0.0] * len(returns) if wall_ms is None else list(wall_ms)
        return cls([RoundRow(i + 1, float(r), 0, float(w)) for i, (r, w) in enumerate(zip(returns, wall))],
                   label, seed)

    # CSV ----------------------------------------------------------------
    def to_csv(self, timing: bool = True) -> str:
        cols = RUNLOG_COLUMNS + (TIMING_COLUMNS[1:] if timing else ())
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([getattr(r, c) if c != "test_return" else repr(r.test_return) for c in cols])
        return out.getvalue()

    def timing_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for r in self.rows:
            w.writerow([r.round, f"{r.wall_ms_collect:.3f}", f"{r.wall_ms_influence:.3f}", f"{r.wall_ms_optimize:.3f}"])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str, timing_text: str | None = None, label="standard", seed=0) -> "RunLog":
        rows = []
        for d in csv.DictReader(io.StringIO(text)):
            rows.append(RoundRow(int(d["round"]), float(d["test_return"]), int(d["n_filtered"]),
                                 float(d.get("wall_ms_collect", 0) or 0), float(d.get("wall_ms_influence", 0) or 0),
                                 float(d.get("wall_ms_optimize", 0) or 0)))
        if timing_text:
            for d in csv.DictReader(io.StringIO(timing_text)):
                row = rows[int(d["round"]) - 1]
                row.wall_ms_collect = float(d["wall_ms_collect"])
                row.wall_ms_influence = float(d["wall_ms_influence"])
                row.wall_ms_optimize = float(d["wall_ms_optimize"])
        return cls(rows, label, seed)


def first_round_reaching(log: RunLog, v: float) -> int | None:
    for row in log.rows:
        if row.test_return >= v:
            return row.round
    return None


def performance_levels(log: RunLog) -> list[float]:
    """Distinct running-maximum values, in the order they are first reached."""
    levels, best = [], -math.inf
    for r in log.returns:
        if r > best:
            levels.append(float(r))
            best = r
    return levels


def reduction(m_std: int, m_iif: int) -> float:
    return (1.0 - m_iif / m_std) * 100.0


def se_metrics(std_log: RunLog, iif_log: RunLog) -> tuple[float, float]:
    """(SE_ave, SE_peak) in percent.

    Levels are the standard run's running-max milestones; a level the
    filtered run never reaches counts as reached at ``len(iif_log) + 1``.
    """
    if not len(std_log) or not len(iif_log):
        raise ValueError("both logs must be non-empty")
    unreached = len(iif_log) + 1
    levels = performance_levels(std_log)
    reds = []
    for v in levels:
        m_iif = first_round_reaching(iif_log, v)
        reds.append(reduction(first_round_reaching(std_log, v), unreached if m_iif is None else m_iif))
    return float(np.mean(reds)), reds[-1]


def rt_peak(std_log: RunLog, iif_log: RunLog) -> float:
    """Runtime reduction at the standard run's peak return, in percent.

    If the filtered run never reaches the peak, its whole cumulative time is used.
    """
    peak = float(std_log.returns.max())
    m_std = first_round_reaching(std_log, peak)
    m_iif = first_round_reaching(iif_log, peak)
    t_std = std_log.cumulative_wall_ms[m_std - 1]
    t_iif = iif_log.cumulative_wall_ms[-1 if m_iif is None else m_iif - 1]
    if t_std <= 0:
        return 0.0 if t_iif <= 0 else -math.inf
    return (1.0 - t_iif / t_std) * 100.0


@dataclass(frozen=True)
class SeedStats:
    mean: float
    std: float
    half_width: float
    n: int

    @property
    def multiplier(self) -> float:
        return t_multiplier(self.n)

    def __str__(self):
        return f"{self.mean:.1f}% ± {self.half_width:.1f}%"


def t_multiplier(n: int, level: float = 0.95) -> float:
    return float(stats.t.ppf(0.5 + level / 2, n - 1))


def seed_stats(values) -> SeedStats:
    """Mean, sample std and the two-sided 95% t half-width."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise TooFewSeeds("need at least two seeds")
    # spread about the first value: identical to the usual formula, and exactly 0 for equal inputs
    sd = float((x - x[0]).std(ddof=1))
    return SeedStats(float(x.mean()), sd, t_multiplier(x.size) * sd / math.sqrt(x.size), int(x.size))
