"""Run matrices, artifact layout and the analyses behind the CLI subcommands.

Artifact layout under the output directory::

    manifest.json
    <strategy>/seed<S>/runlog.csv      round, test_return, n_filtered
    <strategy>/seed<S>/timing.csv      per-stage wall milliseconds
    <strategy>/seed<S>/params.npz      parameters after the last completed round
    <strategy>/seed<S>/cell.json       config hash, used to decide whether to resume
    <strategy>/seed<S>/influence/round<K>.json   (attribute enabled)
    <strategy>/seed<S>/diagnostics.csv           (diagnose enabled, tabular envs)

Everything except ``timing.csv`` is a function of (config, seed).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from rlattrib import __version__
from rlattrib.attribution import ActionTarget, InfluenceReport, ReturnTarget, influence_full_tracin, \
    influence_single_checkpoint
from rlattrib.config import ExperimentConfig
from rlattrib.diagnostics import (
    MISMATCH_COLUMNS,
    DegenerateInput,
    TooFewPositive,
    build_similarity_graph,
    mismatch_analysis,
    oracle_advantages,
    region_mismatch_fraction,
    roughness,
    single_round_intervention,
    spearman,
)
from rlattrib.envs import TabularEnv, make_env
from rlattrib.filtering import Strategy
from rlattrib.metrics import RunLog, rt_peak, se_metrics, seed_stats, TooFewSeeds
from rlattrib.nn import load_params, save_params
from rlattrib.ppo import collect_rollout, ppo_update
from rlattrib.runner import RoundOutcome, RunState, initial_params, iif_scores, train
from rlattrib.seeding import stream

log = logging.getLogger(__name__)

NONDETERMINISTIC = ("timing.csv",)
DIAGNOSTIC_COLUMNS = ("round", "spearman", "top_mismatch", "bottom_mismatch", "n_negative")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(out.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def cell_dir(root: Path, strategy: str, seed: int) -> Path:
    return root / strategy / f"seed{seed}"


# one cell ---------------------------------------------------------------------------

def influence_rank(scores: np.ndarray, record_ids: np.ndarray) -> np.ndarray:
    """1 = most positive score; ties by record id."""
    order = np.lexsort((record_ids, -scores))
    rank = np.empty(scores.shape[0])
    rank[order] = np.arange(1, scores.shape[0] + 1)
    return rank


def diagnostic_row(env, outcome: RoundOutcome, report: InfluenceReport, gamma: float) -> tuple:
    buffer = outcome.buffer
    a_bar = oracle_advantages(buffer, env, gamma, params=outcome.params_before)
    rows = mismatch_analysis(buffer, report, a_bar)
    top, bottom = region_mismatch_fraction(rows)
    ranks = np.array([r["rank"] for r in rows], dtype=np.float64)
    prod = np.array([r["product"] for r in rows])
    ok = np.isfinite(prod)
    try:
        rho = spearman(ranks[ok], prod[ok])
    except (DegenerateInput, ValueError):
        rho = math.nan
    return outcome.k + 1, rho, top, bottom, int((report.scores < 0).sum())


def _paired_counts(root: Path, cfg: ExperimentConfig, seed: int):
    if cfg.random_pairing != "paired":
        return None
    path = cell_dir(root, Strategy.IIF.value, seed) / "runlog.csv"
    if not path.exists():
        return None
    return [row.n_filtered for row in RunLog.from_csv(path.read_text()).rows]


def run_cell(cfg: ExperimentConfig, strategy: str, seed: int, root: Path) -> dict:
    """Train one (strategy, seed) cell, resuming from its last checkpoint when possible."""
    d = cell_dir(root, strategy, seed)
    digest = cfg.hash()
    meta_path = d / "cell.json"
    state = None
    if meta_path.exists() and json.loads(meta_path.read_text()).get("config_hash") == digest:
        state = _load_state(d, strategy, seed)
    elif d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"strategy": strategy, "seed": seed, "config_hash": digest}
    paired = _paired_counts(root, cfg, seed) if strategy == Strategy.RANDOM.value else None
    if strategy == Strategy.RANDOM.value:
        meta["pairing"] = "paired" if paired is not None else "fraction"
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    env = make_env(cfg.env, **cfg.env_kwargs)
    diag_rows = _read_rows(d / "diagnostics.csv") if state is not None else []
    want_diag = cfg.diagnose and isinstance(env, TabularEnv)
    if state is not None:
        diag_rows = diag_rows[:len(state.log)]

    def on_round(outcome: RoundOutcome) -> None:
        report = outcome.report
        if (cfg.attribute or want_diag) and report is None:
            report = iif_scores(outcome.params_before, outcome.buffer, cfg.ppo, cfg.influence_advantage)
        if cfg.attribute:
            (d / "influence").mkdir(exist_ok=True)
            (d / "influence" / f"round{outcome.k + 1:03d}.json").write_text(report.to_json() + "\n")
        if want_diag:
            diag_rows.append(diagnostic_row(env, outcome, report, cfg.ppo.gamma))
            _write_csv(d / "diagnostics.csv", DIAGNOSTIC_COLUMNS, diag_rows)
        # checkpoint after every round so an interrupted cell resumes where it stopped;
        # params go last, and the loader trims log rows the checkpoint does not cover
        (d / "runlog.csv").write_text(run_state.log.to_csv(timing=False))
        (d / "timing.csv").write_text(run_state.log.timing_csv())
        tmp = d / "params.tmp.npz"
        save_params(outcome.params_after, tmp)
        os.replace(tmp, d / "params.npz")

    if state is None:
        state = RunState(initial_params(env, cfg.ppo, seed), RunLog(label=strategy, seed=seed))
    run_state = state
    train(cfg.env, cfg.ppo, cfg.filter_config(strategy), seed, eval_episodes=cfg.eval_episodes,
          paired_counts=paired, influence_advantage=cfg.influence_advantage, state=state, on_round=on_round,
          env_kwargs=cfg.env_kwargs)
    if not (d / "runlog.csv").exists():  # zero rounds requested
        (d / "runlog.csv").write_text(state.log.to_csv(timing=False))
        (d / "timing.csv").write_text(state.log.timing_csv())
        save_params(state.params, d / "params.npz")
    return meta


def _read_rows(path: Path) -> list:
    if not path.exists():
        return []
    with path.open() as fh:
        rd = csv.reader(fh)
        next(rd, None)
        return [tuple(_parse(v) for v in row) for row in rd]


def _parse(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def _load_state(d: Path, strategy: str, seed: int) -> RunState | None:
    runlog, params = d / "runlog.csv", d / "params.npz"
    if not (runlog.exists() and params.exists()):
        return None
    timing = d / "timing.csv"
    lg = RunLog.from_csv(runlog.read_text(), timing.read_text() if timing.exists() else None, strategy, seed)
    theta = load_params(params)
    if theta.round < len(lg):  # interrupted between the log and checkpoint writes
        lg = RunLog(lg.rows[:theta.round], strategy, seed)
    if theta.round != len(lg):
        log.warning("checkpoint in %s is at round %d but the log has %d rows; restarting", d, theta.round, len(lg))
        return None
    return RunState(theta, lg)


def _cell_job(args) -> dict:
    cfg, strategy, seed, root = args
    try:
        meta = run_cell(cfg, strategy, seed, Path(root))
        return {**meta, "status": "ok"}
    except Exception as exc:  # one failing cell must not take the matrix down
        log.error("cell %s/seed%d failed: %s", strategy, seed, exc)
        return {"strategy": strategy, "seed": seed, "status": "error",
                "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(limit=4)}


# the matrix ---------------------------------------------------------------------------

@dataclass
class MatrixResult:
    root: Path
    cells: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c["status"] == "ok" for c in self.cells)


def versions() -> dict:
    return {"rlattrib": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run_matrix(cfg: ExperimentConfig, root: Path | str | None = None) -> MatrixResult:
    """Run every (strategy, seed) cell and write the manifest.

    IIF cells run before random ones so the random baseline can copy their
    per-round removal counts.
    """
    root = Path(root if root is not None else cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    strategies = list(dict.fromkeys(cfg.strategies))
    first = [s for s in strategies if s != Strategy.RANDOM.value]
    phases = [first, [s for s in strategies if s == Strategy.RANDOM.value]]
    cells = []
    for phase in phases:
        jobs = [(cfg, s, seed, str(root)) for s in phase for seed in cfg.seeds]
        if not jobs:
            continue
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                cells.extend(pool.map(_cell_job, jobs))
        else:
            cells.extend(_cell_job(j) for j in jobs)
    result = MatrixResult(root, cells)
    write_manifest(cfg, result)
    return result


def _file_hashes(root: Path) -> dict:
    return {path.relative_to(root).as_posix(): sha256(path)
            for path in sorted(root.rglob("*")) if path.is_file() and path.name != "manifest.json"}


def write_manifest(cfg: ExperimentConfig, result: MatrixResult) -> Path:
    root = result.root
    files = _file_hashes(root)
    cells = [{k: v for k, v in c.items() if k != "traceback"} for c in result.cells]
    manifest = {
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(with_output=False),
        "versions": versions(),
        "cells": sorted(cells, key=lambda c: (c["strategy"], c["seed"])),
        "files": files,
        "nondeterministic": sorted(f for f in files if Path(f).name in NONDETERMINISTIC),
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def refresh_manifest(root: Path) -> None:
    """Re-hash the artifact files after something (e.g. a report) was added."""
    path = root / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["files"] = _file_hashes(root)
    manifest["nondeterministic"] = sorted(f for f in manifest["files"] if Path(f).name in NONDETERMINISTIC)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# report ---------------------------------------------------------------------------

REPORT_COLUMNS = ("env", "strategy", "n_seeds", "se_ave", "se_ave_hw", "se_peak", "se_peak_hw",
                  "rt_peak", "rt_peak_hw", "final_return", "final_return_hw")


def load_cell_log(root: Path, strategy: str, seed: int) -> RunLog | None:
    d = cell_dir(root, strategy, seed)
    runlog = d / "runlog.csv"
    if not runlog.exists():
        return None
    timing = d / "timing.csv"
    return RunLog.from_csv(runlog.read_text(), timing.read_text() if timing.exists() else None, strategy, seed)


def _stat(values) -> tuple[float, float]:
    values = [v for v in values if math.isfinite(v)]
    if not values:
        return math.nan, math.nan
    try:
        s = seed_stats(values)
        return s.mean, s.half_width
    except TooFewSeeds:
        return float(values[0]), math.nan


def summarize(root: Path | str) -> list[dict]:
    """One row per non-standard strategy: seed-averaged SE/RT against the standard cells."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    env = manifest["config"]["env"]
    ok = {(c["strategy"], c["seed"]) for c in manifest["cells"] if c["status"] == "ok"}
    seeds = sorted({s for _, s in ok})
    strategies = sorted({s for s, _ in ok})
    rows = []
    for strategy in strategies:
        finals = [load_cell_log(root, strategy, s).returns[-1] for s in seeds if (strategy, s) in ok]
        se_a, se_p, rt = [], [], []
        if strategy != Strategy.STANDARD.value:
            for seed in seeds:
                if (strategy, seed) in ok and (Strategy.STANDARD.value, seed) in ok:
                    std = load_cell_log(root, Strategy.STANDARD.value, seed)
                    other = load_cell_log(root, strategy, seed)
                    a, p = se_metrics(std, other)
                    se_a.append(a)
                    se_p.append(p)
                    rt.append(rt_peak(std, other))
        row = {"env": env, "strategy": strategy, "n_seeds": len(finals)}
        for name, vals in (("se_ave", se_a), ("se_peak", se_p), ("rt_peak", rt), ("final_return", finals)):
            row[name], row[f"{name}_hw"] = _stat(vals)
        rows.append(row)
    return rows


def report_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r[c] if not isinstance(r[c], float) else f"{r[c]:.6g}" for c in REPORT_COLUMNS])
    return out.getvalue()


def report_text(rows: list[dict]) -> str:
    def cell(mean, hw, pct=True):
        if not math.isfinite(mean):
            return "n/a"
        unit = "%" if pct else ""
        return f"{mean:.1f}{unit} ± {hw:.1f}{unit}" if math.isfinite(hw) else f"{mean:.1f}{unit}"

    header = f"{'env':<11}{'strategy':<10}{'seeds':>6}  {'SE_ave':>16}{'SE_peak':>16}{'RT_peak':>16}{'final':>16}"
    lines = [header, "-" * len(header)]
    for r in rows:
        final = (f"{r['final_return']:.3f} ± {r['final_return_hw']:.3f}" if math.isfinite(r["final_return_hw"])
                 else f"{r['final_return']:.3f}")
        lines.append(f"{r['env']:<11}{r['strategy']:<10}{r['n_seeds']:>6}  "
                     f"{cell(r['se_ave'], r['se_ave_hw']):>16}{cell(r['se_peak'], r['se_peak_hw']):>16}"
                     f"{cell(r['rt_peak'], r['rt_peak_hw']):>16}{final:>16}")
    lines.append("levels the filtered run never reaches count as reached one round after the end")
    return "\n".join(lines)


# single-round analyses ---------------------------------------------------------------

@dataclass
class RoundSnapshot:
    k: int
    params_before: object
    params_after: object
    buffer: object


def trajectory(cfg: ExperimentConfig, seed: int, rounds: int, strategy: str = "standard",
               eval_episodes: int | None = None) -> list[RoundSnapshot]:
    """Replay a cell for ``rounds`` rounds and keep what each round started from."""
    from dataclasses import replace
    ppo = replace(cfg.ppo, total_rounds=rounds)
    snaps = []
    train(cfg.env, ppo, cfg.filter_config(strategy), seed,
          eval_episodes=cfg.eval_episodes if eval_episodes is None else eval_episodes,
          influence_advantage=cfg.influence_advantage, env_kwargs=cfg.env_kwargs,
          on_round=lambda o: snaps.append(RoundSnapshot(o.k, o.params_before, o.params_after, o.buffer)))
    return snaps


def attribute_round(cfg: ExperimentConfig, seed: int, round: int, target: str = "return", mode: str = "fast",
                    strategy: str = "standard", record: int = 0) -> InfluenceReport:
    """Influence report for training round ``round`` (1-based) of a replayed cell."""
    if round < 1:
        raise ValueError("round is 1-based")
    env = make_env(cfg.env, **cfg.env_kwargs)
    if round > 1:
        theta = trajectory(cfg, seed, round - 1, strategy, eval_episodes=1)[-1].params_after
    else:
        theta = initial_params(env, cfg.ppo, seed)
    k = round - 1
    buffer = collect_rollout(env, theta, cfg.ppo, stream(seed, "collect", k), round=k)
    if target == "return":
        tgt = ReturnTarget(buffer)
    elif target == "action":
        pos = int(np.flatnonzero(buffer.record_ids == record)[0])
        tgt = ActionTarget(buffer.obs[pos].copy(), int(buffer.actions[pos]))
    else:
        raise ValueError(f"unknown target {target!r}")
    if mode == "fast":
        return influence_single_checkpoint(theta, buffer, tgt, cfg.ppo)
    if mode == "full":
        _, trace = ppo_update(theta, buffer, cfg.ppo, stream(seed, "shuffle", k), keep_checkpoints=True)
        return influence_full_tracin(trace, buffer, tgt, cfg.ppo)
    raise ValueError(f"unknown mode {mode!r}")


INTERVENTION_COLUMNS = ("seed", "round", "variant", "return_original", "return_filtered", "delta", "n_removed")


def intervention_sweep(cfg: ExperimentConfig, seeds, rounds, variant: str = "influence", mode: str = "full",
                       p: float = 1.0) -> list[tuple]:
    """Single-round interventions at each (seed, round) along standard-training trajectories."""
    rounds = sorted(set(int(r) for r in rounds))
    env = make_env(cfg.env, **cfg.env_kwargs)
    rows = []
    for seed in seeds:
        snaps = trajectory(cfg, seed, max(rounds) - 1, eval_episodes=1) if max(rounds) > 1 else []
        for r in rounds:
            theta = snaps[r - 2].params_after if r > 1 else initial_params(env, cfg.ppo, seed)
            res = single_round_intervention(env, theta, cfg.ppo, seed, r - 1, cfg.eval_episodes, p=p,
                                            variant=variant, mode=mode)
            rows.append((seed, r, variant, res.return_original, res.return_filtered, res.delta, res.n_removed))
            log.info("intervene seed=%d round=%d delta=%+.4f removed=%d", seed, r, res.delta, res.n_removed)
    return rows


ROUGHNESS_COLUMNS = ("round", "u", "roughness", "n_nodes")


def roughness_by_round(cfg: ExperimentConfig, seed: int, us=(20, 50, 100)) -> list[tuple]:
    """Roughness of every round's return-target influence, embedded by the final policy."""
    snaps = trajectory(cfg, seed, cfg.ppo.total_rounds, eval_episodes=1)
    final = snaps[-1].params_after
    rows = []
    for s in snaps:
        report = iif_scores(s.params_before, s.buffer, cfg.ppo, cfg.influence_advantage)
        for u in us:
            try:
                g = build_similarity_graph(s.buffer, report, final, u)
                rows.append((s.k + 1, u, roughness(g), g.node_values.shape[0]))
            except TooFewPositive:
                rows.append((s.k + 1, u, math.nan, int((report.scores > 0).sum())))
    return rows


def mismatch_rows(cfg: ExperimentConfig, seed: int, round: int) -> tuple[list[dict], float]:
    """Per-record mismatch rows for one round (exact oracle) and the rank/product Spearman."""
    env = make_env(cfg.env, **cfg.env_kwargs)
    snaps = trajectory(cfg, seed, round, eval_episodes=1)
    s = snaps[round - 1]
    report = iif_scores(s.params_before, s.buffer, cfg.ppo, cfg.influence_advantage)
    rows = mismatch_analysis(s.buffer, report, oracle_advantages(s.buffer, env, cfg.ppo.gamma,
                                                                 params=s.params_before))
    _, rho, *_ = diagnostic_row(env, RoundOutcome(s.k, s.params_before, s.params_after, s.buffer, s.buffer,
                                                  report, None), report, cfg.ppo.gamma)
    return rows, rho


def write_mismatch_csv(path: Path, rows: list[dict]) -> None:
    _write_csv(path, MISMATCH_COLUMNS, ([r[c] if r[c] is not None else "" for c in MISMATCH_COLUMNS] for r in rows))


def write_rows(path: Path, header, rows) -> None:
    _write_csv(path, header, rows)


def echo(*parts) -> None:
    print(*parts, file=sys.stdout, flush=True)
