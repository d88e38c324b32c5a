"""Experiment drivers behind the CLI: training, evaluation, gamma sweeps,
baseline comparisons and racing generalization."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from pathlib import Path

import numpy as np

from ..learner.tasks import NavTask, RaceTask
from ..learner.train import (
    METRIC_COLUMNS,
    TrainConfig,
    Trainer,
    episode_rngs,
    load_model,
    make_task,
    model_policy,
    run_episode,
    summarize,
)
from .config import ExperimentConfig, dump_config

log = logging.getLogger(__name__)

EVAL_COLUMNS = ("iteration", "env_steps", "episodes", "mean_return", "success_rate", "collision_rate",
                "mean_time", "mean_gamma")
SWEEP_COLUMNS = ("env", "agents", "ds", "n_opponents", "gamma", "episodes", "success_rate", "collision_rate",
                 "mean_time", "mean_return")
ABLATE_COLUMNS = ("method", "gamma", "episodes", "success_rate", "collision_rate", "mean_time", "mean_return")
GENERALIZE_COLUMNS = ("n_opponents", "grids", "mean_rank", "min_rank", "max_rank", "collisions")

# held-out evaluation episodes never share generator seeds with training
HELD_OUT_OFFSET = 7_777


class CsvSink:
    """Append rows to a CSV with a fixed header; floats are written round-trip exactly."""

    def __init__(self, path, columns, append: bool = False):
        self.path = Path(path)
        self.columns = tuple(columns)
        exists = append and self.path.exists()
        self._f = open(self.path, "a" if exists else "w", newline="")
        self._w = csv.writer(self._f)
        if not exists:
            self._w.writerow(self.columns)
            self._f.flush()

    def write(self, row: dict) -> None:
        self._w.writerow([_cell(row.get(c, "")) for c in self.columns])
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return int(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def prepare_out(path) -> Path:
    """Create the output directory and fail early if it cannot be written."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise PermissionError(f"output directory {out} is not writable: {exc}") from exc
    return out


def gamma_grid(n: int = 10) -> np.ndarray:
    """``n`` evenly spaced coefficients over (0, 1]."""
    return np.arange(1, n + 1) / n


# --- train / eval ---------------------------------------------------------


def cmd_train(cfg: ExperimentConfig) -> Path:
    out = prepare_out(cfg.out)
    if cfg.resume:
        # the checkpoint fixes everything except how long to keep going
        trainer = Trainer.load(cfg.resume)
        trainer.cfg.total_steps = cfg.train.total_steps
        cfg.train, cfg.seed = trainer.cfg, trainer.seed
    else:
        trainer = Trainer(cfg.train, cfg.seed)
    dump_config(cfg, out / "config.ini")
    tc = trainer.cfg
    resumed = bool(cfg.resume)
    ckpt = out / "checkpoint.pkl"
    with CsvSink(out / "metrics.csv", METRIC_COLUMNS, append=resumed) as metrics, \
            CsvSink(out / "timing.csv", ("iteration", "wall_clock"), append=resumed) as timing, \
            CsvSink(out / "eval.csv", EVAL_COLUMNS, append=resumed) as evals:
        t0 = time.perf_counter()
        try:
            while trainer.iteration < tc.n_iterations:
                row = trainer.iterate()
                metrics.write(row)
                timing.write({"iteration": trainer.iteration, "wall_clock": time.perf_counter() - t0})
                log.info("iter %d steps %d return %.3f cost %.3f lambda %.3f", row["iteration"], row["env_steps"],
                         row["mean_return"], row["ma_cost"], row["lambda"])
                last = trainer.iteration == tc.n_iterations
                if trainer.iteration % tc.eval_every == 0 or last:
                    evals.write(trainer.evaluate())
                    trainer.save(ckpt)
        except Exception:
            trainer.save(ckpt)
            log.error("training aborted; checkpoint flushed to %s", ckpt)
            raise
    return out


def cmd_eval(cfg: ExperimentConfig) -> dict:
    out = prepare_out(cfg.out)
    dump_config(cfg, out / "config.ini")
    model, tc = load_model(cfg.eval.checkpoint)
    task = make_task(tc, record=cfg.eval.traces)
    eps = []
    for i, rng in enumerate(episode_rngs(cfg.seed + HELD_OUT_OFFSET, cfg.eval.episodes)):
        eps.append(run_episode(task, model_policy(model), rng))
        if cfg.eval.traces:
            write_trace(out / "traces" / f"episode_{i:04d}.json", task.env.trace)
    row = summarize(eps)
    with CsvSink(out / "eval.csv", EVAL_COLUMNS) as sink:
        sink.write(row)
    return row


def write_trace(path, trace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# --- gamma sweep ------------------------------------------------------------


def fixed_gamma_policy(task, gamma, nominal: str = "goal"):
    """Constant-coefficient policy; for the waypoint interface, aim at the goal."""
    g = np.full(task.n_gamma, float(gamma))

    def policy(obs):
        if isinstance(task, NavTask) and not task.ablate and nominal == "goal":
            w = task.env.world
            b = task.env.cfg.waypoint_bound
            return np.clip(w.goals[0] - w.pos[0], -b, b), g
        return np.zeros(task.act_dim), g

    return policy


def sweep_task(tc: TrainConfig, nominal: str, **env_kw):
    """Task whose nominal controller ignores the policy action."""
    if tc.env == "nav":
        ablate = nominal == "mpc"
        return NavTask(tc.nav_config(**env_kw), ablate=ablate)
    return RaceTask(tc.race_config(**env_kw), ablate=True)


def sweep_strata(cfg: ExperimentConfig):
    if cfg.env == "nav":
        for n in cfg.sweep.agent_counts:
            for ds in cfg.sweep.ds_values:
                yield {"agents": int(n), "ds": float(ds)}, dict(min_agents=int(n), max_agents=int(n), fixed_ds=float(ds))
    else:
        for n in cfg.sweep.opponent_counts:
            yield {"n_opponents": int(n)}, dict(n_opponents=int(n))


def sweep_cell(tc: TrainConfig, nominal: str, env_kw: dict, gamma: float, episodes: int, seed: int,
               mode: str = "fixed") -> dict:
    task = sweep_task(tc, nominal, **env_kw)
    pol = fixed_gamma_policy(task, gamma, nominal)
    eps = [run_episode(task, pol, r, mode=mode) for r in episode_rngs(seed, episodes)]
    return summarize(eps)


def cmd_sweep_gamma(cfg: ExperimentConfig) -> list[dict]:
    out = prepare_out(cfg.out)
    dump_config(cfg, out / "config.ini")
    rows = []
    with CsvSink(out / "sweep.csv", SWEEP_COLUMNS) as sink:
        for labels, env_kw in sweep_strata(cfg):
            for g in gamma_grid(cfg.sweep.n_gammas):
                res = sweep_cell(cfg.train, cfg.sweep.nominal, env_kw, g, cfg.sweep.episodes, cfg.seed)
                row = {"env": cfg.env, "gamma": float(g), **labels, **res}
                sink.write(row)
                rows.append(row)
                log.info("sweep %s gamma %.1f success %.2f collision %.2f", labels, g, res["success_rate"],
                         res["collision_rate"])
    return rows


def best_gamma(rows: list[dict]) -> float:
    """Coefficient with the highest success rate; ties go to fewer collisions, then faster arrival."""
    def key(r):
        t = r["mean_time"]
        return (-r["success_rate"], r["collision_rate"], t if not math.isnan(t) else math.inf, r["gamma"])
    return float(min(rows, key=key)["gamma"])


# --- ablation comparison ------------------------------------------------------


def cmd_ablate(cfg: ExperimentConfig) -> list[dict]:
    model, tc = load_model(cfg.ablate.checkpoint)
    if not tc.ablate:
        raise ValueError("ablate needs a checkpoint trained with train.ablate = true")
    out = prepare_out(cfg.out)
    dump_config(cfg, out / "config.ini")
    seed = cfg.seed + HELD_OUT_OFFSET
    n = cfg.ablate.episodes
    rows = []
    for method, mode in (("S-CBF", "fixed"), ("OD-CBF", "optimal_decay")):
        for g in gamma_grid(cfg.ablate.n_gammas):
            res = sweep_cell(tc, "mpc", {}, g, n, seed, mode=mode)
            rows.append({"method": method, "gamma": float(g), **res})
            log.info("ablate %s gamma %.1f success %.2f collision %.2f", method, g, res["success_rate"],
                     res["collision_rate"])
    task = make_task(tc)
    eps = [run_episode(task, model_policy(model), r) for r in episode_rngs(seed, n)]
    rows.append({"method": "adaptive", "gamma": float("nan"), **summarize(eps)})
    with CsvSink(out / "ablate.csv", ABLATE_COLUMNS) as sink:
        for r in rows:
            sink.write(r)
    summary = {}
    for method in ("S-CBF", "OD-CBF"):
        sub = [r for r in rows if r["method"] == method]
        summary[method] = {
            f"{k}_{stat}": float(fn([r[k] for r in sub]))
            for k in ("success_rate", "collision_rate") for stat, fn in (("mean", np.mean), ("min", np.min),
                                                                          ("max", np.max))
        }
    summary["adaptive"] = {k: rows[-1][k] for k in ("success_rate", "collision_rate", "mean_return")}
    (out / "ablate_summary.json").write_text(json.dumps(summary, indent=2))
    return rows


# --- racing generalization ----------------------------------------------------


def cmd_generalize(cfg: ExperimentConfig) -> list[dict]:
    model, tc = load_model(cfg.generalize.checkpoint)
    if tc.env != "race":
        raise ValueError("generalize needs a racing checkpoint")
    out = prepare_out(cfg.out)
    dump_config(cfg, out / "config.ini")
    rows = []
    g = cfg.generalize
    with CsvSink(out / "generalize.csv", GENERALIZE_COLUMNS) as sink:
        for n_opp in g.opponent_counts:
            task = make_task(tc, n_opponents=int(n_opp), episode_seconds=float(g.seconds))
            eps = [run_episode(task, model_policy(model), r) for r in episode_rngs(cfg.seed + HELD_OUT_OFFSET, g.grids)]
            ranks = np.array([e["rank"] for e in eps])
            row = {"n_opponents": int(n_opp), "grids": g.grids, "mean_rank": float(ranks.mean()),
                   "min_rank": int(ranks.min()), "max_rank": int(ranks.max()),
                   "collisions": int(sum(e["collision"] for e in eps))}
            sink.write(row)
            rows.append(row)
    return rows


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-gamma": cmd_sweep_gamma,
    "ablate": cmd_ablate,
    "generalize": cmd_generalize,
}


def configure_logging() -> None:
    level = os.environ.get("ADAPTIVE_CBF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


__all__ = ["COMMANDS", "CsvSink", "gamma_grid", "best_gamma", "sweep_cell", "read_csv"]
