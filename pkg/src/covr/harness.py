"""Experiment harness: run directories, metrics persistence, the ablation
matrix, standalone curation, and summary emission.

Each run owns one directory holding the resolved config, a metrics stream,
a schedule trace, a timing sidecar, and checkpoints.  Metrics and trace
records carry no wall-clock values, so two runs with equal config and seed
produce byte-equal streams; elapsed time lives only in the timing file.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import curation, envs, loop, sac
from . import teacher as teacher_mod
from .config import ExperimentConfig, write_config
from .curation import FineTuneBuffer, RunningStat
from .numcore import rng_stream

# model-init and data seeds for teacher pretraining; constant so every run
# in a sweep shares one cached pretrained teacher
PRETRAIN_SEED = 5


# ---------- metrics persistence ----------


class MetricsSink:
    """Writes one JSON line per event across the three per-run files."""

    def __init__(self, run_dir):
        run_dir = Path(run_dir)
        self._metrics = open(run_dir / "metrics.jsonl", "w")
        self._trace = open(run_dir / "schedule_trace.jsonl", "w")
        self._timing = open(run_dir / "timing.jsonl", "w")
        self._start = time.monotonic()
        self._line(self._metrics, {"format": "covr-metrics", "version": 1})
        self._line(self._trace, {"format": "covr-schedule-trace", "version": 1})
        self._line(self._timing, {"format": "covr-timing", "version": 1})

    @staticmethod
    def _line(fh, obj):
        fh.write(json.dumps(obj, sort_keys=True) + "\n")
        fh.flush()

    def __call__(self, rec):
        self._line(self._metrics, rec)
        if rec["type"] in ("fine_tune", "fine_tune_skipped"):
            self._line(self._trace, {
                "kind": rec["type"],
                "step": rec["step"],
                "tau": rec.get("tau", 0.0),
                "kept_fraction": rec.get("kept_fraction", 0.0),
                "loss_delta": rec.get("loss_after", 0.0) - rec.get("loss_before", 0.0),
            })
        self._line(self._timing, {"kind": rec["type"], "step": rec.get("step", -1),
                                  "elapsed": round(time.monotonic() - self._start, 6)})

    def close(self, summary=None):
        if summary is not None:
            self._line(self._timing, {"kind": "run_complete",
                                      "step": summary["steps"],
                                      "elapsed": round(summary["wall_clock"], 6)})
        for fh in (self._metrics, self._trace, self._timing):
            fh.close()


# ---------- builders ----------


def _obs_dim(env_cfg) -> int:
    return env_cfg.grid * env_cfg.grid * env_cfg.frame_stack


def build_env_factory(cfg: ExperimentConfig):
    env_cfg = dataclasses.replace(cfg.env)
    return lambda: envs.make_env(env_cfg)


def build_agent(cfg: ExperimentConfig, seed: int) -> sac.SacAgent:
    s = cfg.sac
    return sac.SacAgent(sac.SacConfig(
        obs_dim=_obs_dim(cfg.env), action_dim=2,
        latent_dim=s.latent_dim, hidden=s.hidden, gamma=s.gamma,
        lr_actor=s.lr_actor, lr_critic=s.lr_critic, lr_alpha=s.lr_alpha,
        tau_ema=s.tau_ema, batch_size=s.batch_size, warmup=s.warmup,
        replay_capacity=s.replay_capacity, actor_every=s.actor_every,
        target_every=s.target_every, init_alpha=s.init_alpha,
        alpha_frozen=s.alpha_frozen, aux_enabled=s.aux_enabled,
        aux_weight=s.aux_weight, reward_scale=s.reward_scale,
        guidance_on_mean=cfg.guidance.on_mean,
    ), seed=seed)


def build_loop_config(cfg: ExperimentConfig) -> loop.LoopConfig:
    return loop.LoopConfig(
        total_steps=cfg.run.steps, warmup=cfg.sac.warmup, gamma=cfg.sac.gamma,
        teacher_cadence=cfg.teacher.cadence,
        guide_intermediate=cfg.guidance.intermediate,
        psi_0=cfg.schedule.psi_0,
        fine_tune_enabled=cfg.schedule.fine_tune and cfg.teacher.enabled,
        guidance_enabled=cfg.guidance.enabled,
        guidance_lambda=cfg.guidance.lam,
        anneal_guidance=cfg.guidance.annealed,
        anneal_delta=cfg.guidance.anneal_delta,
        anneal_every=cfg.guidance.anneal_every,
        anneal_floor=cfg.guidance.anneal_floor,
        cold_start=loop.ColdStartConfig(delay=cfg.guidance.delay,
                                        warmup_action_source=cfg.guidance.warmup_source),
        guidance_source=cfg.guidance.source,
        replay_top_frac=cfg.guidance.replay_frac,
        filter_kind=cfg.curation.filter, filter_q=cfg.curation.filter_q,
        score_kind=cfg.curation.score, weighting=cfg.curation.weighting,
        raw_sigmoid=cfg.curation.raw_sigmoid, use_zscore=cfg.curation.use_zscore,
        ft_epochs=cfg.teacher.ft_epochs, ft_batch_size=cfg.teacher.ft_batch_size,
        ft_lr=cfg.teacher.ft_lr, eps_ls=cfg.teacher.eps_ls,
        eval_every=cfg.run.eval_every, eval_episodes=cfg.run.eval_episodes,
        teacher_eval_episodes=cfg.run.teacher_eval_episodes,
    )


def teacher_cache_key(cfg: ExperimentConfig) -> str:
    blob = json.dumps({
        "env": dataclasses.asdict(cfg.env),
        "bins": cfg.teacher.bins, "hidden": cfg.teacher.hidden,
        "sigma_n": cfg.teacher.sigma_n,
        "samples": cfg.teacher.pretrain_samples,
        "epochs": cfg.teacher.pretrain_epochs,
        "batch": cfg.teacher.pretrain_batch, "lr": cfg.teacher.pretrain_lr,
        "seed": PRETRAIN_SEED,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def get_or_pretrain_teacher(cfg: ExperimentConfig, cache_dir):
    """Pretrain the teacher once per distinct setting; runs share the cache.

    Always returns a freshly loaded copy so in-loop fine-tuning never leaks
    between runs.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"teacher_{teacher_cache_key(cfg)}.ckpt"
    if not path.exists():
        model = teacher_mod.TeacherModel(
            obs_dim=_obs_dim(cfg.env), action_dim=2, n_bins=cfg.teacher.bins,
            hidden=cfg.teacher.hidden, rng=rng_stream(PRETRAIN_SEED, domain=0))
        env = envs.make_env(dataclasses.replace(cfg.env))
        teacher_mod.pretrain(
            model, env, n_samples=cfg.teacher.pretrain_samples,
            sigma_n=cfg.teacher.sigma_n, epochs=cfg.teacher.pretrain_epochs,
            batch_size=cfg.teacher.pretrain_batch, lr=cfg.teacher.pretrain_lr,
            rng=rng_stream(PRETRAIN_SEED, domain=7))
        teacher_mod.save_teacher(path, model)
    return teacher_mod.load_teacher(path)


# ---------- ablation matrix ----------


def _set(path_value_pairs):
    def apply(cfg):
        for path, value in path_value_pairs:
            section, name = path.split(".")
            setattr(getattr(cfg, section), name, value)
    return apply


_VARIANT_DEFS = {
    "full": _set([]),
    "m1": _set([("curation.filter", "random"), ("curation.filter_q", 0.8)]),
    "m2": _set([("curation.filter", "topk"), ("curation.filter_q", 0.8)]),
    "m3": _set([("curation.filter", "topk"), ("curation.filter_q", 0.9)]),
    "m4": _set([("curation.filter", "topk"), ("curation.filter_q", 0.95)]),
    "m5": _set([("curation.use_zscore", False)]),
    "m6": _set([("curation.score", "reward")]),
    "m7": _set([("curation.score", "qvalue")]),
    "m8": _set([("curation.weighting", "uniform")]),
    "m9": _set([("curation.weighting", "random")]),
    "m10": _set([("guidance.source", "replay"), ("guidance.replay_frac", 0.8),
                 ("guidance.delay", 0), ("schedule.fine_tune", False),
                 ("teacher.enabled", False)]),
    "m11": _set([("guidance.source", "replay"), ("guidance.replay_frac", 0.5),
                 ("guidance.delay", 0), ("schedule.fine_tune", False),
                 ("teacher.enabled", False)]),
    "sac": _set([("teacher.enabled", False), ("guidance.enabled", False),
                 ("schedule.fine_tune", False)]),
    "dpl": _set([("schedule.fine_tune", False), ("guidance.delay", 0)]),
    "apl": _set([("schedule.fine_tune", False), ("guidance.delay", 0),
                 ("guidance.annealed", True)]),
}

_VARIANT_ALIASES = {
    "covr": "full",
    "random-filter": "m1",
    "topk80": "m2",
    "topk90": "m3",
    "topk95": "m4",
    "no-zscore": "m5",
    "score-reward": "m6",
    "score-qvalue": "m7",
    "no-ralw": "m8",
    "random-weights": "m9",
    "replay80": "m10",
    "replay50": "m11",
}


def apply_variant(cfg: ExperimentConfig, name: str):
    """Resolve a variant name or alias; returns (canonical name, new config)."""
    canonical = _VARIANT_ALIASES.get(name, name)
    transform = _VARIANT_DEFS.get(canonical)
    if transform is None:
        known = sorted(_VARIANT_DEFS) + sorted(_VARIANT_ALIASES)
        raise ValueError(f"unknown variant {name!r}; known: {', '.join(known)}")
    out = copy.deepcopy(cfg)
    transform(out)
    return canonical, out


# ---------- subcommands ----------


def _train_single(cfg: ExperimentConfig, variant: str, seed: int, out_root):
    out_root = Path(out_root)
    run_dir = out_root / f"{variant}-s{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    cell = copy.deepcopy(cfg)
    cell.run.seeds = (seed,)
    cell.run.out = str(out_root)
    write_config(cell, run_dir / "config.txt")
    (run_dir / "run.json").write_text(json.dumps({
        "format": "covr-run", "version": 1, "variant": variant, "seed": seed,
        "env": cell.env.name, "steps": cell.run.steps,
    }, sort_keys=True) + "\n")

    model = None
    if cell.teacher.enabled:
        model = get_or_pretrain_teacher(cell, out_root / "_teacher_cache")
    agent = build_agent(cell, seed)
    sink = MetricsSink(run_dir)
    summary = None
    try:
        summary = loop.run_training(build_env_factory(cell), agent, model,
                                    build_loop_config(cell), seed=seed,
                                    sink=sink, checkpoint_dir=run_dir)
    finally:
        sink.close(summary)
    return run_dir


def _ablate(cfg: ExperimentConfig):
    out_root = Path(cfg.run.out)
    out_root.mkdir(parents=True, exist_ok=True)
    cells = []
    run_dirs = []
    for name in cfg.run.variants:
        canonical, vcfg = apply_variant(cfg, name)
        for seed in cfg.run.seeds:
            try:
                run_dirs.append(_train_single(vcfg, canonical, seed, out_root))
                cells.append({"variant": canonical, "seed": seed, "status": "ok"})
            except Exception as err:  # isolate the failing cell
                cells.append({"variant": canonical, "seed": seed,
                              "status": "failed", "error": str(err)})
    (out_root / "ablate_report.json").write_text(json.dumps({
        "format": "covr-ablate-report", "version": 1, "cells": cells,
    }, sort_keys=True, indent=2) + "\n")
    emit_summary(run_dirs, out_root)
    failed = [c for c in cells if c["status"] != "ok"]
    return {"status": 1 if failed else 0, "run_dirs": run_dirs, "cells": cells}


def _evaluate_run(cfg: ExperimentConfig, run_dir):
    run_dir = Path(run_dir)
    agent_ckpt = run_dir / "agent_final.ckpt"
    if not agent_ckpt.exists():
        raise FileNotFoundError(f"{agent_ckpt}: run directory has no agent_final.ckpt")
    nets = sac.load_agent(agent_ckpt)
    factory = build_env_factory(cfg)
    seed = cfg.run.seeds[0]
    report = {
        "format": "covr-eval", "version": 1, "seed": seed,
        "episodes": cfg.run.eval_episodes,
        "agent": loop.evaluate_policy(nets, factory(), cfg.run.eval_episodes,
                                      seed=seed + 1_000_000),
        "teacher": None,
    }
    teacher_ckpt = run_dir / "teacher_final.ckpt"
    if teacher_ckpt.exists():
        model = teacher_mod.load_teacher(teacher_ckpt)
        report["teacher"] = loop.evaluate_teacher(model, factory(),
                                                  cfg.run.eval_episodes,
                                                  seed=seed + 2_000_000)
    path = run_dir / "eval.json"
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return {"status": 0, "report": report, "path": path}


def _curate(cfg: ExperimentConfig, buffer_path):
    if buffer_path is None:
        raise ValueError("curate needs a buffer record file (--buffer)")
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    df = curation.load_buffer(buffer_path)
    cur = cfg.curation

    stats = RunningStat()
    stats.update(cur.eps_mean - cur.eps_std)
    stats.update(cur.eps_mean + cur.eps_std)
    scores = None
    if cur.score == "reward":
        scores = [s.reward for s in df.samples]
    elif cur.score == "qvalue":
        raise ValueError("q-value scoring needs live agent networks; "
                         "unavailable in standalone curation")

    rng = rng_stream(cfg.run.seeds[0], domain=12)
    if cur.filter == "eddf":
        kept, report = curation.eddf_select(df, cur.eps_t, stats,
                                            raw_sigmoid=cur.raw_sigmoid,
                                            use_zscore=cur.use_zscore,
                                            scores=scores)
    elif cur.filter == "random":
        kept, report = curation.select_random(df, cur.filter_q, rng)
    else:
        kept, report = curation.select_topk(df, cur.filter_q, scores=scores)

    if not kept:
        weights = np.zeros(0)
    elif cur.weighting == "ralw":
        weights = curation.ralw_weights(
            curation.ralw_normalize([s.g for s in kept]))
    elif cur.weighting == "uniform":
        weights = np.ones(len(kept))
    else:
        weights = rng.uniform(0.0, 1.0, size=len(kept))

    selected = FineTuneBuffer()
    for s in kept:
        selected.append(s)
    curation.save_buffer(out / "selected.jsonl", selected)
    payload = {
        "format": "covr-curation-report", "version": 1,
        "tau": float(report.tau), "factor": float(report.factor),
        "median": float(report.median), "iqr": float(report.iqr),
        "method": report.method, "degenerate": bool(report.degenerate),
        "kept": len(kept), "total": len(df),
        "kept_fraction": float(report.kept_fraction),
        "indices": [int(i) for i in report.indices],
        "weighting": cur.weighting,
        "weights": [float(w) for w in weights],
    }
    (out / "report.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    write_config(cfg, out / "config.txt")
    return {"status": 0, "report": payload, "selected": out / "selected.jsonl"}


def run_experiment(cfg: ExperimentConfig, subcommand: str, *,
                   run_dir=None, buffer_path=None) -> dict:
    """Dispatch one subcommand; returns a dict with at least a status code."""
    if subcommand == "train":
        out_root = Path(cfg.run.out)
        out_root.mkdir(parents=True, exist_ok=True)
        dirs = [_train_single(cfg, "train", seed, out_root)
                for seed in cfg.run.seeds]
        emit_summary(dirs, out_root)
        return {"status": 0, "run_dirs": dirs}
    if subcommand == "ablate":
        return _ablate(cfg)
    if subcommand == "eval":
        return _evaluate_run(cfg, run_dir if run_dir is not None else cfg.run.out)
    if subcommand == "curate":
        return _curate(cfg, buffer_path)
    raise ValueError(f"unknown subcommand {subcommand!r}")


# ---------- summaries ----------


def _final_metrics(metrics_path):
    """Final ER/DD plus the episode series from one metrics stream."""
    episodes = []
    final_eval = None
    with open(metrics_path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "covr-metrics":
            raise ValueError(f"{metrics_path}: not a metrics stream")
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["type"] == "episode":
                episodes.append((rec["step"], rec["return"], rec["progress"]))
            elif rec["type"] == "eval":
                final_eval = rec
    if final_eval is not None:
        return final_eval["mean"], final_eval["progress"], episodes
    if episodes:
        tail = episodes[-10:]
        return (float(np.mean([e[1] for e in tail])),
                float(np.mean([e[2] for e in tail])), episodes)
    return None, None, episodes


def emit_summary(run_dirs, out_dir) -> dict:
    """Write summary.tsv plus per-run series files; idempotent bytewise.

    Final ER/DD come from the last evaluation record (falling back to the
    mean of the last ten episodes); per-variant rows aggregate seeds with
    population standard deviation.  Runs without a readable metrics stream
    are reported as incomplete but never block the summary.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series_dir = out_dir / "series"
    series_dir.mkdir(exist_ok=True)

    runs = []
    incomplete = []
    for d in sorted((Path(p) for p in run_dirs), key=lambda p: p.name):
        variant, seed = d.name, -1
        manifest_path = d / "run.json"
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
            variant = manifest.get("variant", variant)
            seed = manifest.get("seed", seed)
        metrics_path = d / "metrics.jsonl"
        if not metrics_path.exists():
            incomplete.append(d)
            runs.append({"variant": variant, "ok": False})
            continue
        er, dd, episodes = _final_metrics(metrics_path)
        if er is None:
            incomplete.append(d)
            runs.append({"variant": variant, "ok": False})
            continue
        series_path = series_dir / f"{variant}-s{seed}.csv"
        rows = "".join(f"{step},{ret!r}\n" for step, ret, _ in episodes)
        series_path.write_text("# covr-series v1\nstep,return\n" + rows)
        runs.append({"variant": variant, "ok": True, "er": er, "dd": dd})

    lines = ["# covr-summary v1",
             "variant\tn\ter_mean\ter_std\tdd_mean\tdd_std\tstatus"]
    for variant in sorted({r["variant"] for r in runs}):
        group = [r for r in runs if r["variant"] == variant]
        good = [r for r in group if r["ok"]]
        missing = len(group) - len(good)
        status = "ok" if missing == 0 else f"incomplete:{missing}"
        if not good:
            lines.append(f"{variant}\t0\t-\t-\t-\t-\t{status}")
            continue
        er = np.array([r["er"] for r in good])
        dd = np.array([r["dd"] for r in good])
        lines.append(f"{variant}\t{len(good)}"
                     f"\t{er.mean():.6f}\t{er.std():.6f}"
                     f"\t{dd.mean():.6f}\t{dd.std():.6f}\t{status}")
    path = out_dir / "summary.tsv"
    path.write_text("\n".join(lines) + "\n")
    return {"rows": lines[2:], "incomplete": incomplete, "path": path}
