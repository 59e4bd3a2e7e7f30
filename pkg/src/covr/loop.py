"""End-to-end training loop: interaction, teacher action caching, progressive
fine-tuning of the teacher on curated exploration data, and evaluation.

The loop owns the schedule (fine-tune intervals grow by psi <- psi + psi*c),
flushes completed episodes into the fine-tune buffer with returns attached,
and gates the actor's guidance penalty behind a cold-start delay measured in
completed fine-tune rounds.  Metrics leave through a caller-supplied sink,
one plain dict per event, with no timestamps so equal-seed runs produce
byte-equal streams.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import curation
from .curation import FineTuneBuffer, FineTuneSample, RunningStat
from .numcore import rng_stream
from .sac import Transition, sample_action, save_agent
from .teacher import TeacherModel, save_teacher


# ---------- schedule ----------


@dataclass(frozen=True)
class ScheduleState:
    """Progressive fine-tune schedule: c rounds done, f_t steps since last."""

    psi_0: int = 5000
    c: int = 0
    f_t: int = 0
    psi_current: int = -1

    def __post_init__(self):
        if self.psi_current < 0:
            object.__setattr__(self, "psi_current", self.psi_0)


def schedule_tick(s: ScheduleState) -> ScheduleState:
    return dataclasses.replace(s, f_t=s.f_t + 1)


def schedule_advance(s: ScheduleState) -> ScheduleState:
    """After a completed round: increment c, stretch the interval, restart f_t.

    The recurrence psi_{c+1} = psi_c + psi_c*c evaluated at the incremented
    count gives interval sequences like 5000, 10000, 30000, 120000.
    """
    c = s.c + 1
    return dataclasses.replace(s, c=c, psi_current=s.psi_current * (1 + c), f_t=0)


def should_fine_tune(s: ScheduleState) -> bool:
    """True when the step counter hits the interval; guarded against f_t=0."""
    return s.f_t > 0 and s.f_t % s.psi_current == 0


@dataclass
class ColdStartConfig:
    """Guidance delay (in fine-tune rounds) and the warmup action source."""

    delay: int = 2
    warmup_action_source: str = "random"

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError(f"guidance delay must be non-negative, got {self.delay}")
        if self.warmup_action_source not in ("random", "teacher"):
            raise ValueError(
                f"warmup action source must be 'random' or 'teacher', got "
                f"{self.warmup_action_source!r}")


@dataclass
class LoopConfig:
    total_steps: int = 100000
    warmup: int = 1000
    gamma: float = 0.99
    teacher_cadence: int = 10
    guide_intermediate: bool = True
    psi_0: int = 5000
    fine_tune_enabled: bool = True
    guidance_enabled: bool = True
    guidance_lambda: float = 2.0
    anneal_guidance: bool = False
    anneal_delta: float = 0.01
    anneal_every: int = 200
    anneal_floor: float = 0.1
    cold_start: ColdStartConfig = field(default_factory=ColdStartConfig)
    guidance_source: str = "teacher"
    replay_top_frac: float = 0.8
    replay_pool_size: int = 10
    filter_kind: str = "eddf"
    filter_q: float = 0.8
    score_kind: str = "return"
    weighting: str = "ralw"
    raw_sigmoid: bool = False
    use_zscore: bool = True
    ft_epochs: int = 2
    ft_batch_size: int = 32
    ft_lr: float = 1e-4
    eps_ls: float = 0.1
    eval_every: int = 0
    eval_episodes: int = 10
    teacher_eval_episodes: int = 0


def _validate(cfg: LoopConfig, teacher_model):
    if cfg.filter_kind not in ("eddf", "random", "topk"):
        raise ValueError(f"unknown filter kind {cfg.filter_kind!r}")
    if cfg.score_kind not in ("return", "reward", "qvalue"):
        raise ValueError(f"unknown score kind {cfg.score_kind!r}")
    if cfg.weighting not in ("ralw", "uniform", "random", "zero"):
        raise ValueError(f"unknown weighting {cfg.weighting!r}")
    if cfg.guidance_source not in ("teacher", "replay"):
        raise ValueError(f"unknown guidance source {cfg.guidance_source!r}")
    if cfg.cold_start.warmup_action_source == "teacher" and teacher_model is None:
        raise ValueError("warmup action source 'teacher' requires a teacher model")


def _current_lambda(cfg: LoopConfig, rounds_done: int, t: int, activation_step):
    if not cfg.guidance_enabled or cfg.guidance_lambda <= 0:
        return 0.0
    if rounds_done < cfg.cold_start.delay or activation_step is None:
        return 0.0
    if not cfg.anneal_guidance:
        return cfg.guidance_lambda
    decay = cfg.anneal_delta * ((t - activation_step) // cfg.anneal_every)
    return max(cfg.anneal_floor, cfg.guidance_lambda - decay)


def _replay_guidance_action(pool, frac, rng, action_dim):
    """Guidance action for the replay-source ablation.

    With probability `frac` an action is drawn uniformly from the stored
    top-return episodes; otherwise (or while the pool is still empty) the
    action is uniform random in the action box.
    """
    if pool and rng.uniform() < frac:
        ep_actions = pool[int(rng.integers(len(pool)))][1]
        return ep_actions[int(rng.integers(len(ep_actions)))].copy()
    return rng.uniform(-1.0, 1.0, size=action_dim)


def _selection_scores(cfg: LoopConfig, df: FineTuneBuffer, agent):
    if cfg.score_kind == "return":
        return None
    if cfg.score_kind == "reward":
        return [s.reward for s in df.samples]
    nets = getattr(agent, "nets", None)
    if nets is None:
        raise ValueError("q-value scoring requires agent networks")
    obs = np.array([s.obs for s in df.samples], dtype=np.float64)
    act = np.array([s.action for s in df.samples], dtype=np.float64)
    x = np.hstack([nets.encode(obs), act])
    q = np.minimum(nets.q1.forward(x)[:, 0], nets.q2.forward(x)[:, 0])
    return [float(v) for v in q]


def run_training(make_env, agent, teacher_model, cfg: LoopConfig, seed: int,
                 sink=None, checkpoint_dir=None, stop_fn=None) -> dict:
    """Run the full interaction/update/fine-tune loop for cfg.total_steps.

    Args:
        make_env: zero-argument factory; the training env is built once and
            every evaluation gets its own fresh instance.
        agent: SAC agent (anything with act/update/replay works for dry runs).
        teacher_model: guidance model, or None for plain SAC.
        seed: master seed; env, warmup, and curation streams are derived.
        sink: optional callable receiving one metrics dict per event.
        checkpoint_dir: if set, agent/teacher checkpoints land here at every
            fine-tune boundary and at termination.
        stop_fn: optional (step, eval_result) -> bool early-stop predicate,
            consulted after each periodic evaluation.

    Returns a summary dict including the fine-tune buffer and final schedule.
    """
    _validate(cfg, teacher_model)
    emit = sink if sink is not None else (lambda rec: None)
    env = make_env()
    rng_env = rng_stream(seed, domain=10)
    rng_warm = rng_stream(seed, domain=11)
    rng_ft = rng_stream(seed, domain=12)
    rng_guid = rng_stream(seed, domain=13)
    top_pool = []
    state = ScheduleState(psi_0=cfg.psi_0)
    df = FineTuneBuffer()
    ent_stats = RunningStat()
    last_entropy = None
    rounds_done = 0
    activation_step = 0 if cfg.cold_start.delay == 0 else None
    stopped_early = False
    last_eval = None
    last_eval_step = -1
    start_time = time.monotonic()

    if teacher_model is not None and cfg.teacher_eval_episodes > 0:
        base = evaluate_teacher(teacher_model, make_env(),
                                cfg.teacher_eval_episodes, seed=seed + 2_000_000)
        emit({"type": "teacher_eval", "step": 0, "iteration": 0,
              "mean": base["mean"], "std": base["std"]})

    obs = None
    episode = 0
    ep_obs, ep_actions, ep_rewards = [], [], []
    cached_av = None
    av_age = 0

    for t in range(1, cfg.total_steps + 1):
        try:
            if obs is None:
                obs = env.reset(rng_env)
                ep_obs, ep_actions, ep_rewards = [], [], []
                cached_av = None
                av_age = 0

            stale = cached_av is None or av_age >= cfg.teacher_cadence
            if stale and cfg.guidance_source == "replay":
                cached_av = _replay_guidance_action(
                    top_pool, cfg.replay_top_frac, rng_guid, env.action_dim)
                av_age = 0
            elif stale and teacher_model is not None:
                _, action_v = teacher_model.infer(obs, mode="greedy")
                cached_av = np.asarray(action_v, dtype=np.float64)
                av_age = 0

            if t <= cfg.warmup:
                if cfg.cold_start.warmup_action_source == "teacher":
                    action = cached_av.copy()
                else:
                    action = rng_warm.uniform(-1.0, 1.0, size=env.action_dim)
            else:
                action = agent.act(obs)

            result = env.step(action)
            terminal = bool(result.done and not result.info.get("time_limit", False))
            attach = cached_av is not None and (cfg.guide_intermediate or av_age == 0)
            agent.replay.add(Transition(
                obs=obs, action=action, reward=result.reward,
                next_obs=result.observation, done=terminal,
                a_v=cached_av if attach else None,
                a_v_age=av_age if attach else -1))
            ep_obs.append(obs)
            ep_actions.append(action)
            ep_rewards.append(result.reward)

            if t > cfg.warmup:
                lam = _current_lambda(cfg, rounds_done, t, activation_step)
                info = agent.update(lam=lam)
                if info is not None and "entropy" in info:
                    last_entropy = info["entropy"]
                    ent_stats.update(last_entropy)

            if result.done:
                gs = curation.returns_to_go(ep_rewards, cfg.gamma)
                for k in range(len(ep_rewards)):
                    df.append(FineTuneSample(
                        obs=ep_obs[k], action=ep_actions[k], g=gs[k],
                        reward=ep_rewards[k], episode=episode, step=k))
                emit({"type": "episode", "step": t, "episode": episode,
                      "return": float(sum(ep_rewards)),
                      "length": len(ep_rewards),
                      "progress": float(env.progress_metric())})
                if cfg.guidance_source == "replay":
                    top_pool.append((float(sum(ep_rewards)),
                                     np.array(ep_actions, dtype=np.float64)))
                    top_pool.sort(key=lambda item: -item[0])
                    del top_pool[cfg.replay_pool_size:]
                episode += 1
                obs = None
            else:
                obs = result.observation
            av_age += 1

            state = schedule_tick(state)
            if (cfg.fine_tune_enabled and teacher_model is not None
                    and should_fine_tune(state)):
                eps_t = last_entropy if last_entropy is not None else 0.0
                rec = _fine_tune_round(cfg, agent, teacher_model, df, eps_t,
                                       ent_stats, rng_ft, t)
                if rec["kept"] == 0 or len(df) == 0:
                    emit(rec)
                else:
                    df.clear()
                    state = schedule_advance(state)
                    rounds_done += 1
                    rec["iteration"] = rounds_done
                    if activation_step is None and rounds_done >= cfg.cold_start.delay:
                        activation_step = t
                    if cfg.teacher_eval_episodes > 0:
                        tev = evaluate_teacher(teacher_model, make_env(),
                                               cfg.teacher_eval_episodes,
                                               seed=seed + 2_000_000)
                        rec["teacher_eval_mean"] = tev["mean"]
                        rec["teacher_eval_std"] = tev["std"]
                    emit(rec)
                    _write_checkpoints(checkpoint_dir, agent, teacher_model,
                                       f"round{rounds_done}")

            if cfg.eval_every and t % cfg.eval_every == 0 and getattr(agent, "nets", None) is not None:
                last_eval = evaluate_policy(agent.nets, make_env(),
                                            cfg.eval_episodes, seed=seed + 1_000_000)
                last_eval_step = t
                emit({"type": "eval", "step": t, "mean": last_eval["mean"],
                      "std": last_eval["std"], "progress": last_eval["progress"],
                      "episodes": cfg.eval_episodes})
                if stop_fn is not None and stop_fn(t, last_eval):
                    stopped_early = True
                    break
        except Exception as err:
            raise RuntimeError(f"training aborted at step {t}: {err}") from err

    final_step = t
    if (cfg.eval_every and getattr(agent, "nets", None) is not None
            and last_eval_step != final_step):
        last_eval = evaluate_policy(agent.nets, make_env(),
                                    cfg.eval_episodes, seed=seed + 1_000_000)
        emit({"type": "eval", "step": final_step, "mean": last_eval["mean"],
              "std": last_eval["std"], "progress": last_eval["progress"],
              "episodes": cfg.eval_episodes})
    _write_checkpoints(checkpoint_dir, agent, teacher_model, "final")

    return {
        "steps": final_step,
        "episodes": episode,
        "fine_tune_rounds": rounds_done,
        "stopped_early": stopped_early,
        "wall_clock": time.monotonic() - start_time,
        "buffer": df,
        "final_eval": last_eval,
        "schedule": {"c": state.c, "psi_current": state.psi_current,
                     "f_t": state.f_t},
    }


def _fine_tune_round(cfg, agent, teacher_model, df, eps_t, ent_stats, rng_ft, t):
    """Select, weight, and fine-tune; returns the metrics record.

    A record with kept == 0 signals a skipped round: no training happened,
    the buffer is retained, and the schedule does not advance.
    """
    if len(df) == 0:
        return {"type": "fine_tune_skipped", "step": t, "eps_t": float(eps_t),
                "tau": 0.0, "kept": 0, "total": 0}
    scores = _selection_scores(cfg, df, agent)
    if cfg.filter_kind == "eddf":
        kept, report = curation.eddf_select(
            df, eps_t, ent_stats, raw_sigmoid=cfg.raw_sigmoid,
            use_zscore=cfg.use_zscore, scores=scores)
    elif cfg.filter_kind == "random":
        kept, report = curation.select_random(df, cfg.filter_q, rng_ft)
    else:
        kept, report = curation.select_topk(df, cfg.filter_q, scores=scores)
    if not kept:
        return {"type": "fine_tune_skipped", "step": t, "eps_t": float(eps_t),
                "tau": float(report.tau), "kept": 0, "total": len(df)}
    ft = curation.fine_tune_teacher(
        teacher_model, kept, epochs=cfg.ft_epochs, batch_size=cfg.ft_batch_size,
        lr=cfg.ft_lr, rng=rng_ft, eps_ls=cfg.eps_ls, weighting=cfg.weighting)
    return {
        "type": "fine_tune", "step": t, "iteration": 0,
        "eps_t": float(eps_t), "tau": float(report.tau),
        "factor": float(report.factor), "median": float(report.median),
        "iqr": float(report.iqr), "method": report.method,
        "degenerate": bool(report.degenerate),
        "kept": len(kept), "total": len(df),
        "kept_fraction": float(report.kept_fraction),
        "loss_before": float(ft["initial_loss"]),
        "loss_after": float(ft["final_loss"]),
        "ft_steps": int(ft["steps"]),
        "skipped_batches": int(ft["skipped_batches"]),
        "weighting": ft["weighting"],
    }


def _write_checkpoints(checkpoint_dir, agent, teacher_model, tag):
    if checkpoint_dir is None:
        return
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    nets = getattr(agent, "nets", None)
    if nets is not None:
        save_agent(out / f"agent_{tag}.ckpt", nets)
    if isinstance(teacher_model, TeacherModel):
        save_teacher(out / f"teacher_{tag}.ckpt", teacher_model)


# ---------- evaluation ----------


def evaluate_policy(nets, env, episodes: int, seed: int, policy=None) -> dict:
    """Roll out deterministic-mode actions and report return statistics.

    Args:
        nets: agent networks; ignored when a `policy` callable is given.
        env: environment instance; reset/stepped here, so pass a fresh one
            if training state must stay untouched.
        episodes: number of evaluation episodes (>= 1).
        seed: evaluation stream seed, independent of training streams.
        policy: optional obs -> action override.

    Returns dict with mean, std (population), per-episode returns, and the
    mean progress metric.
    """
    if episodes < 1:
        raise ValueError("evaluation needs at least one episode")
    rng = rng_stream(seed, domain=0)
    returns, progress = [], []
    for _ in range(episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            if policy is not None:
                action = policy(obs)
            else:
                action, _ = sample_action(nets, obs, None, deterministic=True)
            result = env.step(action)
            total += result.reward
            obs = result.observation
            if result.done:
                break
        returns.append(float(total))
        progress.append(float(env.progress_metric()))
    return {"mean": float(np.mean(returns)), "std": float(np.std(returns)),
            "returns": returns, "progress": float(np.mean(progress)),
            "episodes": episodes}


def evaluate_teacher(model, env, episodes: int, seed: int) -> dict:
    """Greedy teacher actions drive the environment directly."""

    def policy(obs):
        _, action = model.infer(obs, mode="greedy")
        return action

    return evaluate_policy(None, env, episodes, seed, policy=policy)
