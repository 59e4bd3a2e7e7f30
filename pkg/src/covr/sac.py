"""Soft actor-critic on pixel observations, with optional teacher guidance.

A shared tanh encoder maps stacked frames (lifted with their elementwise
squares, see pixel_features) to a small latent; the actor head
emits a squashed-Gaussian policy over that latent and twin critics score
latent-action pairs.  The actor loss optionally carries a guidance penalty
pulling sampled actions toward cached teacher actions.  Everything runs on
float64 numpy with hand-written gradients (see numcore.Mlp); each loss
function returns its gradients explicitly so the tests can check them against
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import (
    Adam,
    Mlp,
    mlp_arrays,
    mlp_from_arrays,
    mlp_meta,
    rng_stream,
    save_checkpoint,
    load_checkpoint,
)

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
# float64 tanh rounds to exactly +-1 for |u| > ~19; keep actions strictly inside
ACTION_EPS = 1e-12


# ---------- containers ----------


def pixel_features(obs):
    """Lift pixel intensities to [v, 4*v*(1-v)] and rescale to dense norm.

    Sprites drawn into a shared channel differ only by intensity, and a
    single linear map cannot split one channel into per-sprite positions.
    The second feature is an independent mixture of the same sprite
    indicators, which makes the split exactly linear; it vanishes at 0 and 1
    and is scaled to unit range so both channels condition the layer equally.

    Only a handful of pixels are active in any frame, while the encoder's
    fan-in-scaled init assumes dense unit-variance inputs; feeding the raw
    sparse vector leaves the latent two orders of magnitude smaller than the
    action inputs next to it, and the critic spends most of a run just
    inflating the encoder scale.  Renormalizing each feature vector to the
    norm of a dense unit-variance vector (sqrt of its length) keeps the
    latent order one from the first step for any sprite count.
    """
    v = np.asarray(obs, dtype=np.float64)
    f = np.concatenate([v, 4.0 * v * (1.0 - v)], axis=-1)
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    return f * (np.sqrt(f.shape[-1]) / np.maximum(norm, 1e-8))


class AgentNets:
    """Encoder, actor, twin critics with EMA targets, and log-temperature."""

    def __init__(self, obs_dim=768, action_dim=2, latent_dim=50, hidden=64,
                 init_alpha=0.1, aux=False, rng=None):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.latent_dim = latent_dim
        self.encoder = Mlp([2 * obs_dim, latent_dim], activation="tanh", rng=rng)
        self.actor = Mlp([latent_dim, hidden, hidden, 2 * action_dim],
                         activation="relu", output_activation="identity", rng=rng)
        # start the policy near zero mean and unit std so early actions
        # explore instead of saturating the squash
        for p in self.actor.parameters()[-2:]:
            p *= 0.01
        q_sizes = [latent_dim + action_dim, hidden, hidden, 1]
        self.q1 = Mlp(q_sizes, activation="relu", output_activation="identity", rng=rng)
        self.q2 = Mlp(q_sizes, activation="relu", output_activation="identity", rng=rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = np.array([np.log(init_alpha)])
        self.aux = None
        if aux:
            self.aux = Mlp([latent_dim + action_dim, hidden, latent_dim + 1],
                           activation="relu", output_activation="identity", rng=rng)

    def encode(self, obs):
        return self.encoder.forward(pixel_features(obs))

    def encode_cache(self, obs):
        return self.encoder.forward_cache(pixel_features(obs))

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def target_entropy(self) -> float:
        return -float(self.action_dim)


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    a_v: np.ndarray | None = None
    a_v_age: int = -1


class ReplayBuffer:
    """Fixed-capacity ring with uniform no-replacement batch sampling.

    Observations are stored as float32 (pixel intensities survive the round
    trip well inside sampling noise); everything is widened back to float64
    when a batch is drawn.
    """

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.av = np.zeros((capacity, action_dim))
        self.av_mask = np.zeros(capacity)
        self.av_age = np.full(capacity, -1, dtype=np.int64)
        self.idx = 0
        self.size = 0

    def add(self, tr: Transition):
        i = self.idx
        self.obs[i] = tr.obs
        self.next_obs[i] = tr.next_obs
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.dones[i] = float(tr.done)
        if tr.a_v is None:
            self.av[i] = 0.0
            self.av_mask[i] = 0.0
            self.av_age[i] = -1
        else:
            self.av[i] = tr.a_v
            self.av_mask[i] = 1.0
            self.av_age[i] = tr.a_v_age
        self.idx = (self.idx + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def sample(self, rng, batch_size: int) -> dict:
        pick = rng.choice(self.size, size=batch_size, replace=False)
        return {
            "obs": self.obs[pick].astype(np.float64),
            "action": self.actions[pick].copy(),
            "reward": self.rewards[pick].copy(),
            "next_obs": self.next_obs[pick].astype(np.float64),
            "done": self.dones[pick].copy(),
            "av": self.av[pick].copy(),
            "av_mask": self.av_mask[pick].copy(),
            "av_age": self.av_age[pick].copy(),
        }


# ---------- policy math ----------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _log1m_tanh_sq(u):
    """log(1 - tanh(u)^2), computed stably for large |u|."""
    return 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))


def _policy_heads(nets, z):
    out = nets.actor.forward(z)
    a = nets.action_dim
    mean = out[:, :a]
    raw = out[:, a:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def _gaussian_logp(xi, log_std, u):
    """Log-density of the squashed sample, summed over action dimensions."""
    per_dim = -0.5 * xi ** 2 - HALF_LOG_2PI - log_std - _log1m_tanh_sq(u)
    return per_dim.sum(axis=1)


def _squash(u):
    return np.clip(np.tanh(u), -1.0 + ACTION_EPS, 1.0 - ACTION_EPS)


def sample_action(nets, obs, rng, deterministic: bool = False):
    """Draw an action from the squashed-Gaussian policy.

    Args:
        obs: one observation vector or a (B, obs_dim) batch.
        rng: source of the reparameterization noise (unused in deterministic
            mode, which returns tanh of the mean).

    Returns:
        (action, log_prob); log_prob is None in deterministic mode.
    """
    single = np.ndim(obs) == 1
    o = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    z = nets.encode(o)
    mean, log_std = _policy_heads(nets, z)
    if deterministic:
        a = np.tanh(mean)
        return (a[0], None) if single else (a, None)
    xi = rng.standard_normal(mean.shape)
    u = mean + np.exp(log_std) * xi
    a = _squash(u)
    logp = _gaussian_logp(xi, log_std, u)
    return (a[0], float(logp[0])) if single else (a, logp)


def action_log_prob(nets, obs, action):
    """Log-density of a given action under the current policy."""
    single = np.ndim(obs) == 1
    o = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    a = np.atleast_2d(np.asarray(action, dtype=np.float64))
    z = nets.encode(o)
    mean, log_std = _policy_heads(nets, z)
    u = np.arctanh(np.clip(a, -1.0 + 1e-15, 1.0 - 1e-15))
    xi = (u - mean) / np.exp(log_std)
    logp = _gaussian_logp(xi, log_std, u)
    return float(logp[0]) if single else logp


# ---------- losses ----------


def critic_targets(nets, batch, gamma: float, rng) -> np.ndarray:
    """Bellman targets y = r + gamma * (1-done) * (min target Q - alpha*logpi)."""
    next_obs = batch["next_obs"]
    z_next = nets.encode(next_obs)
    mean, log_std = _policy_heads(nets, z_next)
    xi = rng.standard_normal(mean.shape)
    u = mean + np.exp(log_std) * xi
    a_next = _squash(u)
    logp = _gaussian_logp(xi, log_std, u)
    x = np.hstack([z_next, a_next])
    q_min = np.minimum(nets.q1_target.forward(x)[:, 0], nets.q2_target.forward(x)[:, 0])
    v = q_min - nets.alpha * logp
    y = batch["reward"] + gamma * (1.0 - batch["done"]) * v
    if not np.all(np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(y))[0])
        raise FloatingPointError(f"non-finite critic target at transition {bad}")
    return y


def critic_loss(nets, batch, gamma: float, rng, targets=None):
    """Mean squared Bellman error over the batch and both critics.

    Returns (loss, grads) with grads for the encoder and both online critics.
    Targets are treated as constants; pass precomputed ones via `targets` to
    skip the fresh next-action sample.
    """
    y = critic_targets(nets, batch, gamma, rng) if targets is None else targets
    n = y.shape[0]
    z, z_cache = nets.encode_cache(batch["obs"])
    x = np.hstack([z, batch["action"]])
    q1, c1 = nets.q1.forward_cache(x)
    q2, c2 = nets.q2.forward_cache(x)
    d1 = q1[:, 0] - y
    d2 = q2[:, 0] - y
    loss = float((np.sum(d1 ** 2) + np.sum(d2 ** 2)) / (2 * n))
    g1, dx1 = nets.q1.backward(c1, (d1 / n)[:, None])
    g2, dx2 = nets.q2.backward(c2, (d2 / n)[:, None])
    dz = dx1[:, : nets.latent_dim] + dx2[:, : nets.latent_dim]
    ge, _ = nets.encoder.backward(z_cache, dz)
    return loss, {"encoder": ge, "q1": g1, "q2": g2}


def actor_loss_guided(nets, batch, lam: float, rng, guidance_on_mean: bool = False):
    """Entropy-regularized policy loss plus the teacher-guidance penalty.

    loss = mean(alpha*logpi(a|s) - min Q(s,a)) + lam * mean over the batch of
    mask * ||a_v - a||^2, with a the fresh reparameterized sample (or the
    squashed mean when guidance_on_mean is set).  Gradients flow only into
    the actor head; the encoder latent and a_v are treated as constants.

    Returns (loss, actor_grads, info) where info carries the sampled
    log-probabilities for the temperature update and entropy bookkeeping.
    """
    if lam < 0:
        raise ValueError(f"guidance lambda must be non-negative, got {lam}")
    n = batch["obs"].shape[0]
    alpha = nets.alpha
    z = nets.encode(batch["obs"])
    out, actor_cache = nets.actor.forward_cache(z)
    adim = nets.action_dim
    mean = out[:, :adim]
    raw = out[:, adim:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    sigma = np.exp(log_std)
    xi = rng.standard_normal(mean.shape)
    u = mean + sigma * xi
    a = _squash(u)
    logp = _gaussian_logp(xi, log_std, u)

    x = np.hstack([z, a])
    q1, c1 = nets.q1.forward_cache(x)
    q2, c2 = nets.q2.forward_cache(x)
    q_min = np.minimum(q1[:, 0], q2[:, 0])
    loss = float(np.mean(alpha * logp - q_min))

    mask = batch["av_mask"]
    guide_pt = np.tanh(mean) if guidance_on_mean else a
    gdiff = guide_pt - batch["av"]
    if lam > 0:
        loss += float(lam * np.mean(mask * np.sum(gdiff ** 2, axis=1)))

    # d(loss)/da routed through the active critic of the min
    take1 = (q1[:, 0] <= q2[:, 0]).astype(float)
    _, dx1 = nets.q1.backward(c1, (-take1 / n)[:, None])
    _, dx2 = nets.q2.backward(c2, (-(1.0 - take1) / n)[:, None])
    da = dx1[:, nets.latent_dim:] + dx2[:, nets.latent_dim:]
    if lam > 0 and not guidance_on_mean:
        da = da + 2.0 * lam * mask[:, None] * gdiff / n

    # chain to (mean, raw log-std) holding the noise fixed
    du = (alpha * 2.0 * a) / n + da * (1.0 - a ** 2)
    dmean = du.copy()
    if lam > 0 and guidance_on_mean:
        tm = np.tanh(mean)
        dmean += 2.0 * lam * mask[:, None] * (tm - batch["av"]) * (1.0 - tm ** 2) / n
    dlog_std = du * sigma * xi - alpha / n
    in_range = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    draw = np.where(in_range, dlog_std, 0.0)
    grads, _ = nets.actor.backward(actor_cache, np.hstack([dmean, draw]))
    info = {"logp": logp, "entropy": float(-logp.mean()), "q_mean": float(q_min.mean())}
    return loss, grads, info


def temperature_loss(nets, logp, frozen: bool = False):
    """Objective mean(-alpha*(logpi + target_entropy)) and its log-alpha gradient.

    The gradient with respect to log-alpha equals the loss value itself;
    frozen mode reports the loss but suppresses the gradient.
    """
    loss = float(np.mean(-nets.alpha * (np.asarray(logp) + nets.target_entropy())))
    return loss, (0.0 if frozen else loss)


def policy_entropy_estimate(nets, obs, rng) -> float:
    """Monte-Carlo entropy: mean of -logpi over fresh samples."""
    _, logp = sample_action(nets, obs, rng)
    return float(-np.mean(logp))


def soft_update_targets(nets, tau_ema: float):
    """EMA blend target <- (1-tau)*target + tau*online for both critics."""
    for target, online in ((nets.q1_target, nets.q1), (nets.q2_target, nets.q2)):
        for pt, po in zip(target.parameters(), online.parameters()):
            pt *= 1.0 - tau_ema
            pt += tau_ema * po


def aux_transition_loss(nets, batch, target_latents=None):
    """Latent transition/reward prediction error (optional auxiliary task).

    Predicts (next latent, reward) from (latent, action); the next latent
    target comes from the online encoder and is treated as a constant
    (pass precomputed latents via `target_latents` to pin it explicitly).
    The two components are averaged separately and summed so the single
    reward column is not drowned out by the latent block.
    Returns (loss, grads) for the auxiliary head and the encoder.
    """
    if nets.aux is None:
        raise RuntimeError("auxiliary predictor not enabled on these nets")
    n = batch["obs"].shape[0]
    ld = nets.latent_dim
    z, z_cache = nets.encode_cache(batch["obs"])
    z_next = nets.encode(batch["next_obs"]) if target_latents is None else target_latents
    pred, cache = nets.aux.forward_cache(np.hstack([z, batch["action"]]))
    err_z = pred[:, :ld] - z_next
    err_r = pred[:, ld] - batch["reward"]
    loss = float(np.mean(err_z ** 2) + np.mean(err_r ** 2))
    dpred = np.hstack([2.0 * err_z / err_z.size, (2.0 * err_r / n)[:, None]])
    aux_grads, dx = nets.aux.backward(cache, dpred)
    ge, _ = nets.encoder.backward(z_cache, dx[:, :ld])
    return loss, {"aux": aux_grads, "encoder": ge}


# ---------- agent ----------


@dataclass
class SacConfig:
    obs_dim: int = 768
    action_dim: int = 2
    latent_dim: int = 50
    hidden: int = 64
    gamma: float = 0.99
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    lr_alpha: float = 1e-4
    tau_ema: float = 0.01
    batch_size: int = 128
    warmup: int = 1000
    replay_capacity: int = 100000
    actor_every: int = 2
    target_every: int = 2
    init_alpha: float = 0.1
    alpha_frozen: bool = False
    aux_enabled: bool = False
    aux_weight: float = 1.0
    guidance_on_mean: bool = False
    # critic-side reward multiplier; keeps Bellman targets O(1) so the value
    # net does not spend the whole run growing its output scale
    reward_scale: float = 1.0


class SacAgent:
    """Owns the nets, optimizers, replay buffer, and update cadences."""

    def __init__(self, cfg: SacConfig, seed: int = 0):
        self.cfg = cfg
        self.nets = AgentNets(
            obs_dim=cfg.obs_dim, action_dim=cfg.action_dim,
            latent_dim=cfg.latent_dim, hidden=cfg.hidden,
            init_alpha=cfg.init_alpha, aux=cfg.aux_enabled,
            rng=rng_stream(seed, domain=1))
        self.replay = ReplayBuffer(cfg.replay_capacity, cfg.obs_dim, cfg.action_dim)
        self.rng = rng_stream(seed, domain=2)
        nets = self.nets
        critic_params = nets.encoder.parameters() + nets.q1.parameters() + nets.q2.parameters()
        self.opt_critic = Adam(critic_params, lr=cfg.lr_critic)
        self.opt_actor = Adam(nets.actor.parameters(), lr=cfg.lr_actor)
        self.opt_alpha = Adam([nets.log_alpha], lr=cfg.lr_alpha)
        self.opt_aux = Adam(nets.aux.parameters(), lr=cfg.lr_critic) if cfg.aux_enabled else None
        self.updates = 0
        self.last_entropy = None

    def act(self, obs, deterministic: bool = False):
        a, _ = sample_action(self.nets, obs, self.rng, deterministic=deterministic)
        return a

    def update(self, lam: float = 0.0):
        """One gradient step: critic every call, actor/alpha and target EMA
        on their cadences.  Returns an info dict, or None before the replay
        buffer can fill a batch."""
        if len(self.replay) < self.cfg.batch_size:
            return None
        cfg = self.cfg
        nets = self.nets
        self.updates += 1
        batch = self.replay.sample(self.rng, cfg.batch_size)
        if cfg.reward_scale != 1.0:
            batch["reward"] = batch["reward"] * cfg.reward_scale

        closs, cgrads = critic_loss(nets, batch, cfg.gamma, self.rng)
        enc_grads = cgrads["encoder"]
        info = {"critic_loss": closs, "alpha": nets.alpha}
        if cfg.aux_enabled:
            aux_loss, aux_grads = aux_transition_loss(nets, batch)
            enc_grads = [g + cfg.aux_weight * h
                         for g, h in zip(enc_grads, aux_grads["encoder"])]
            scaled = [cfg.aux_weight * g for g in aux_grads["aux"]]
            self.opt_aux.step(scaled)
            info["aux_loss"] = aux_loss
        self.opt_critic.step(enc_grads + cgrads["q1"] + cgrads["q2"])

        if self.updates % cfg.actor_every == 0:
            aloss, agrads, ainfo = actor_loss_guided(
                nets, batch, lam, self.rng, guidance_on_mean=cfg.guidance_on_mean)
            self.opt_actor.step(agrads)
            tloss, tgrad = temperature_loss(nets, ainfo["logp"], frozen=cfg.alpha_frozen)
            self.opt_alpha.step([np.array([tgrad])])
            self.last_entropy = ainfo["entropy"]
            info.update(actor_loss=aloss, temperature_loss=tloss,
                        entropy=ainfo["entropy"], q_mean=ainfo["q_mean"])

        if self.updates % cfg.target_every == 0:
            soft_update_targets(nets, cfg.tau_ema)
        return info


# ---------- checkpoints ----------


def save_agent(path, nets: AgentNets):
    arrays = {}
    parts = {"encoder": nets.encoder, "actor": nets.actor,
             "q1": nets.q1, "q2": nets.q2,
             "q1_target": nets.q1_target, "q2_target": nets.q2_target}
    if nets.aux is not None:
        parts["aux"] = nets.aux
    for name, net in parts.items():
        arrays.update(mlp_arrays(net, name + "."))
    arrays["log_alpha"] = nets.log_alpha
    meta = {
        "kind": "sac-agent",
        "obs_dim": nets.obs_dim, "action_dim": nets.action_dim,
        "latent_dim": nets.latent_dim, "aux": nets.aux is not None,
        "nets": {name: mlp_meta(net) for name, net in parts.items()},
    }
    save_checkpoint(path, arrays, meta)


def load_agent(path) -> AgentNets:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "sac-agent":
        raise ValueError(f"{path}: not an agent checkpoint")
    hidden = meta["nets"]["actor"]["sizes"][1]
    nets = AgentNets(obs_dim=meta["obs_dim"], action_dim=meta["action_dim"],
                     latent_dim=meta["latent_dim"], hidden=hidden, aux=meta["aux"])
    for name in meta["nets"]:
        net = mlp_from_arrays(meta["nets"][name], arrays, name + ".")
        setattr(nets, name, net)
    nets.log_alpha = arrays["log_alpha"]
    return nets
