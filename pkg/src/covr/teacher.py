"""Small learnable teacher that maps observations to discretized actions.

The teacher plays the role of a large vision-language action model at desk
scale: actions are discretized into per-dimension token bins, and a trunk
network feeds autoregressive per-dimension heads, each conditioned on the
one-hot encoding of previously emitted tokens.  Pretraining clones a scripted
expert whose actions are corrupted with Gaussian noise; the noise scale sets
how capable the starting teacher is.
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
    save_checkpoint,
    load_checkpoint,
    softmax_logits,
)

LOG_FLOOR = 1e-12


class ActionTokenizer:
    """Uniform bins over [low, high], one token per action dimension.

    Bin centers sit at ``low + k * width``; values exactly halfway between
    two centers round to the higher index.  Detokenized actions are rendered
    with two decimal places, mirroring a text action interface.
    """

    def __init__(self, n_bins: int = 21, low: float = -1.0, high: float = 1.0):
        self.n_bins = int(n_bins)
        self.low = float(low)
        self.high = float(high)
        self.width = (self.high - self.low) / (self.n_bins - 1)
        self.clamp_count = 0

    def tokenize(self, actions) -> np.ndarray:
        raw = np.asarray(actions, dtype=np.float64)
        self.clamp_count += int(np.sum((raw < self.low) | (raw > self.high)))
        a = np.clip(raw, self.low, self.high)
        idx = np.floor((a - self.low) / self.width + 0.5 + 1e-9)
        return np.clip(idx, 0, self.n_bins - 1).astype(np.int64)

    def detokenize(self, tokens) -> np.ndarray:
        k = np.asarray(tokens, dtype=np.int64)
        return np.round(self.low + self.width * k, 2)


@dataclass
class TeacherBatch:
    """Fine-tuning batch: observations, target tokens, normalized returns."""

    obs: np.ndarray      # (B, obs_dim)
    tokens: np.ndarray   # (B, T) integer targets
    gbar: np.ndarray     # (B,) normalized returns in [-1, 1]

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.gbar = np.asarray(self.gbar, dtype=np.float64)
        if not (self.obs.shape[0] == self.tokens.shape[0] == self.gbar.shape[0]):
            raise ValueError("batch fields disagree on size")


def _one_hot(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((idx.shape[0], n))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


class TeacherModel:
    """Trunk plus one categorical head per action dimension.

    Head ``d`` receives the trunk features concatenated with the one-hot
    encodings of tokens 0..d-1 (teacher forcing during training, the model's
    own picks during inference).
    """

    def __init__(self, obs_dim, action_dim=2, n_bins=21, hidden=128, rng=None):
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.n_bins = int(n_bins)
        self.hidden = int(hidden)
        self.tokenizer = ActionTokenizer(n_bins)
        self.trunk = Mlp([obs_dim, hidden], activation="tanh", rng=rng)
        self.heads = [
            Mlp([hidden + d * n_bins, n_bins], activation="identity", rng=rng)
            for d in range(action_dim)
        ]

    def parameters(self):
        params = self.trunk.parameters()
        for head in self.heads:
            params += head.parameters()
        return params

    # -- inference --

    def infer(self, obs, mode: str = "greedy", rng=None):
        """Pick one token per action dimension.

        Args:
            obs: single observation vector.
            mode: "greedy" (argmax, ties to the lowest index) or "sample"
                (categorical draw from the softmax, requires ``rng``).

        Returns:
            (tokens, action): the token list and its detokenized action.
        """
        h = self.trunk.forward(np.asarray(obs, dtype=np.float64))
        tokens = []
        for d, head in enumerate(self.heads):
            inp = h
            if tokens:
                hots = [_one_hot([t], self.n_bins)[0] for t in tokens]
                inp = np.concatenate([h] + hots)
            logits = head.forward(inp)
            if mode == "greedy":
                pick = int(np.argmax(logits))
            elif mode == "sample":
                if rng is None:
                    raise ValueError("sample mode needs an rng")
                pick = int(rng.choice(self.n_bins, p=softmax_logits(logits)))
            else:
                raise ValueError(f"unknown inference mode {mode!r}")
            tokens.append(pick)
        return tokens, self.tokenizer.detokenize(tokens)

    # -- training --

    def weighted_nll(self, obs, tokens, weights, eps_ls, normalizer):
        """Weighted label-smoothed negative log-likelihood and its gradients.

        The loss is ``sum_b w_b * sum_d nll(b, d) / normalizer`` where the
        per-token nll mixes the target term with a uniform term:
        ``(1 - eps) * -log p(y) + eps/K * sum_k -log p(k)``.  Probabilities
        are floored at 1e-12 inside the logs; floored entries are counted in
        ``info["floor_hits"]`` (the gradient uses the exact softmax identity).

        Args:
            obs: (B, obs_dim) observations.
            tokens: (B, action_dim) integer targets, teacher forcing.
            weights: (B,) per-sample weights.
            eps_ls: label smoothing mass.
            normalizer: positive divisor (token count of the effective batch).

        Returns:
            (loss, grads, info) with grads aligned to :meth:`parameters`.
        """
        if normalizer <= 0:
            raise ValueError("empty effective batch: normalizer must be positive")
        obs = np.asarray(obs, dtype=np.float64)
        tokens = np.asarray(tokens, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        n = obs.shape[0]
        k = self.n_bins

        trunk_out, trunk_cache = self.trunk.forward_cache(obs)
        trunk_up = np.zeros_like(trunk_out)
        head_grads = []
        loss = 0.0
        floor_hits = 0
        for d, head in enumerate(self.heads):
            inp = trunk_out
            if d > 0:
                hots = [_one_hot(tokens[:, j], k) for j in range(d)]
                inp = np.hstack([trunk_out] + hots)
            logits, cache = head.forward_cache(inp)
            probs = softmax_logits(logits)
            target = tokens[:, d]
            p_target = probs[np.arange(n), target]
            if eps_ls > 0.0:
                floor_hits += int(np.sum(probs < LOG_FLOOR))
                per_token = (1.0 - eps_ls) * -np.log(np.maximum(p_target, LOG_FLOOR))
                per_token += (eps_ls / k) * -np.log(np.maximum(probs, LOG_FLOOR)).sum(axis=1)
            else:
                floor_hits += int(np.sum(p_target < LOG_FLOOR))
                per_token = -np.log(np.maximum(p_target, LOG_FLOOR))
            loss += float(np.sum(weights * per_token))

            q = _one_hot(target, k) * (1.0 - eps_ls) + eps_ls / k
            dlogits = (weights / normalizer)[:, None] * (probs - q)
            grads_d, dinp = head.backward(cache, dlogits)
            head_grads.append(grads_d)
            trunk_up += dinp[:, : self.hidden]

        trunk_grads, _ = self.trunk.backward(trunk_cache, trunk_up)
        grads = trunk_grads
        for g in head_grads:
            grads = grads + g
        return loss / normalizer, grads, {"floor_hits": floor_hits}


# ---------- pretraining ----------


def pretrain(model, env, n_samples, sigma_n, epochs, batch_size, lr, rng):
    """Clone the scripted expert, with Gaussian action noise of scale sigma_n.

    Each epoch draws n_samples fresh states from the environment's randomized
    state sampler (the simulator is an endless data source, so there is no
    fixed dataset to overfit); targets are expert actions plus noise, clipped
    and tokenized.  Training is plain NLL (no smoothing, uniform weights)
    with Adam; the learning rate drops to lr/4 for the last 40% of epochs.

    Returns:
        Per-epoch mean NLL history.
    """
    obs_rows = np.empty((n_samples, model.obs_dim))
    token_rows = np.empty((n_samples, model.action_dim), dtype=np.int64)
    opt = Adam(model.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        if epoch == int(0.6 * epochs):
            opt.lr = lr / 4.0
        for i in range(n_samples):
            obs_rows[i] = env.random_state(rng)
            noisy = env.expert_action() + rng.normal(0.0, 1.0, size=model.action_dim) * sigma_n
            token_rows[i] = model.tokenizer.tokenize(np.clip(noisy, -1.0, 1.0))
        order = rng.permutation(n_samples)
        total, batches = 0.0, 0
        for start in range(0, n_samples, batch_size):
            pick = order[start : start + batch_size]
            loss, grads, _ = model.weighted_nll(
                obs_rows[pick],
                token_rows[pick],
                np.ones(len(pick)),
                eps_ls=0.0,
                normalizer=len(pick) * model.action_dim,
            )
            opt.step(grads)
            total += loss
            batches += 1
        history.append(total / batches)
    return history


# ---------- checkpoints ----------


def save_teacher(path, model: TeacherModel):
    arrays = mlp_arrays(model.trunk, "trunk.")
    for d, head in enumerate(model.heads):
        arrays.update(mlp_arrays(head, f"head{d}."))
    meta = {
        "kind": "teacher",
        "obs_dim": model.obs_dim,
        "action_dim": model.action_dim,
        "n_bins": model.n_bins,
        "hidden": model.hidden,
        "trunk": mlp_meta(model.trunk),
        "heads": [mlp_meta(h) for h in model.heads],
    }
    save_checkpoint(path, arrays, meta)


def load_teacher(path) -> TeacherModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise ValueError(f"{path}: not a teacher checkpoint")
    model = TeacherModel(
        meta["obs_dim"], meta["action_dim"], meta["n_bins"], meta["hidden"]
    )
    model.trunk = mlp_from_arrays(meta["trunk"], arrays, "trunk.")
    model.heads = [
        mlp_from_arrays(meta["heads"][d], arrays, f"head{d}.")
        for d in range(model.action_dim)
    ]
    return model
