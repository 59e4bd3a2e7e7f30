"""Exploration-data curation for teacher fine-tuning.

Episode steps land in a fine-tune buffer as (observation, action, return)
records.  A filter picks the records worth learning from: the default ranks
z-scored returns against an adaptive threshold driven by the policy's current
entropy (high entropy means early, exploratory data, so the bar drops and more
samples survive).  Selected records are then weighted by their min-max
normalized returns, negative ones clipped to zero, and the teacher is trained
on the weighted token NLL.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numcore import Adam, sigmoid
from .teacher import TeacherBatch, TeacherModel

BUFFER_FORMAT = "covr-dfbuffer"
BUFFER_VERSION = 1


# ---------- buffer ----------


@dataclass
class FineTuneSample:
    obs: np.ndarray
    action: np.ndarray
    g: float            # discounted return-to-go from this step
    reward: float = 0.0  # immediate reward, kept for the score ablations
    episode: int = 0
    step: int = 0


class FineTuneBuffer:
    """Append-only list of fine-tune samples, cleared after each round."""

    def __init__(self):
        self.samples: list[FineTuneSample] = []

    def append(self, sample: FineTuneSample):
        self.samples.append(sample)

    def clear(self):
        self.samples = []

    def returns(self) -> list[float]:
        return [s.g for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class SelectionReport:
    tau: float
    factor: float
    median: float
    iqr: float
    indices: list
    kept_fraction: float
    degenerate: bool = False
    method: str = "eddf"


# ---------- statistics ----------


def returns_to_go(rewards, gamma: float) -> list:
    """Discounted suffix sums by backward recursion."""
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def zscore(values):
    """Population z-scores; constant input yields zeros plus a degenerate flag."""
    v = np.asarray(values, dtype=np.float64)
    sd = float(v.std())
    if sd < 1e-12:
        return np.zeros_like(v), True
    return (v - v.mean()) / sd, False


def iqr(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.percentile(v, 75) - np.percentile(v, 25))


class RunningStat:
    """Welford running mean and population standard deviation."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0

    def update(self, x: float):
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (x - self.mean)

    @property
    def std(self) -> float:
        if self.count == 0:
            return 0.0
        return float(np.sqrt(self._m2 / self.count))


# ---------- threshold and selection ----------


def _threshold_parts(scores, eps_t, stats, raw_sigmoid):
    e_hat = (eps_t - stats.mean) / (stats.std + 1e-8)
    factor = sigmoid(e_hat if raw_sigmoid else -e_hat)
    med = float(np.percentile(scores, 50))
    spread = iqr(scores)
    return med + factor * spread, factor, med, spread


def eddf_threshold(gz, eps_t, stats, raw_sigmoid: bool = False):
    """Adaptive threshold tau = median + factor * IQR over the score list.

    The factor is a sigmoid of the standardized entropy; by default the
    argument is negated so unusually high entropy gives a small factor and a
    permissive threshold.  ``raw_sigmoid`` flips to the unnegated variant.
    """
    tau, factor, _, _ = _threshold_parts(
        np.asarray(gz, dtype=np.float64), eps_t, stats, raw_sigmoid)
    return tau, factor


def eddf_select(buffer, eps_t, stats, raw_sigmoid=False, use_zscore=True, scores=None):
    """Keep buffer samples whose (z-scored) score clears the threshold.

    Args:
        buffer: FineTuneBuffer with at least one sample.
        eps_t: current policy entropy estimate.
        stats: RunningStat over past entropy values.
        raw_sigmoid: use the unnegated sigmoid argument.
        use_zscore: rank z-scored scores (default) or raw ones.
        scores: optional per-sample score override (defaults to returns).

    Returns:
        (kept samples in original order, SelectionReport).
    """
    base = buffer.returns() if scores is None else list(scores)
    degenerate = False
    if use_zscore:
        vals, degenerate = zscore(base)
    else:
        vals = np.asarray(base, dtype=np.float64)
    tau, factor, med, spread = _threshold_parts(vals, eps_t, stats, raw_sigmoid)
    indices = [i for i in range(len(vals)) if vals[i] >= tau]
    kept = [buffer.samples[i] for i in indices]
    report = SelectionReport(
        tau=tau, factor=factor, median=med, iqr=spread, indices=indices,
        kept_fraction=len(indices) / len(vals), degenerate=degenerate)
    return kept, report


def _keep_count(n: int, q: float) -> int:
    return min(n, max(1, int(round(q * n))))


def select_random(buffer, q, rng):
    """Ablation filter: keep a uniformly random fraction q, order preserved."""
    n = len(buffer)
    k = _keep_count(n, q)
    indices = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    report = SelectionReport(
        tau=0.0, factor=0.0, median=0.0, iqr=0.0, indices=indices,
        kept_fraction=k / n, method="random")
    return [buffer.samples[i] for i in indices], report


def select_topk(buffer, q, scores=None):
    """Ablation filter: keep the top fraction q by score, order preserved."""
    base = np.asarray(buffer.returns() if scores is None else list(scores))
    n = len(base)
    k = _keep_count(n, q)
    ranked = np.argsort(-base, kind="stable")[:k]
    indices = sorted(int(i) for i in ranked)
    report = SelectionReport(
        tau=float(base[ranked[-1]]), factor=0.0, median=float(np.percentile(base, 50)),
        iqr=iqr(base), indices=indices, kept_fraction=k / n, method="topk")
    return [buffer.samples[i] for i in indices], report


# ---------- weighting and loss ----------


def ralw_normalize(selected_g) -> np.ndarray:
    """Min-max map of returns onto [-1, 1]; an all-equal list maps to +1."""
    g = np.asarray(selected_g, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    if hi == lo:
        return np.ones_like(g)
    return 2.0 * (g - lo) / (hi - lo) - 1.0


def ralw_weights(gbar) -> np.ndarray:
    return np.maximum(np.asarray(gbar, dtype=np.float64), 0.0)


def _weighted_token_loss(model, obs, tokens, weights, eps_ls):
    """Weighted NLL normalized by the token count of positively weighted samples."""
    n_pos = int(np.sum(weights > 0.0))
    if n_pos == 0:
        raise ValueError("empty effective batch: all sample weights are zero")
    n_valid = n_pos * tokens.shape[1]
    loss, grads, info = model.weighted_nll(obs, tokens, weights, eps_ls, n_valid)
    info["n_valid"] = n_valid
    return loss, grads, info


def ralw_loss(model: TeacherModel, batch: TeacherBatch, eps_ls: float):
    """Return-weighted token NLL over a fine-tune batch.

    Per-sample weights are max(gbar, 0); the divisor counts only the tokens
    of positively weighted samples, so zero-weight samples are exactly
    neutral in both the loss value and every gradient.
    """
    weights = ralw_weights(batch.gbar)
    return _weighted_token_loss(model, batch.obs, batch.tokens, weights, eps_ls)


def fine_tune_teacher(model, samples, epochs=2, batch_size=32, lr=1e-4,
                      rng=None, eps_ls=0.1, weighting="ralw"):
    """Fine-tune the teacher on selected samples with per-sample weights.

    Weights come from the chosen scheme: "ralw" (normalized-return based),
    "uniform", "random" (drawn once from rng), or "zero" (diagnostic, always
    raises before touching the model).  Runs `epochs` shuffled passes of
    mini-batch Adam steps; mini-batches with no positive weight are skipped.

    Returns:
        Report dict with initial/final loss, gradient step count, and the
        skipped mini-batch count.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("empty selection: nothing to fine-tune on")
    obs = np.stack([s.obs for s in samples]).astype(np.float64)
    actions = np.stack([s.action for s in samples])
    tokens = model.tokenizer.tokenize(actions)
    gbar = ralw_normalize([s.g for s in samples])

    if weighting == "ralw":
        weights = ralw_weights(gbar)
    elif weighting == "uniform":
        weights = np.ones(n)
    elif weighting == "random":
        weights = rng.uniform(0.0, 1.0, size=n)
    elif weighting == "zero":
        weights = np.zeros(n)
    else:
        raise ValueError(f"unknown weighting scheme {weighting!r}")
    if not np.any(weights > 0.0):
        raise ValueError("empty effective batch: all sample weights are zero")

    initial_loss, _, _ = _weighted_token_loss(model, obs, tokens, weights, eps_ls)
    opt = Adam(model.parameters(), lr=lr)
    steps = skipped = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            pick = order[start : start + batch_size]
            if not np.any(weights[pick] > 0.0):
                skipped += 1
                continue
            _, grads, _ = _weighted_token_loss(
                model, obs[pick], tokens[pick], weights[pick], eps_ls)
            opt.step(grads)
            steps += 1
    final_loss, _, _ = _weighted_token_loss(model, obs, tokens, weights, eps_ls)
    return {
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "steps": steps,
        "skipped_batches": skipped,
        "n_samples": n,
        "n_positive": int(np.sum(weights > 0.0)),
        "weighting": weighting,
    }


# ---------- record file ----------


def save_buffer(path, buffer: FineTuneBuffer):
    """Write the buffer as line-delimited records behind a version header."""
    with open(path, "w") as fh:
        header = {"format": BUFFER_FORMAT, "version": BUFFER_VERSION,
                  "count": len(buffer)}
        fh.write(json.dumps(header) + "\n")
        for s in buffer.samples:
            fh.write(json.dumps({
                "episode": s.episode, "step": s.step,
                "obs": np.asarray(s.obs).tolist(),
                "action": np.asarray(s.action).tolist(),
                "g": float(s.g), "reward": float(s.reward),
            }) + "\n")


def load_buffer(path) -> FineTuneBuffer:
    buf = FineTuneBuffer()
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != BUFFER_FORMAT:
            raise ValueError(f"{path}: not a fine-tune record file")
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            buf.append(FineTuneSample(
                obs=np.asarray(rec["obs"], dtype=np.float64),
                action=np.asarray(rec["action"], dtype=np.float64),
                g=rec["g"], reward=rec.get("reward", 0.0),
                episode=rec.get("episode", 0), step=rec.get("step", 0),
            ))
    return buf
