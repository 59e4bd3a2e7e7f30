"""Experiment configuration: a sectioned key-value text format.

The format is deliberately small: `[section]` headers, `key = value` lines,
`#` comments, blank lines.  Every key belongs to a fixed schema derived from
the section dataclasses below; unknown sections, unknown keys, duplicate
keys, type mismatches, and enum violations are all rejected with the file
line that caused them.  An empty file is a valid config: every field has a
default.

Files written by write_config start with a `# covr-config v1` header and
round-trip losslessly through load_config.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .envs import EnvConfig

FORMAT_HEADER = "# covr-config v1"


class ConfigError(ValueError):
    """Config file problem, annotated with path and line number."""


@dataclass
class SacSettings:
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
    reward_scale: float = 1.0


@dataclass
class TeacherSettings:
    enabled: bool = True
    bins: int = 21
    hidden: int = 128
    sigma_n: float = 0.4
    cadence: int = 10
    eps_ls: float = 0.1
    ft_epochs: int = 2
    ft_batch_size: int = 32
    ft_lr: float = 1e-4
    pretrain_samples: int = 4000
    pretrain_epochs: int = 40
    pretrain_batch: int = 128
    pretrain_lr: float = 2e-3


@dataclass
class CurationSettings:
    filter: str = "eddf"
    filter_q: float = 0.8
    score: str = "return"
    weighting: str = "ralw"
    raw_sigmoid: bool = False
    use_zscore: bool = True
    # standalone-curation inputs: the entropy estimate and its running stats
    eps_t: float = 0.0
    eps_mean: float = 0.0
    eps_std: float = 0.0


@dataclass
class GuidanceSettings:
    enabled: bool = True
    lam: float = 2.0
    delay: int = 2
    annealed: bool = False
    anneal_delta: float = 0.01
    anneal_every: int = 200
    anneal_floor: float = 0.1
    on_mean: bool = False
    intermediate: bool = True
    warmup_source: str = "random"
    source: str = "teacher"
    replay_frac: float = 0.8


@dataclass
class ScheduleSettings:
    psi_0: int = 5000
    fine_tune: bool = True


@dataclass
class RunSettings:
    steps: int = 100000
    seeds: tuple = (0,)
    eval_every: int = 1000
    eval_episodes: int = 10
    teacher_eval_episodes: int = 10
    out: str = "runs"
    variants: tuple = ("full",)


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=lambda: EnvConfig(name="lanedrive"))
    sac: SacSettings = field(default_factory=SacSettings)
    teacher: TeacherSettings = field(default_factory=TeacherSettings)
    curation: CurationSettings = field(default_factory=CurationSettings)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    run: RunSettings = field(default_factory=RunSettings)


_SECTIONS = ("env", "sac", "teacher", "curation", "guidance", "schedule", "run")

# config-file key -> dataclass field, where the two differ
_ALIASES = {("guidance", "lambda"): "lam"}
_REVERSE_ALIASES = {(sec, fld): key for (sec, key), fld in _ALIASES.items()}

_LIST_KEYS = {("run", "seeds"): int, ("run", "variants"): str}

_ENUMS = {
    ("env", "name"): ("lanedrive", "pointreach"),
    ("curation", "score"): ("return", "reward", "qvalue"),
    ("curation", "weighting"): ("ralw", "uniform", "random"),
    ("guidance", "warmup_source"): ("random", "teacher"),
    ("guidance", "source"): ("teacher", "replay"),
}

# (section, field) -> (predicate, requirement text); checked at parse time
# so violations still carry a line number
_RANGES = {
    ("guidance", "lam"): (lambda v: v >= 0, "lambda must be non-negative"),
    ("guidance", "delay"): (lambda v: v >= 0, "delay must be non-negative"),
    ("guidance", "replay_frac"): (lambda v: 0 <= v <= 1, "replay_frac must lie in [0, 1]"),
    ("schedule", "psi_0"): (lambda v: v >= 1, "psi_0 must be at least 1"),
    ("run", "steps"): (lambda v: v >= 1, "steps must be at least 1"),
    ("run", "eval_episodes"): (lambda v: v >= 1, "eval_episodes must be at least 1"),
    ("teacher", "sigma_n"): (lambda v: v >= 0, "sigma_n must be non-negative"),
    ("teacher", "cadence"): (lambda v: v >= 1, "cadence must be at least 1"),
    ("teacher", "bins"): (lambda v: v >= 2, "bins must be at least 2"),
}


def parse_filter_spec(raw: str):
    """Parse a filter value like "eddf", "random", or "topk:0.9".

    Returns (kind, keep_fraction); eddf carries no fraction and rejects one.
    """
    kind, sep, tail = raw.partition(":")
    if kind not in ("eddf", "random", "topk"):
        raise ValueError(f"unknown filter {raw!r}; expected eddf, random, or topk[:q]")
    if kind == "eddf":
        if sep:
            raise ValueError("filter eddf takes no keep fraction")
        return "eddf", None
    if not sep:
        return kind, 0.8
    try:
        q = float(tail)
    except ValueError:
        raise ValueError(f"filter fraction {tail!r} is not a number") from None
    if not 0.0 < q <= 1.0:
        raise ValueError(f"filter fraction {tail} outside (0, 1]")
    return kind, q


_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(f):
    if isinstance(f.type, type):
        return f.type
    typ = _TYPE_NAMES.get(str(f.type))
    return typ if typ is not None else type(f.default)


def _parse_scalar(raw: str, typ, where: str):
    if typ is bool:
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"{where}: expected true or false, got {raw!r}")
    if typ is int:
        try:
            return int(raw, 10)
        except ValueError:
            raise ConfigError(f"{where}: expected int, got {raw!r}") from None
    if typ is float:
        try:
            v = float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected float, got {raw!r}") from None
        if not math.isfinite(v):
            raise ConfigError(f"{where}: expected a finite float, got {raw!r}")
        return v
    return raw


def load_config(path) -> ExperimentConfig:
    """Parse a config file; raises ConfigError with path:line context."""
    path = Path(path)
    text = path.read_text()
    cfg = ExperimentConfig()
    fields_by_section = {
        sec: {f.name: f for f in dataclasses.fields(getattr(cfg, sec))}
        for sec in _SECTIONS
    }
    seen = set()
    section = None

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        where = f"{path}:{lineno}"
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(
                    f"{where}: unknown section [{section}]; "
                    f"expected one of {', '.join(_SECTIONS)}")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if (section, key) in seen:
            raise ConfigError(f"{where}: duplicate key '{key}' in [{section}]")
        seen.add((section, key))
        _apply_key(cfg, fields_by_section, section, key, raw, where)
    return cfg


def _apply_key(cfg, fields_by_section, section, key, raw, where):
    target = getattr(cfg, section)

    if section == "curation" and key == "filter":
        try:
            kind, q = parse_filter_spec(raw)
        except ValueError as err:
            raise ConfigError(f"{where}: key 'filter': {err}") from None
        target.filter = kind
        if q is not None:
            target.filter_q = q
        return

    fname = _ALIASES.get((section, key), key)
    f = fields_by_section[section].get(fname)
    if f is None:
        raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")

    ctx = f"{where}: key '{key}'"
    if (section, fname) in _LIST_KEYS:
        elem = _LIST_KEYS[(section, fname)]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{ctx}: empty list")
        value = tuple(_parse_scalar(p, elem, ctx) for p in parts)
    else:
        value = _parse_scalar(raw, _field_type(f), ctx)

    allowed = _ENUMS.get((section, fname))
    if allowed and value not in allowed:
        raise ConfigError(f"{ctx}: {value!r} not one of {', '.join(allowed)}")
    rule = _RANGES.get((section, fname))
    if rule and not rule[0](value):
        raise ConfigError(f"{ctx}: {rule[1]} (got {value})")
    setattr(target, fname, value)


def _format_value(sec, f, value):
    if sec == "curation" and f.name == "filter":
        return value  # handled by the caller together with filter_q
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(cfg: ExperimentConfig, path):
    """Write the fully resolved config; output round-trips via load_config."""
    lines = [FORMAT_HEADER, ""]
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        lines.append(f"[{sec}]")
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if sec == "curation" and f.name == "filter":
                spec = value if value == "eddf" else f"{value}:{obj.filter_q!r}"
                lines.append(f"filter = {spec}")
                continue
            if sec == "curation" and f.name == "filter_q":
                continue  # folded into the filter spec
            key = _REVERSE_ALIASES.get((sec, f.name), f.name)
            lines.append(f"{key} = {_format_value(sec, f, value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
