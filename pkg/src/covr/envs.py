"""Two pixel-grid continuous-control tasks with scripted experts.

Both tasks render a 16x16 grayscale frame, stack the last three frames, and
expose the flattened stack (768 values in [0, 1]) as the observation.  Actions
are 2-D in [-1, 1]^2 and are repeated for a fixed number of inner physics
steps per environment step.

LaneDrive: drive down a straight lane, keep speed up, avoid obstacles.  The
per-inner-step reward is ``l1 * speed * dt - l2 * collision - l3 * |steer|``
where ``collision`` is a fixed constant charged once when an obstacle is hit.
Hitting an obstacle or leaving the lane (|lateral| > 1) ends the episode; a
lane departure terminates without the collision charge since nothing was
struck.  Passed obstacles respawn ahead so collision risk persists for the
whole episode.

PointReach: move a point mass to a goal cell.  Reward per inner step is
``-distance * dt``; the episode ends when the distance drops below the goal
radius.  Goals snap to grid-cell centers so the rendered goal cell identifies
the target exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class EnvConfig:
    """Environment construction parameters.

    Attributes:
        name: "lanedrive" or "pointreach".
        grid: side length of the square frame.
        frame_stack: number of stacked frames in the observation.
        action_repeat: inner physics steps per environment step.
        dt: inner-step duration.
        max_steps: environment steps before truncation.
        obstacles: LaneDrive obstacle count (0-3).
        lambda1/lambda2/lambda3: reward coefficients (speed, collision, steer).
        collision_penalty: constant multiplied by lambda2 on obstacle hits.
        goal_radius: PointReach termination distance.
    """

    name: str = "lanedrive"
    grid: int = 16
    frame_stack: int = 3
    action_repeat: int = 4
    dt: float = 0.1
    max_steps: int = 200
    obstacles: int = 2
    lambda1: float = 1.0
    lambda2: float = 1e-4
    lambda3: float = 1.0
    collision_penalty: float = 100.0
    goal_radius: float = 0.05

    def __post_init__(self):
        if not 0 <= self.obstacles <= 3:
            raise ValueError("obstacle count must be between 0 and 3")


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class _PixelGridEnv:
    """Frame-stacking and step-counting plumbing shared by both tasks."""

    action_dim = 2

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.rng: Optional[np.random.Generator] = None
        self.steps = 0
        self._stack = []

    @property
    def obs_dim(self) -> int:
        return self.cfg.grid * self.cfg.grid * self.cfg.frame_stack

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Start a new episode drawing any randomized layout from ``rng``.

        The generator is retained for in-episode draws, so one stream pinned
        to the experiment seed makes every episode sequence reproducible.
        """
        self.rng = rng
        self.steps = 0
        self._reset_state()
        frame = self.render()
        self._stack = [frame] * self.cfg.frame_stack
        return self._observation()

    def _observation(self) -> np.ndarray:
        return np.concatenate([f.ravel() for f in self._stack])

    def step(self, action) -> StepResult:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        reward = 0.0
        done = False
        info = {"collision": False, "time_limit": False}
        for _ in range(self.cfg.action_repeat):
            r, done = self._inner_step(a, info)
            reward += r
            if done:
                break
        self.steps += 1
        if not done and self.steps >= self.cfg.max_steps:
            done = True
            info["time_limit"] = True
        self._fill_info(info)
        self._stack = self._stack[1:] + [self.render()]
        return StepResult(self._observation(), reward, done, info)

    # subclass hooks
    def _reset_state(self):
        raise NotImplementedError

    def _inner_step(self, action, info):
        raise NotImplementedError

    def _fill_info(self, info):
        pass

    def render(self) -> np.ndarray:
        raise NotImplementedError

    def expert_action(self) -> np.ndarray:
        raise NotImplementedError

    def random_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def progress_metric(self) -> float:
        raise NotImplementedError


# ---------- lanedrive ----------


class LaneDrive(_PixelGridEnv):
    """Straight-lane driving with 0-3 obstacles.

    The rendered view is egocentric: the agent sits on a fixed row near the
    bottom, obstacles appear on rows above it proportionally to how far ahead
    they are (one row per progress unit), and the two lane edges are full
    columns at half intensity.
    """

    AGENT_ROW_FROM_BOTTOM = 3  # row grid-3, leaving two rows behind the agent
    SPEED_MAX = 5.0
    COLLISION_BAND_PROGRESS = 0.5
    COLLISION_BAND_LATERAL = 0.2
    # Dodge range covers one full env step of decision latency at top speed
    # (action repeat 4 x 0.5 travel) plus the lateral shift time.
    DETECT_RANGE = 5.0

    def _reset_state(self):
        self.lateral = 0.0
        self.speed = 0.0
        self.progress = 0.0
        self.obstacle_list = []
        prog = 0.0
        for _ in range(self.cfg.obstacles):
            prog += self.rng.uniform(6.0, 14.0)
            self.obstacle_list.append((prog, self.rng.uniform(-0.8, 0.8)))

    def _inner_step(self, action, info):
        steer, throttle = float(action[0]), float(action[1])
        cfg = self.cfg
        self.lateral += 0.5 * steer * cfg.dt
        self.speed = min(max(self.speed + 2.0 * throttle * cfg.dt, 0.0), self.SPEED_MAX)
        self.progress += self.speed * cfg.dt
        reward = cfg.lambda1 * self.speed * cfg.dt - cfg.lambda3 * abs(steer)
        if self._collided():
            reward -= cfg.lambda2 * cfg.collision_penalty
            info["collision"] = True
            return reward, True
        if abs(self.lateral) > 1.0:
            return reward, True
        self._respawn_passed_obstacles()
        return reward, False

    def _collided(self) -> bool:
        for prog, lat in self.obstacle_list:
            if (
                abs(self.progress - prog) < self.COLLISION_BAND_PROGRESS
                and abs(self.lateral - lat) < self.COLLISION_BAND_LATERAL
            ):
                return True
        return False

    def _respawn_passed_obstacles(self):
        for i, (prog, lat) in enumerate(self.obstacle_list):
            if prog < self.progress - 2.0:
                for _ in range(8):  # keep obstacles spread out along the lane
                    new_prog = self.progress + self.rng.uniform(8.0, 14.0)
                    others = [p for j, (p, _) in enumerate(self.obstacle_list) if j != i]
                    if all(abs(new_prog - p) >= 4.0 for p in others):
                        break
                for _ in range(8):  # and not parked where the agent drives
                    new_lat = self.rng.uniform(-0.8, 0.8)
                    if abs(new_lat - self.lateral) >= 0.35:
                        break
                self.obstacle_list[i] = (new_prog, new_lat)

    def _fill_info(self, info):
        info["speed"] = self.speed
        info["progress"] = self.progress

    def _lateral_col(self, lat: float) -> int:
        interior = self.cfg.grid - 6  # columns between the lane edges
        idx = int((lat + 1.0) / 2.0 * interior)
        return 3 + min(interior - 1, max(0, idx))

    def render(self) -> np.ndarray:
        g = self.cfg.grid
        frame = np.zeros((g, g))
        frame[:, 2] = 0.5
        frame[:, g - 3] = 0.5
        agent_row = g - self.AGENT_ROW_FROM_BOTTOM
        for prog, lat in self.obstacle_list:
            row = agent_row - int(round(prog - self.progress))
            if 0 <= row < g:
                frame[row, self._lateral_col(lat)] = 0.8
        frame[agent_row, self._lateral_col(self.lateral)] = 1.0
        return frame

    def expert_action(self) -> np.ndarray:
        # dodge window: everything ahead plus the trailing half of the
        # collision band; constraints reach a bit farther down the lane
        relative = [(prog - self.progress, lat) for prog, lat in self.obstacle_list]
        window = [o for o in relative if -0.5 <= o[0] <= self.DETECT_RANGE]
        constraints = [o for o in relative if -0.5 <= o[0] <= self.DETECT_RANGE + 3.0]
        in_path = [o for o in window if abs(o[1] - self.lateral) < 0.3]
        if in_path:
            ahead, ob_lat = min(in_path)
            others = [o for o in constraints if (o[0], o[1]) != (ahead, ob_lat)]
            # lateral shift achievable before the obstacle arrives, at full
            # steer (0.05 per inner step) and the current speed
            inners_left = max(0.0, ahead - 0.5) / max(self.speed * self.cfg.dt, 0.05)
            max_shift = 0.05 * inners_left

            def impact_gap(target: float) -> float:
                shift = min(abs(target - self.lateral), max_shift)
                at_impact = self.lateral + math.copysign(shift, target - self.lateral)
                return abs(at_impact - ob_lat)

            def conflicted(target: float) -> bool:
                for a2, l2 in others:
                    if a2 > ahead and abs(target - l2) < 0.3:
                        return True  # follower parked near the target lateral
                    lo = min(self.lateral, target) - 0.1
                    hi = max(self.lateral, target) + 0.1
                    if a2 < ahead and a2 < 2.5 and lo <= l2 <= hi:
                        return True  # nearer obstacle inside the swept arc
                return False

            gap = abs(ob_lat - self.lateral)
            if gap > 0.02:
                side = 1.0 if self.lateral >= ob_lat else -1.0
            else:
                side = 1.0 if (1.0 - ob_lat) >= (ob_lat + 1.0) else -1.0
            candidates = [  # same side first, crossing second, both in-lane
                float(np.clip(ob_lat + side * 0.35, -0.9, 0.9)),
                float(np.clip(ob_lat - side * 0.35, -0.9, 0.9)),
            ]
            safe = [t for t in candidates if impact_gap(t) >= 0.22]
            clean = [t for t in safe if not conflicted(t)]
            if clean:
                target = clean[0]
            elif safe:
                target = safe[0]
            else:
                target = max(candidates, key=impact_gap)
            steer = float(np.clip(4.0 * (target - self.lateral), -1.0, 1.0))
            return np.array([steer, 0.2])
        if any(abs(lat - self.lateral) < 0.55 for _, lat in window):
            # close call: hold course instead of re-centering into it
            return np.array([0.0, 1.0])
        return np.array([np.clip(-0.8 * self.lateral, -1.0, 1.0), 1.0])

    def random_state(self, rng: np.random.Generator) -> np.ndarray:
        """Teleport to a randomized mid-episode state and return the obs."""
        self.rng = rng
        self.steps = 0
        self.lateral = rng.uniform(-0.9, 0.9)
        self.speed = rng.uniform(0.0, self.SPEED_MAX)
        self.progress = rng.uniform(0.0, 50.0)
        self.obstacle_list = []
        for _ in range(self.cfg.obstacles):
            self.obstacle_list.append(
                (self.progress + rng.uniform(1.0, 12.0), rng.uniform(-0.8, 0.8))
            )
        frame = self.render()
        self._stack = [frame] * self.cfg.frame_stack
        return self._observation()

    def progress_metric(self) -> float:
        return self.progress


# ---------- pointreach ----------


class PointReach(_PixelGridEnv):
    """Point mass homing to a goal on the same pixel grid."""

    def _cell(self, v: float) -> int:
        g = self.cfg.grid
        return min(g - 1, max(0, int((v + 1.0) / 2.0 * g)))

    def _cell_center(self, idx: int) -> float:
        return -1.0 + (idx + 0.5) * (2.0 / self.cfg.grid)

    def _reset_state(self):
        self.pos = np.zeros(2)
        self.start_pos = self.pos.copy()
        while True:
            gx = int(self.rng.integers(2, self.cfg.grid - 2))
            gy = int(self.rng.integers(2, self.cfg.grid - 2))
            goal = np.array([self._cell_center(gx), self._cell_center(gy)])
            if np.linalg.norm(goal - self.pos) >= 0.3:
                self.goal = goal
                return

    def _inner_step(self, action, info):
        self.pos = np.clip(self.pos + action * self.cfg.dt, -1.0, 1.0)
        dist = float(np.linalg.norm(self.pos - self.goal))
        reward = -dist * self.cfg.dt
        return reward, dist < self.cfg.goal_radius

    def _fill_info(self, info):
        info["distance"] = float(np.linalg.norm(self.pos - self.goal))

    def render(self) -> np.ndarray:
        frame = np.zeros((self.cfg.grid, self.cfg.grid))
        frame[self._cell(self.goal[1]), self._cell(self.goal[0])] = 0.9
        frame[self._cell(self.pos[1]), self._cell(self.pos[0])] = 1.0
        return frame

    def expert_action(self) -> np.ndarray:
        delta = self.goal - self.pos
        norm = float(np.linalg.norm(delta))
        if norm < 1e-12:
            return np.zeros(2)
        return np.clip(delta / norm, -1.0, 1.0)

    def random_state(self, rng: np.random.Generator) -> np.ndarray:
        self.rng = rng
        self.steps = 0
        self.pos = rng.uniform(-1.0, 1.0, size=2)
        self.start_pos = self.pos.copy()
        while True:
            gx = int(rng.integers(2, self.cfg.grid - 2))
            gy = int(rng.integers(2, self.cfg.grid - 2))
            goal = np.array([self._cell_center(gx), self._cell_center(gy)])
            if np.linalg.norm(goal - self.pos) >= 0.3:
                self.goal = goal
                break
        frame = self.render()
        self._stack = [frame] * self.cfg.frame_stack
        return self._observation()

    def progress_metric(self) -> float:
        return -float(np.linalg.norm(self.pos - self.goal))


def make_env(cfg: EnvConfig) -> _PixelGridEnv:
    if cfg.name == "lanedrive":
        return LaneDrive(cfg)
    if cfg.name == "pointreach":
        return PointReach(cfg)
    raise ValueError(f"unknown environment {cfg.name!r}")
