"""2-D point-mass reaching task and closed-loop rollouts."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ReachTask:
    arena: float = 1.0          # positions live in [-arena, arena]^2
    a_max: float = 1.0          # per-component action clip
    dt: float = 0.05
    horizon: int = 100
    success_radius: float = 0.02
    slow_radius: float = 0.1    # oracle speed ramps down linearly inside this radius
    min_start_dist: float = 0.2
    n_distractors: int = 0      # task-irrelevant state features, fixed per episode

    @property
    def state_dim(self) -> int:
        return 4 + self.n_distractors

    def distractors(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, (n, self.n_distractors))

    def to_dict(self):
        return asdict(self)

    def oracle_action(self, state: np.ndarray) -> np.ndarray:
        """Unit vector toward the goal, scaled down linearly inside ``slow_radius``.

        ``state`` rows are (pos_x, pos_y, goal_x, goal_y).
        """
        s = np.asarray(state, dtype=np.float64)
        d = s[..., 2:4] - s[..., 0:2]
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(n, self.slow_radius)

    def sample_episodes(self, n: int, rng: np.random.Generator):
        """Start positions and goals at least ``min_start_dist`` apart."""
        pos = rng.uniform(-self.arena, self.arena, (n, 2))
        goal = rng.uniform(-self.arena, self.arena, (n, 2))
        bad = np.linalg.norm(goal - pos, axis=1) < self.min_start_dist
        while bad.any():
            goal[bad] = rng.uniform(-self.arena, self.arena, (int(bad.sum()), 2))
            bad = np.linalg.norm(goal - pos, axis=1) < self.min_start_dist
        return pos, goal

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """States visited by oracle episodes: a random point along the straight path."""
        pos, goal = self.sample_episodes(n, rng)
        t = rng.uniform(0.0, 1.0, (n, 1))
        return np.concatenate([pos + t * (goal - pos), goal, self.distractors(n, rng)], axis=1)

    def step(self, pos: np.ndarray, action: np.ndarray) -> np.ndarray:
        new = pos + np.clip(action, -self.a_max, self.a_max) * self.dt
        return np.clip(new, -self.arena, self.arena)


def rollout_success(act_fn, task: ReachTask, episodes: int, seed: int) -> float:
    """Fraction of episodes that get within ``success_radius`` of the goal by the horizon.

    ``act_fn`` maps an (n, 4 + n_distractors) array of (pos, goal, clutter) states to (n, 2) actions.
    """
    rng = np.random.default_rng(seed)
    pos, goal = task.sample_episodes(episodes, rng)
    clutter = task.distractors(episodes, rng)
    done = np.zeros(episodes, dtype=bool)
    for _ in range(task.horizon):
        disp = goal - pos
        done |= np.linalg.norm(disp, axis=1) <= task.success_radius
        if done.all():
            break
        live = ~done
        state = np.concatenate([pos[live], goal[live], clutter[live]], axis=1)
        pos[live] = task.step(pos[live], act_fn(state))
    done |= np.linalg.norm(goal - pos, axis=1) <= task.success_radius
    return float(done.mean())
