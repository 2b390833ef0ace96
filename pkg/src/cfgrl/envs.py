"""Desk-scale navigation environments, behavior policies and rollout evaluation.

Both environments step a whole batch of episodes at once.  Learned policies
see a continuous "feature" view of states and actions: GridWorld actions are
encoded as +-1 one-hot vectors and decoded by argmax.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cfgrl.data import Trajectory, TransitionDataset
from cfgrl.mdp import TabularMdp

WALL, FREE, START, GOAL = "#", ".", "S", "G"
# up, down, left, right, stay as (drow, dcol)
GRID_MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)])


class UnreachableGoal(RuntimeError):
    pass


def parse_map(text: str) -> list[str]:
    rows = [line.rstrip("\n") for line in text.strip("\n").splitlines() if line.strip()]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ValueError("map must be a non-empty rectangle")
    chars = set("".join(rows))
    if not chars <= {WALL, FREE, START, GOAL}:
        raise ValueError(f"unknown map symbols {sorted(chars - {WALL, FREE, START, GOAL})}")
    if sum(r.count(START) for r in rows) != 1 or sum(r.count(GOAL) for r in rows) != 1:
        raise ValueError("map needs exactly one S and one G")
    return rows


def _find(rows, ch):
    for i, r in enumerate(rows):
        j = r.find(ch)
        if j >= 0:
            return i, j
    raise ValueError(ch)


def _bfs_distances(free: np.ndarray, goal) -> np.ndarray:
    dist = np.full(free.shape, np.inf)
    dist[goal] = 0
    queue = deque([goal])
    while queue:
        r, c = queue.popleft()
        for dr, dc in GRID_MOVES[:4]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < free.shape[0] and 0 <= nc < free.shape[1] and free[nr, nc] and dist[nr, nc] == np.inf:
                dist[nr, nc] = dist[r, c] + 1
                queue.append((nr, nc))
    return dist


class _MazeBase:
    name: str
    max_steps: int

    def __init__(self, ascii_map: str):
        self.rows = parse_map(ascii_map)
        self.free = np.array([[ch != WALL for ch in r] for r in self.rows])
        self.start_cell = _find(self.rows, START)
        self.goal_cell = _find(self.rows, GOAL)
        self.dist = _bfs_distances(self.free, self.goal_cell)

    @property
    def height(self) -> int:
        return self.free.shape[0]

    @property
    def width(self) -> int:
        return self.free.shape[1]


class GridWorld(_MazeBase):
    """Discrete maze; state is (row, col); actions index GRID_MOVES."""

    kind = "gridworld"
    num_actions = 5
    action_dim = 5
    state_dim = 2

    def __init__(self, ascii_map: str, p_slip: float = 0.0, max_steps: int = 50, name: str = "gridworld"):
        super().__init__(ascii_map)
        if not 0.0 <= p_slip < 1.0:
            raise ValueError("p_slip must lie in [0, 1)")
        self.p_slip = float(p_slip)
        self.max_steps = int(max_steps)
        self.name = name
        self.action_low = -np.ones(5)
        self.action_high = np.ones(5)
        cells = np.argwhere(self.free)
        self.cells = [tuple(c) for c in cells]
        self.cell_index = {c: i for i, c in enumerate(self.cells)}

    @property
    def start(self) -> np.ndarray:
        return np.array(self.start_cell)

    @property
    def goal(self) -> np.ndarray:
        return np.array(self.goal_cell)

    def step_batch(self, states, actions, rng):
        states = np.asarray(states, dtype=np.int64).reshape(-1, 2)
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        if np.any((actions < 0) | (actions >= 5)):
            raise ValueError("GridWorld actions must be integers in [0, 5)")
        if self.p_slip > 0:
            slip = rng.random(len(actions)) < self.p_slip
            actions = np.where(slip, rng.integers(0, 5, len(actions)), actions)
        target = states + GRID_MOVES[actions]
        inside = (target[:, 0] >= 0) & (target[:, 0] < self.height) & (target[:, 1] >= 0) & (target[:, 1] < self.width)
        ok = inside.copy()
        ok[inside] = self.free[target[inside, 0], target[inside, 1]]
        nxt = np.where(ok[:, None], target, states)
        at_goal = (nxt[:, 0] == self.goal_cell[0]) & (nxt[:, 1] == self.goal_cell[1])
        return nxt, at_goal.astype(np.float64), at_goal

    def step(self, state, action, rng):
        nxt, r, d = self.step_batch([state], [action], rng)
        return nxt[0], float(r[0]), bool(d[0])

    def expert_actions(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64).reshape(-1, 2)
        out = np.empty(len(states), dtype=np.int64)
        for i, (r, c) in enumerate(states):
            d0 = self.dist[r, c]
            if not np.isfinite(d0):
                raise UnreachableGoal(f"goal unreachable from cell {(r, c)}")
            if d0 == 0:
                out[i] = 4
                continue
            for a, (dr, dc) in enumerate(GRID_MOVES[:4]):
                nr, nc = r + dr, c + dc
                if 0 <= nr < self.height and 0 <= nc < self.width and self.dist[nr, nc] == d0 - 1:
                    out[i] = a
                    break
        return out

    def random_actions(self, n, rng) -> np.ndarray:
        return rng.integers(0, 5, n)

    # continuous view for learned policies
    def features(self, states) -> np.ndarray:
        return np.asarray(states, dtype=np.float64).reshape(-1, 2)

    def encode_actions(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        return 2.0 * np.eye(5)[actions] - 1.0

    def decode_actions(self, vectors) -> np.ndarray:
        return np.argmax(np.asarray(vectors).reshape(-1, 5), axis=1)

    def goal_features(self) -> np.ndarray:
        return self.goal.astype(np.float64)

    def state_bounds(self):
        return np.zeros(2), np.array([self.height - 1.0, self.width - 1.0])

    def to_tabular(self, discount: float = 0.9) -> TabularMdp:
        """Exact MDP over free cells; the goal is absorbing with zero further reward."""
        n = len(self.cells)
        P = np.zeros((n, 5, n))
        g = self.cell_index[self.goal_cell]
        for i, cell in enumerate(self.cells):
            if i == g:
                P[i, :, i] = 1.0
                continue
            for a in range(5):
                for b in range(5):
                    prob = (1.0 - self.p_slip) * (a == b) + self.p_slip / 5.0
                    if prob == 0:
                        continue
                    r, c = cell[0] + GRID_MOVES[b][0], cell[1] + GRID_MOVES[b][1]
                    dest = (r, c) if (0 <= r < self.height and 0 <= c < self.width and self.free[r, c]) else cell
                    P[i, a, self.cell_index[dest]] += prob
        reward = P[:, :, g].copy()
        reward[g] = 0.0
        rho = np.zeros(n)
        rho[self.cell_index[self.start_cell]] = 1.0
        return TabularMdp(P, reward, discount, rho)


class PointMaze(_MazeBase):
    """Continuous 2-D maze; state is (y, x) with unit cells, cell (i, j) spanning [i, i+1) x [j, j+1)."""

    kind = "pointmaze"
    action_dim = 2
    state_dim = 2

    def __init__(self, ascii_map: str, step_scale: float = 0.5, success_radius: float = 0.5,
                 max_steps: int = 60, name: str = "pointmaze"):
        super().__init__(ascii_map)
        self.step_scale = float(step_scale)
        self.success_radius = float(success_radius)
        self.max_steps = int(max_steps)
        self.name = name
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)

    @property
    def start(self) -> np.ndarray:
        return np.array(self.start_cell, dtype=np.float64) + 0.5

    @property
    def goal(self) -> np.ndarray:
        return np.array(self.goal_cell, dtype=np.float64) + 0.5

    def _is_free(self, pos):
        cell = np.floor(pos).astype(np.int64)
        inside = (cell[:, 0] >= 0) & (cell[:, 0] < self.height) & (cell[:, 1] >= 0) & (cell[:, 1] < self.width)
        ok = inside.copy()
        ok[inside] = self.free[cell[inside, 0], cell[inside, 1]]
        return ok

    def step_batch(self, states, actions, rng=None):
        pos = np.asarray(states, dtype=np.float64).reshape(-1, 2).copy()
        act = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
        if np.any(np.abs(act) > 1.0 + 1e-9):
            raise ValueError("PointMaze actions must lie in [-1, 1]^2")
        delta = act * self.step_scale
        edge = 1e-6
        for axis in (0, 1):
            prop = pos.copy()
            prop[:, axis] += delta[:, axis]
            blocked = ~self._is_free(prop)
            if np.any(blocked):
                cell = np.floor(pos[blocked, axis])
                # slide to the boundary of the current cell along the blocked axis
                limit = np.where(delta[blocked, axis] > 0, cell + 1.0 - edge, cell + edge)
                prop[blocked, axis] = limit
            pos = prop
        reached = np.linalg.norm(pos - self.goal, axis=1) <= self.success_radius
        return pos, reached.astype(np.float64), reached

    def step(self, state, action, rng=None):
        nxt, r, d = self.step_batch([state], [action], rng)
        return nxt[0], float(r[0]), bool(d[0])

    def expert_actions(self, states) -> np.ndarray:
        pos = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        out = np.empty_like(pos)
        for i, p in enumerate(pos):
            r, c = int(np.floor(p[0])), int(np.floor(p[1]))
            d0 = self.dist[r, c]
            if not np.isfinite(d0):
                raise UnreachableGoal(f"goal unreachable from position {tuple(p)}")
            target = self.goal
            if d0 > 0:
                for dr, dc in GRID_MOVES[:4]:
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < self.height and 0 <= nc < self.width and self.dist[nr, nc] == d0 - 1:
                        target = np.array([nr + 0.5, nc + 0.5])
                        break
            out[i] = np.clip((target - p) / self.step_scale, -1.0, 1.0)
        return out

    def random_actions(self, n, rng) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, 2))

    def features(self, states) -> np.ndarray:
        return np.asarray(states, dtype=np.float64).reshape(-1, 2)

    def encode_actions(self, actions) -> np.ndarray:
        return np.asarray(actions, dtype=np.float64).reshape(-1, 2)

    def decode_actions(self, vectors) -> np.ndarray:
        return np.clip(np.asarray(vectors, dtype=np.float64).reshape(-1, 2), -1.0, 1.0)

    def goal_features(self) -> np.ndarray:
        return self.goal

    def state_bounds(self):
        return np.zeros(2), np.array([float(self.height), float(self.width)])


# -- registry ---------------------------------------------------------------

MAPS = {
    "gridworld-small": """
#######
#S....#
#.###.#
#...#G#
#######
""",
    "gridworld-large": """
###########
#S..#.....#
#.#.#.###.#
#.#...#...#
#.#####.#.#
#...#...#.#
###.#.###.#
#.....#..G#
###########
""",
    "pointmaze-small": """
#######
#S..#.#
#.#.#.#
#.#...#
#.###.#
#....G#
#######
""",
    "pointmaze-large": """
###########
#S..#.....#
#.#.#.###.#
#.#...#...#
#.#####.#.#
#...#...#.#
###.#.###.#
#.....#..G#
###########
""",
}

ENV_DEFAULTS = {
    "gridworld-small": {"max_steps": 30},
    "gridworld-large": {"max_steps": 60},
    "pointmaze-small": {"max_steps": 30},
    "pointmaze-large": {"max_steps": 90},
}


def make_env(name: str, map_file=None, **overrides):
    """Build a registered environment; `map_file` replaces the registered layout."""
    if name not in MAPS:
        raise KeyError(f"unknown environment {name!r}; known: {sorted(MAPS)}")
    text = Path(map_file).read_text() if map_file else MAPS[name]
    kw = dict(ENV_DEFAULTS[name])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if name.startswith("gridworld"):
        return GridWorld(text, name=name, **kw)
    return PointMaze(text, name=name, **kw)


# -- behavior data ------------------------------------------------------------


@dataclass(frozen=True)
class Behavior:
    kind: str = "noisy_expert"  # or "random"
    epsilon: float = 0.5

    def __post_init__(self):
        if self.kind not in ("noisy_expert", "random"):
            raise ValueError(f"unknown behavior {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def actions(self, env, states, rng):
        n = len(states)
        rand = env.random_actions(n, rng)
        if self.kind == "random":
            return rand
        expert = env.expert_actions(states)
        explore = rng.random(n) < self.epsilon
        if rand.ndim == 1:
            return np.where(explore, rand, expert)
        return np.where(explore[:, None], rand, expert)


def generate_dataset(env, behavior: Behavior, episodes: int, rng, seed=None) -> TransitionDataset:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    trajs = []
    for _ in range(episodes):
        s = env.start.copy()
        states, actions, rewards = [s], [], []
        for _ in range(env.max_steps):
            a = behavior.actions(env, s[None], rng)[0]
            s2, r, done = env.step(s, a, rng)
            actions.append(np.atleast_1d(a))
            rewards.append(r)
            states.append(s2)
            s = s2
            if done:
                break
        trajs.append(Trajectory(np.array(states), np.array(actions), np.array(rewards)))
    header = {
        "env": env.name,
        "seed": seed,
        "behavior": behavior.kind,
        "epsilon": behavior.epsilon,
        "version": 1,
    }
    return TransitionDataset(trajs, header)


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    ci_low: float
    ci_high: float
    episodes: int


def binomial_ci(successes: int, n: int, z: float = 1.96) -> tuple[float, float]:
    p = successes / n
    half = z * np.sqrt(p * (1.0 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


def evaluate(env, sampler, episodes: int, rng) -> EvalResult:
    """Run `episodes` rollouts in lockstep from the start state toward the map goal.

    `sampler(obs, goals, rng)` returns continuous action vectors for a batch;
    samplers with a `reset(n)` method are reset before the rollout.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    states = np.repeat(env.start[None], episodes, axis=0)
    goals = np.repeat(env.goal_features()[None], episodes, axis=0)
    active = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    success = np.zeros(episodes, dtype=bool)
    if hasattr(sampler, "reset"):
        sampler.reset(episodes)
    for _ in range(env.max_steps):
        if not active.any():
            break
        vecs = np.asarray(sampler(env.features(states), goals, rng))
        acts = env.decode_actions(vecs)
        nxt, r, done = env.step_batch(states, acts, rng)
        states = np.where(active[:, None], nxt, states)
        returns += np.where(active, r, 0.0)
        success |= active & done
        active &= ~done
    k = int(success.sum())
    lo, hi = binomial_ci(k, episodes)
    return EvalResult(k / episodes, float(returns.mean()), lo, hi, episodes)


def action_sampler_from_tabular(env: GridWorld, probs: np.ndarray):
    """Sampler that draws GridWorld actions from a tabular policy over `env.cells`."""

    def _sample(obs, goals, rng):
        idx = [env.cell_index[(int(r), int(c))] for r, c in np.asarray(obs, dtype=np.int64)]
        p = probs[idx]
        u = rng.random((len(idx), 1))
        acts = (u > np.cumsum(p, axis=1)).sum(axis=1)
        return env.encode_actions(np.minimum(acts, probs.shape[1] - 1))

    return _sample
