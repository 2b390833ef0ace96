"""Offline trajectories and their newline-delimited JSON persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    """states[0..T] with actions[0..T-1] and rewards[0..T-1]; states[T] is terminal."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states)
        self.actions = np.asarray(self.actions)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("states and actions must be 2-D (time, dim)")
        T = self.actions.shape[0]
        if T < 1:
            raise ValueError("trajectory needs at least one transition")
        if self.states.shape[0] != T + 1 or self.rewards.shape != (T,):
            raise ValueError(
                f"inconsistent trajectory: {self.states.shape[0]} states, "
                f"{T} actions, {self.rewards.shape[0]} rewards"
            )

    def __len__(self):
        return self.actions.shape[0]


@dataclass
class TransitionDataset:
    trajectories: list
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index()

    def _index(self):
        trajs = self.trajectories
        if not trajs:
            self.num_transitions = 0
            return
        lengths = np.array([len(t) for t in trajs])
        self.lengths = lengths
        self.state_offsets = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]])
        self.all_states = np.concatenate([t.states for t in trajs]).astype(np.float64)
        self.traj_of = np.repeat(np.arange(len(trajs)), lengths)
        self.time_of = np.concatenate([np.arange(n) for n in lengths])
        base = self.state_offsets[self.traj_of] + self.time_of
        self.observations = self.all_states[base]
        self.next_observations = self.all_states[base + 1]
        self.actions = np.concatenate([t.actions for t in trajs]).astype(np.float64)
        self.rewards = np.concatenate([t.rewards for t in trajs])
        # an episode only terminates on reward (goal reached); otherwise it timed out
        self.dones = np.zeros(len(self.rewards), dtype=bool)
        ends = np.cumsum(lengths) - 1
        self.dones[ends] = self.rewards[ends] > 0
        self.num_transitions = int(lengths.sum())

    def __len__(self):
        return self.num_transitions

    def remaining(self, idx):
        """Steps left in the trajectory after transition `idx`, i.e. T - t."""
        return self.lengths[self.traj_of[idx]] - self.time_of[idx]

    def future_states(self, idx, offset):
        """s_{t + offset} for transitions `idx`."""
        return self.all_states[self.state_offsets[self.traj_of[idx]] + self.time_of[idx] + offset]


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def _plain(arr: np.ndarray):
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(int).tolist()
    return arr.astype(float).tolist()


def save_dataset(dataset: TransitionDataset, path) -> None:
    header = {"version": FORMAT_VERSION, "env": None, "seed": None, "behavior": None}
    header.update(dataset.header)
    header["version"] = FORMAT_VERSION
    lines = [_dumps(header)]
    for traj in dataset.trajectories:
        lines.append(
            _dumps({"states": _plain(traj.states), "actions": _plain(traj.actions), "rewards": _plain(traj.rewards)})
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> TransitionDataset:
    path = Path(path)
    text = path.read_text()
    if not text:
        raise DatasetFormatError(f"{path}: line 1: missing header")
    lines = text.split("\n")
    if lines[-1] != "":
        raise DatasetFormatError(f"{path}: line {len(lines)}: truncated (no trailing newline)")
    lines = lines[:-1]
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line 1: malformed header ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: line 1: unsupported dataset version {header.get('version') if isinstance(header, dict) else None!r}"
        )
    trajs = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            trajs.append(Trajectory(rec["states"], rec["actions"], rec["rewards"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    return TransitionDataset(trajs, header)
