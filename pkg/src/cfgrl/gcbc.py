"""Goal-conditioned behavioral cloning and value-free goal guidance.

A GCBC policy pi(a | s, g) trained on hindsight goals, together with the
unconditional pi(a | s) obtained from goal dropout, is combined at sampling
time as v = (1 - w) v(., null) + w v(., g).  w = 1 recovers plain GCBC and
w = 0 plain BC.  The tabular routines check the same construction exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cfgrl.data import TransitionDataset
from cfgrl.flow import GOAL, FlowPolicyNet, GuidanceConfig, load_policy, sample, save_policy, train_step
from cfgrl.mdp import TabularMdp, TabularPolicy, discounted_goal_distribution, policy_matrices, state_occupancy
from cfgrl.theorems import AttenuationReport, _attenuation

GEOMETRIC = "geometric"
UNIFORM_FUTURE = "uniform"


@dataclass(frozen=True)
class GoalSampler:
    mode: str = GEOMETRIC
    discount: float = 0.99

    def __post_init__(self):
        if self.mode not in (GEOMETRIC, UNIFORM_FUTURE):
            raise ValueError(f"unknown goal sampler mode {self.mode!r}")
        if self.mode == GEOMETRIC and not 0.0 < self.discount < 1.0:
            raise ValueError("geometric goal sampling needs 0 < discount < 1")

    def offsets(self, remaining, rng) -> np.ndarray:
        """Draw Delta >= 1 for transitions with `remaining` = T - t steps left."""
        remaining = np.asarray(remaining, dtype=np.int64)
        if np.any(remaining < 1):
            raise ValueError("cannot sample a future goal at the terminal index")
        if self.mode == GEOMETRIC:
            delta = rng.geometric(1.0 - self.discount, size=remaining.shape)
            return np.minimum(delta, remaining)
        return 1 + np.floor(rng.random(remaining.shape) * remaining).astype(np.int64)


def sample_goal(states, t: int, sampler: GoalSampler, rng):
    """Hindsight goal for step t of a trajectory whose states are s_0..s_T."""
    states = np.asarray(states)
    T = len(states) - 1
    if not 0 <= t < T:
        raise ValueError(f"index {t} has no future state (trajectory ends at {T})")
    delta = int(sampler.offsets(np.array([T - t]), rng)[0])
    return states[t + delta]


def sample_batch(dataset: TransitionDataset, batch_size: int, rng):
    return rng.integers(0, len(dataset), batch_size)


def relabel(dataset: TransitionDataset, idx, sampler: GoalSampler, rng):
    """(Delta, goal states) for transitions `idx`."""
    delta = sampler.offsets(dataset.remaining(idx), rng)
    return delta, dataset.future_states(idx, delta)


def train_gcbc(policy: FlowPolicyNet, dataset: TransitionDataset, sampler: GoalSampler, goal_dropout: float,
               opt, rng, batch_size: int = 256, features=None, encode=None):
    """One flow-matching step on hindsight-relabeled goals with goal dropout.

    `features`/`encode` map raw states/actions into the policy's input space
    (identity by default).
    """
    features = features or (lambda x: x)
    encode = encode or (lambda x: x)
    idx = sample_batch(dataset, batch_size, rng)
    _, goals = relabel(dataset, idx, sampler, rng)
    s = features(dataset.observations[idx])
    a = encode(dataset.actions[idx])
    loss, _ = train_step(policy, s, a, features(goals), goal_dropout, opt, rng)
    return loss


def guided_goal_sample(policy: FlowPolicyNet, s, g, cfg: GuidanceConfig, rng) -> np.ndarray:
    if policy.conditioning != GOAL:
        raise ValueError("goal guidance needs a goal-conditioned policy")
    return sample(policy, s, cfg, rng, cond=g)


# -- exact tabular counterparts ----------------------------------------------------


@dataclass
class IdentityReport:
    max_gap: float
    compared: int

    @property
    def passed(self) -> bool:
        return self.max_gap < 1e-9


def hindsight_conditional(mdp: TabularMdp, ref: TabularPolicy, tol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Bayes conditional p(a | s, g) of the hindsight joint, built by series summation.

    The joint law of (a_t, s_{t+Delta}) given s_t, with a_t ~ ref and
    Delta ~ Geom(1 - gamma), is accumulated term by term until the remaining
    geometric mass falls below `tol`.  Returns (conditional[g, s, a], joint[g, s, a]).
    """
    S, A = mdp.num_states, mdp.num_actions
    gam = mdp.discount
    P_pi, _ = policy_matrices(mdp, ref)
    step = mdp.transition.reshape(S * A, S)  # Pr(s_1 | s_0, a_0)
    acc = np.zeros((S * A, S))
    weight = 1.0 - gam
    mass = 1.0
    while mass > tol:
        acc += weight * step
        mass -= weight
        weight *= gam
        step = step @ P_pi
    joint = (ref.probs.reshape(S * A, 1) * acc).reshape(S, A, S).transpose(2, 0, 1)
    denom = joint.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(denom > 0, joint / np.where(denom > 0, denom, 1.0), 0.0)
    return cond, joint


def state_goal_distribution(mdp: TabularMdp, ref: TabularPolicy) -> np.ndarray:
    """p^gamma(g | s)[g, s] from the occupancy identity d_s = (1 - gamma) e_s + gamma p^gamma(. | s)."""
    S = mdp.num_states
    out = np.empty((S, S))
    for s in range(S):
        d = state_occupancy(mdp.with_initial(np.eye(S)[s]), ref)
        d[s] -= 1.0 - mdp.discount
        out[:, s] = d / mdp.discount
    return out


def tabular_gcbc_identity(mdp: TabularMdp, ref: TabularPolicy, mass_floor: float = 1e-8) -> IdentityReport:
    """Gap between the hindsight conditional and ref(a|s) p(g|s,a) / p(g|s)."""
    if np.any(ref.probs <= 0):
        raise ValueError("reference policy must have full support")
    lhs, _ = hindsight_conditional(mdp, ref)
    p_gsa = discounted_goal_distribution(mdp, ref)
    p_gs = state_goal_distribution(mdp, ref)
    keep = p_gs > mass_floor
    rhs = ref.probs[None] * p_gsa / np.where(keep, p_gs, 1.0)[:, :, None]
    gaps = np.abs(lhs - rhs)[keep]
    return IdentityReport(float(gaps.max()) if gaps.size else 0.0, int(keep.sum()))


def goal_reaching_mdp(mdp: TabularMdp, goal: int) -> TabularMdp:
    """Same dynamics with reward 1[s = goal]."""
    r = np.zeros((mdp.num_states, mdp.num_actions))
    r[goal] = 1.0
    return mdp.with_reward(r)


def tabular_goal_attenuation(mdp: TabularMdp, ref: TabularPolicy, goal: int, weights) -> AttenuationReport:
    """Returns of pi_w ~ ref * p^gamma(goal | s, a)^w under the goal-indicator reward."""
    if np.any(ref.probs <= 0):
        raise ValueError("reference policy must have full support")
    table = discounted_goal_distribution(mdp, ref)[goal]
    return _attenuation(goal_reaching_mdp(mdp, goal), ref, table, weights)


# -- hierarchical policies ---------------------------------------------------------


@dataclass
class HierarchicalPolicy:
    high: FlowPolicyNet  # (s, g) -> subgoal state
    low: FlowPolicyNet  # (s, subgoal) -> action
    subgoal_steps: int = 25

    def __post_init__(self):
        if self.subgoal_steps < 1:
            raise ValueError("subgoal_steps must be >= 1")
        if self.high.action_dim != self.low.goal_dim:
            raise ValueError("subgoal width must match the low level's goal width")


def hierarchical_targets(dataset: TransitionDataset, idx, sampler: GoalSampler, k: int, rng):
    """(goal, subgoal) states with subgoal at s_{t + min(k, Delta)}."""
    delta, goals = relabel(dataset, idx, sampler, rng)
    sub = dataset.future_states(idx, np.minimum(k, delta))
    return goals, sub


def train_hierarchical(hp: HierarchicalPolicy, dataset: TransitionDataset, sampler: GoalSampler, dropout: float,
                       opts, rng, batch_size: int = 256, features=None, encode=None):
    features = features or (lambda x: x)
    encode = encode or (lambda x: x)
    high_opt, low_opt = opts
    idx = sample_batch(dataset, batch_size, rng)
    goals, sub = hierarchical_targets(dataset, idx, sampler, hp.subgoal_steps, rng)
    s = features(dataset.observations[idx])
    high_loss, _ = train_step(hp.high, s, features(sub), features(goals), dropout, high_opt, rng)
    low_loss, _ = train_step(hp.low, s, encode(dataset.actions[idx]), features(sub), dropout, low_opt, rng)
    return high_loss, low_loss


def sample_hierarchical(hp: HierarchicalPolicy, s, g, cfg_high: GuidanceConfig, cfg_low: GuidanceConfig, rng,
                        subgoal=None):
    """Guided subgoal from the high level, then a guided action toward it.

    Pass `subgoal` to reuse a previously drawn subgoal.  Returns (action, subgoal).
    """
    if subgoal is None:
        subgoal = sample(hp.high, s, cfg_high, rng, cond=g)
    return sample(hp.low, s, cfg_low, rng, cond=subgoal), subgoal


class HierarchicalActor:
    """Rollout sampler that redraws subgoals every `subgoal_steps` calls."""

    def __init__(self, hp: HierarchicalPolicy, cfg_high: GuidanceConfig, cfg_low: GuidanceConfig):
        self.hp, self.cfg_high, self.cfg_low = hp, cfg_high, cfg_low
        self.reset(0)

    def reset(self, n):
        self.calls = 0
        self.subgoal = None

    def __call__(self, obs, goals, rng):
        if self.calls % self.hp.subgoal_steps == 0:
            self.subgoal = None
        action, self.subgoal = sample_hierarchical(self.hp, obs, goals, self.cfg_high, self.cfg_low, rng, self.subgoal)
        self.calls += 1
        return action


def save_hierarchical(hp: HierarchicalPolicy, directory, sampler: GoalSampler | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_policy(hp.high, directory / "high.blob")
    save_policy(hp.low, directory / "low.blob")
    manifest = {
        "subgoal_steps": hp.subgoal_steps,
        "state_dim": hp.high.state_dim,
        "subgoal_dim": hp.high.action_dim,
        "action_dim": hp.low.action_dim,
        "sampler": None if sampler is None else {"mode": sampler.mode, "discount": sampler.discount},
        "high": "high.blob",
        "low": "low.blob",
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_hierarchical(directory) -> HierarchicalPolicy:
    directory = Path(directory)
    m = json.loads((directory / "manifest.json").read_text())
    return HierarchicalPolicy(load_policy(directory / m["high"]), load_policy(directory / m["low"]), m["subgoal_steps"])
