"""Finite MDPs and exact dynamic-programming primitives.

Everything here is float64 and solved with direct linear solves; the
theorem checks downstream rely on residuals near machine precision.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_PROB_ATOL = 1e-12


class ShapeError(ValueError):
    """Raised when arrays handed to an MDP routine have inconsistent shapes."""


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with rewards r[s, a] and transitions P[s, a, s']."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        r = np.asarray(self.reward, dtype=np.float64)
        rho = np.asarray(self.initial_dist, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ShapeError(f"transition must be (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (S, A):
            raise ShapeError(f"reward must be {(S, A)}, got {r.shape}")
        if rho.shape != (S,):
            raise ShapeError(f"initial_dist must be ({S},), got {rho.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > _PROB_ATOL:
            raise ValueError("transition rows must be probability vectors")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > _PROB_ATOL:
            raise ValueError("initial_dist must be a probability vector")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        for name, arr in (("transition", P), ("reward", r), ("initial_dist", rho)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def with_initial(self, initial_dist) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, self.discount, initial_dist)

    def with_reward(self, reward) -> "TabularMdp":
        return TabularMdp(self.transition, reward, self.discount, self.initial_dist)

    def with_discount(self, discount: float) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, discount, self.initial_dist)

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.ravel().tolist(),
            "discount": self.discount,
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        S, A = int(d["num_states"]), int(d["num_actions"])
        if S < 1 or A < 1:
            raise ValueError("num_states and num_actions must be positive")
        P = np.asarray(d["transition"], dtype=np.float64)
        r = np.asarray(d["reward"], dtype=np.float64)
        if P.size != S * A * S or r.size != S * A:
            raise ShapeError("flattened transition/reward sizes do not match num_states/num_actions")
        return cls(P.reshape(S, A, S), r.reshape(S, A), float(d["discount"]), d["initial_dist"])


def load_mdp(path) -> TabularMdp:
    """Read an MDP from a JSON or TOML file with flattened row-major arrays."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        from cfgrl.config import toml_loads

        return TabularMdp.from_dict(toml_loads(text))
    return TabularMdp.from_dict(json.loads(text))


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=1) + "\n")


@dataclass(frozen=True)
class TabularPolicy:
    """Row-stochastic matrix probs[s, a]."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeError(f"policy must be (S, A), got {p.shape}")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > _PROB_ATOL:
            raise ValueError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(num_actions)[actions])

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class ValueTriple:
    v: np.ndarray
    q: np.ndarray

    @property
    def adv(self) -> np.ndarray:
        return self.q - self.v[:, None]


def _check_pair(mdp: TabularMdp, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ShapeError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.num_states}, {mdp.num_actions})"
        )


def policy_matrices(mdp: TabularMdp, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state kernel P_pi and per-state reward r_pi."""
    _check_pair(mdp, policy)
    P_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    return P_pi, r_pi


def _solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(matrix, rhs)
    except np.linalg.LinAlgError as exc:  # cannot happen for discount < 1
        raise RuntimeError("singular Bellman system") from exc


def policy_evaluation(mdp: TabularMdp, policy: TabularPolicy) -> ValueTriple:
    P_pi, r_pi = policy_matrices(mdp, policy)
    S = mdp.num_states
    v = _solve(np.eye(S) - mdp.discount * P_pi, r_pi)
    q = mdp.reward + mdp.discount * mdp.transition @ v
    # v is re-expressed through q so that E_pi[A] vanishes to rounding, and
    # states with a single supported action carry an advantage of exactly zero
    # even when the row sums to 1 only up to an ulp.
    probs = policy.probs
    v = np.einsum("sa,sa->s", probs, q) / probs.sum(axis=1)
    single = np.count_nonzero(probs, axis=1) == 1
    v[single] = q[single, np.argmax(probs[single], axis=1)]
    return ValueTriple(v=v, q=q)


def bellman_residual(mdp: TabularMdp, policy: TabularPolicy, v: np.ndarray) -> float:
    P_pi, r_pi = policy_matrices(mdp, policy)
    return float(np.max(np.abs(v - (r_pi + mdp.discount * P_pi @ v))))


def expected_return(mdp: TabularMdp, policy: TabularPolicy) -> float:
    return float(mdp.initial_dist @ policy_evaluation(mdp, policy).v)


def state_occupancy(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """(1 - gamma) sum_t gamma^t Pr(s_t = s)."""
    P_pi, _ = policy_matrices(mdp, policy)
    S = mdp.num_states
    return _solve((np.eye(S) - mdp.discount * P_pi).T, (1.0 - mdp.discount) * mdp.initial_dist)


def occupancy(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Discounted state-action occupancy d[s, a]."""
    return state_occupancy(mdp, policy)[:, None] * policy.probs


def surrogate_objective(mdp: TabularMdp, ref: TabularPolicy, new: TabularPolicy) -> float:
    """Expected reference advantage of `new` under the reference state distribution."""
    _check_pair(mdp, new)
    d_ref = state_occupancy(mdp, ref)
    adv = policy_evaluation(mdp, ref).adv
    return float(d_ref @ np.einsum("sa,sa->s", new.probs, adv))


def discounted_goal_distribution(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """p^gamma(g | s, a) = (1 - gamma) sum_{t>=1} gamma^(t-1) Pr(s_t = g | s_0 = s, a_0 = a).

    Returned with layout [g, s, a].
    """
    P_pi, _ = policy_matrices(mdp, policy)
    S = mdp.num_states
    gam = mdp.discount
    # row s' of M is the discounted visitation (t >= 0) started from s'
    M = _solve(np.eye(S) - gam * P_pi, np.eye(S))
    p = (1.0 - gam) * np.einsum("sat,tg->gsa", mdp.transition, M)
    return p


def random_mdp(
    rng: np.random.Generator,
    max_states: int = 6,
    max_actions: int = 5,
    discount: float = 0.9,
    min_actions: int = 1,
) -> TabularMdp:
    """Dirichlet transitions, rewards uniform on [-1, 1], Dirichlet initial distribution."""
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(min_actions, max_actions + 1))
    P = rng.dirichlet(np.ones(S), size=(S, A))
    r = rng.uniform(-1.0, 1.0, size=(S, A))
    rho = rng.dirichlet(np.ones(S))
    return TabularMdp(P, r, discount, rho)


def random_policy(rng: np.random.Generator, num_states: int, num_actions: int) -> TabularPolicy:
    """Full-support policy with Dirichlet rows."""
    return TabularPolicy(rng.dirichlet(np.ones(num_actions), size=num_states))
