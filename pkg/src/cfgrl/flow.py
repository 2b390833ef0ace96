"""Conditional flow-matching policies with classifier-free guidance.

The velocity field v(a_t, t, s, c) is a DenseNet over the concatenation
[a_t, t, s, e(c)].  The condition c is either an optimality label
o in {0, 1} (looked up in a learned 3-row embedding whose extra row encodes
the null condition) or a goal vector (replaced by a learned null-goal vector
when dropped).  Null conditions are passed as a boolean mask next to the
condition array so both kinds share one code path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from cfgrl.neural import AdamState, DenseNet, load_blob, net_from_tensors, net_tensors, save_blob

OPTIMALITY = "optimality"
GOAL = "goal"
SHARED = "shared"
SEPARATE = "separate"


@dataclass
class GuidanceConfig:
    w: float = 3.0
    steps: int = 16
    low: np.ndarray | None = None
    high: np.ndarray | None = None

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("flow steps must be >= 1")
        if not np.isfinite(self.w) or self.w < 0:
            raise ValueError("guidance weight must be finite and non-negative")
        self.steps = int(self.steps)
        if self.low is not None:
            self.low = np.asarray(self.low, dtype=np.float64)
            self.high = np.asarray(self.high, dtype=np.float64)
            if np.any(self.low >= self.high):
                raise ValueError("action bounds need low < high")


class FlowPolicyNet:
    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        conditioning: str = OPTIMALITY,
        goal_dim: int | None = None,
        embed_dim: int = 8,
        mode: str = SHARED,
        widths=(64, 64),
        activation: str = "gelu",
        low=None,
        high=None,
        rng=None,
        dtype=np.float32,
    ):
        if conditioning not in (OPTIMALITY, GOAL):
            raise ValueError(f"unknown conditioning {conditioning!r}")
        if mode not in (SHARED, SEPARATE):
            raise ValueError(f"unknown architecture mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.conditioning = conditioning
        self.mode = mode
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.dtype = np.dtype(dtype)
        self.low = np.full(action_dim, -1.0) if low is None else np.asarray(low, dtype=np.float64)
        self.high = np.full(action_dim, 1.0) if high is None else np.asarray(high, dtype=np.float64)
        if conditioning == GOAL:
            self.goal_dim = int(goal_dim if goal_dim is not None else state_dim)
            self.embed_dim = self.goal_dim
            # learned stand-in for the dropped goal
            self.embedding = (0.1 * rng.standard_normal(self.goal_dim)).astype(self.dtype)
        else:
            self.goal_dim = None
            self.embed_dim = int(embed_dim)
            # rows: null, o=0, o=1
            self.embedding = rng.standard_normal((3, self.embed_dim)).astype(self.dtype)
        base = self.action_dim + 1 + self.state_dim
        if mode == SHARED:
            self.nets = {"shared": DenseNet([base + self.embed_dim, *self.widths, action_dim], activation, rng, dtype)}
        else:
            self.nets = {
                "cond": DenseNet([base + self.embed_dim, *self.widths, action_dim], activation, rng, dtype),
                "uncond": DenseNet([base, *self.widths, action_dim], activation, rng, dtype),
            }

    # parameters are the nets' arrays (sorted by key) followed by the embedding
    def params(self) -> list[np.ndarray]:
        out = []
        for key in sorted(self.nets):
            out += self.nets[key].params()
        return out + [self.embedding]

    def set_params(self, params) -> None:
        params = list(params)
        i = 0
        for key in sorted(self.nets):
            n = len(self.nets[key].params())
            self.nets[key].set_params(params[i : i + n])
            i += n
        emb = np.asarray(params[i], dtype=self.dtype)
        if emb.shape != self.embedding.shape:
            raise ValueError("embedding shape mismatch")
        self.embedding = emb

    def astype(self, dtype) -> "FlowPolicyNet":
        new = self.copy()
        new.dtype = np.dtype(dtype)
        new.nets = {k: n.astype(dtype) for k, n in new.nets.items()}
        new.embedding = new.embedding.astype(dtype)
        return new

    def copy(self) -> "FlowPolicyNet":
        new = FlowPolicyNet.__new__(FlowPolicyNet)
        new.__dict__.update(self.__dict__)
        new.nets = {k: n.copy() for k, n in self.nets.items()}
        new.embedding = self.embedding.copy()
        return new

    # -- conditioning -------------------------------------------------------

    def _embed(self, cond, null, B):
        null = np.zeros(B, dtype=bool) if null is None else np.broadcast_to(np.asarray(null, dtype=bool), (B,))
        if self.conditioning == OPTIMALITY:
            labels = np.broadcast_to(np.asarray(cond if cond is not None else 1, dtype=np.int64), (B,))
            if np.any((labels != 0) & (labels != 1) & ~null):
                raise ValueError("optimality labels must be 0 or 1")
            rows = np.where(null, 0, labels + 1)
            return self.embedding[rows], rows, null
        if cond is None:
            if not np.all(null):
                raise ValueError("goal conditioning needs goals for non-null samples")
            goals = np.zeros((B, self.goal_dim), dtype=self.dtype)
        else:
            goals = np.broadcast_to(np.asarray(cond, dtype=self.dtype), (B, self.goal_dim))
        emb = np.where(null[:, None], self.embedding[None, :], goals).astype(self.dtype)
        return emb, None, null

    def _inputs(self, a, t, s):
        a = np.atleast_2d(np.asarray(a, dtype=self.dtype))
        B = a.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=self.dtype).reshape(-1, 1), (B, 1))
        s = np.broadcast_to(np.asarray(s, dtype=self.dtype).reshape(-1, self.state_dim), (B, self.state_dim))
        if a.shape[1] != self.action_dim:
            raise ValueError(f"expected action width {self.action_dim}, got {a.shape[1]}")
        return np.concatenate([a, t, s], axis=1)

    def velocity(self, a, t, s, cond=None, null=None) -> np.ndarray:
        base = self._inputs(a, t, s)
        B = base.shape[0]
        emb, _, null = self._embed(cond, null, B)
        if self.mode == SHARED:
            return self.nets["shared"].forward(np.concatenate([base, emb], axis=1))
        out = np.empty((B, self.action_dim), dtype=self.dtype)
        if np.any(null):
            out[null] = self.nets["uncond"].forward(base[null])
        if not np.all(null):
            keep = ~null
            out[keep] = self.nets["cond"].forward(np.concatenate([base[keep], emb[keep]], axis=1))
        return out

    def mse_and_grad(self, a_t, t, s, cond, null, target):
        """Batch mean of ||v - target||^2 and its gradient for every parameter."""
        base = self._inputs(a_t, t, s)
        B = base.shape[0]
        if B == 0:
            raise ValueError("empty batch")
        target = np.asarray(target, dtype=self.dtype).reshape(B, self.action_dim)
        emb, rows, null = self._embed(cond, null, B)
        grads = {}
        emb_grad = np.zeros_like(self.embedding)
        loss = 0.0
        if self.mode == SHARED:
            groups = [("shared", np.ones(B, dtype=bool), True)]
        else:
            groups = [("uncond", null, False), ("cond", ~null, True)]
        for key, mask, uses_emb in groups:
            net = self.nets[key]
            if not np.any(mask):
                grads[key] = [np.zeros_like(p) for p in net.params()]
                continue
            x = np.concatenate([base[mask], emb[mask]], axis=1) if uses_emb else base[mask]
            out, cache = net.forward_cache(x)
            diff = out - target[mask]
            loss += float(np.sum(diff * diff))
            g, dx = net.backward(cache, (2.0 / B) * diff)
            grads[key] = g
            if uses_emb:
                d_emb = dx[:, base.shape[1] :]
                if self.conditioning == OPTIMALITY:
                    np.add.at(emb_grad, rows[mask], d_emb)
                else:
                    emb_grad += d_emb[null[mask]].sum(axis=0)
        flat = []
        for key in sorted(self.nets):
            flat += grads[key]
        return loss / B, flat + [emb_grad]


# -- training ---------------------------------------------------------------


def cfm_loss(policy: FlowPolicyNet, states, actions, cond, null, rng, t=None, a0=None):
    """Flow-matching loss on linear noise-to-action paths.

    `t` and `a0` may be fixed by the caller; otherwise t ~ U[0, 1] and
    a0 ~ N(0, I) are drawn from `rng`.
    """
    actions = np.asarray(actions, dtype=policy.dtype)
    if actions.ndim != 2 or actions.shape[0] == 0:
        raise ValueError("empty batch")
    B = actions.shape[0]
    if t is None:
        t = rng.random(B)
    if a0 is None:
        a0 = rng.standard_normal(actions.shape)
    t = np.asarray(t, dtype=policy.dtype).reshape(B, 1)
    a0 = np.asarray(a0, dtype=policy.dtype)
    a_t = (1.0 - t) * a0 + t * actions
    return policy.mse_and_grad(a_t, t, states, cond, null, actions - a0)


def make_optimizer(policy, lr: float = 3e-4) -> AdamState:
    return AdamState.for_params(policy.params(), lr=lr)


def train_step(policy, states, actions, labeler, dropout_prob: float, opt: AdamState, rng):
    """One flow-matching + Adam step with condition dropout.

    `labeler` is either a condition array aligned with the batch or a callable
    ``labeler(states, actions) -> conditions``.  Returns (loss, null_fraction).
    """
    if not 0.0 <= dropout_prob <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    cond = labeler(states, actions) if callable(labeler) else labeler
    B = np.shape(actions)[0]
    null = rng.random(B) < dropout_prob
    loss, grads = cfm_loss(policy, states, actions, cond, null, rng)
    opt.update(policy.params(), grads)
    return loss, float(null.mean()) if B else 0.0


# -- sampling ---------------------------------------------------------------


def guided_velocity(policy: FlowPolicyNet, a, t, s, w: float, cond=None) -> np.ndarray:
    """(1 - w) v(a, t, s, null) + w v(a, t, s, cond); cond defaults to o = 1."""
    if cond is None and policy.conditioning == OPTIMALITY:
        cond = 1
    B = np.atleast_2d(a).shape[0]
    v_null = policy.velocity(a, t, s, cond, np.ones(B, dtype=bool))
    if policy.conditioning == GOAL and cond is None:
        raise ValueError("goal-guided velocity needs a goal")
    v_cond = policy.velocity(a, t, s, cond, np.zeros(B, dtype=bool))
    return (1.0 - w) * v_null + w * v_cond


def euler_integrate(field: Callable, a0: np.ndarray, steps: int) -> np.ndarray:
    """Integrate da/dt = field(a, t) from t=0 to 1 with `steps` uniform Euler steps."""
    a = np.array(a0, dtype=np.float64 if np.asarray(a0).dtype == np.float64 else np.asarray(a0).dtype)
    dt = 1.0 / steps
    for n in range(steps):
        a = a + dt * field(a, n * dt)
    return a


def sample(policy: FlowPolicyNet, states, cfg: GuidanceConfig, rng, cond=None) -> np.ndarray:
    """Guided Euler sampling from Gaussian noise; final actions are clipped to bounds."""
    s = np.asarray(states, dtype=policy.dtype).reshape(-1, policy.state_dim)
    B = s.shape[0]
    a0 = rng.standard_normal((B, policy.action_dim)).astype(policy.dtype)
    a = euler_integrate(lambda a, t: guided_velocity(policy, a, t, s, cfg.w, cond), a0, cfg.steps)
    low = policy.low if cfg.low is None else cfg.low
    high = policy.high if cfg.high is None else cfg.high
    return np.clip(a, low, high)


# -- checkpoints ------------------------------------------------------------


def sidecar_path(blob_path) -> Path:
    return Path(blob_path).with_suffix(".json")


def save_policy(policy: FlowPolicyNet, path) -> None:
    tensors = {}
    for key in sorted(policy.nets):
        tensors.update(net_tensors(policy.nets[key], prefix=f"{key}/"))
    tensors["embedding"] = policy.embedding
    save_blob(path, tensors, {"layer_widths": policy.widths, "nonlinearity": policy.activation})
    meta = {
        "kind": "flow_policy",
        "conditioning": policy.conditioning,
        "architecture_mode": policy.mode,
        "embedding_width": policy.embed_dim,
        "state_dim": policy.state_dim,
        "action_dim": policy.action_dim,
        "goal_dim": policy.goal_dim,
        "widths": policy.widths,
        "nonlinearity": policy.activation,
        "bounds": {"low": policy.low.tolist(), "high": policy.high.tolist()},
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_policy(path) -> FlowPolicyNet:
    meta = json.loads(sidecar_path(path).read_text())
    _, tensors = load_blob(path)
    policy = FlowPolicyNet(
        meta["state_dim"],
        meta["action_dim"],
        conditioning=meta["conditioning"],
        goal_dim=meta["goal_dim"],
        embed_dim=meta["embedding_width"],
        mode=meta["architecture_mode"],
        widths=meta["widths"],
        activation=meta["nonlinearity"],
        low=meta["bounds"]["low"],
        high=meta["bounds"]["high"],
    )
    for key, net in policy.nets.items():
        policy.nets[key] = net_from_tensors(net.layer_widths, net.activation, tensors, prefix=f"{key}/")
    policy.embedding = tensors["embedding"].astype(policy.dtype)
    return policy


# -- synthetic tilt probe -----------------------------------------------------


def two_mode_data(n: int, rng, weight_high: float = 0.3, centers=(-1.0, 1.0), std: float = 0.15):
    """1-D actions from a two-component mixture; label 1 marks the `centers[1]` component."""
    labels = (rng.random(n) < weight_high).astype(np.int64)
    actions = np.where(labels == 1, centers[1], centers[0]) + std * rng.standard_normal(n)
    return np.zeros((n, 1)), actions[:, None], labels


def train_two_mode_policy(
    rng, steps: int = 3000, batch_size: int = 256, mode: str = SHARED, weight_high: float = 0.3,
    widths=(64, 64), dropout: float = 0.1, lr: float = 1e-3, n_data: int = 20000,
):
    """Fit an optimality-conditioned flow policy to `two_mode_data`."""
    s, a, o = two_mode_data(n_data, rng, weight_high)
    policy = FlowPolicyNet(1, 1, OPTIMALITY, mode=mode, widths=widths, low=[-3.0], high=[3.0], rng=rng)
    opt = make_optimizer(policy, lr)
    for _ in range(steps):
        idx = rng.integers(0, n_data, batch_size)
        train_step(policy, s[idx], a[idx], o[idx], dropout, opt, rng)
    return policy


def tilt_fidelity_probe(policy: FlowPolicyNet, weights, rng, n_samples: int = 10_000, steps: int = 16, threshold: float = 0.0):
    """Fraction of guided samples above `threshold` (the o=1 basin) for each weight."""
    out = {}
    s = np.zeros((n_samples, policy.state_dim))
    for w in weights:
        a = sample(policy, s, GuidanceConfig(w=float(w), steps=steps), rng)
        out[float(w)] = float(np.mean(a[:, 0] > threshold))
    return out
