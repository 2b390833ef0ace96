"""Expectile value learning, advantage-based optimality labels, and AWR extraction.

Value learning follows implicit Q-learning: V(s) is fit to an upper
expectile of Q_target(s, a) over dataset actions, and Q(s, a) regresses to
r + gamma V(s').  Nothing here queries actions outside the dataset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cfgrl.gaussian import GaussianPolicy
from cfgrl.neural import AdamState, DenseNet, load_blob, net_from_tensors, net_tensors, save_blob


def expectile_loss(u, tau: float):
    """|tau - 1(u < 0)| * u^2."""
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0)) * u * u


@dataclass
class ValueLearner:
    q_net: DenseNet
    v_net: DenseNet
    q_target: DenseNet
    expectile: float = 0.9
    smoothing: float = 0.005
    discount: float = 0.99
    q_opt: AdamState | None = None
    v_opt: AdamState | None = None

    def __post_init__(self):
        if not 0.0 < self.expectile < 1.0:
            raise ValueError("expectile must lie in (0, 1)")
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError("smoothing coefficient must lie in (0, 1]")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")

    @classmethod
    def create(cls, state_dim, action_dim, widths=(64, 64), activation="gelu", rng=None, lr=3e-4,
               init="scaled", dtype=np.float32, **kw):
        rng = rng if rng is not None else np.random.default_rng(0)
        q = DenseNet([state_dim + action_dim, *widths, 1], activation, rng, dtype, init)
        v = DenseNet([state_dim, *widths, 1], activation, rng, dtype, init)
        return cls(q, v, q.copy(), q_opt=AdamState.for_params(q.params(), lr),
                   v_opt=AdamState.for_params(v.params(), lr), **kw)

    def q(self, s, a, target=False):
        net = self.q_target if target else self.q_net
        return net.forward(np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1))[:, 0]

    def v(self, s):
        return self.v_net.forward(np.atleast_2d(s))[:, 0]


def value_update(learner: ValueLearner, s, a, r, s_next, done=None):
    """One expectile step on V, one TD step on Q, then Polyak-average the target Q."""
    s = np.atleast_2d(s)
    B = s.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    dt = learner.v_net.dtype
    r = np.asarray(r, dtype=dt).reshape(B)
    done = np.zeros(B, dtype=dt) if done is None else np.asarray(done, dtype=dt).reshape(B)
    sa = np.concatenate([s, np.atleast_2d(a)], axis=1)

    q_t = learner.q_target.forward(sa)[:, 0]
    v_out, v_cache = learner.v_net.forward_cache(s)
    u = q_t - v_out[:, 0]
    weight = np.abs(learner.expectile - (u < 0)).astype(dt)
    v_loss = float(np.mean(weight * u * u))
    v_grads, _ = learner.v_net.backward(v_cache, (-2.0 / B * weight * u)[:, None])
    learner.v_opt.update(learner.v_net.params(), v_grads)

    target = r + learner.discount * (1.0 - done) * learner.v_net.forward(np.atleast_2d(s_next))[:, 0]
    q_out, q_cache = learner.q_net.forward_cache(sa)
    diff = q_out[:, 0] - target
    q_loss = float(np.mean(diff * diff))
    q_grads, _ = learner.q_net.backward(q_cache, (2.0 / B * diff)[:, None])
    learner.q_opt.update(learner.q_net.params(), q_grads)

    rho = learner.smoothing
    for tgt, src in zip(learner.q_target.params(), learner.q_net.params()):
        tgt *= 1.0 - rho
        tgt += rho * src
    return q_loss, v_loss


def advantage(learner: ValueLearner, s, a) -> np.ndarray:
    return learner.q(s, a) - learner.v(s)


def label_optimality(learner: ValueLearner, s, a) -> np.ndarray:
    """1 where the advantage is non-negative, else 0."""
    return (advantage(learner, s, a) >= 0).astype(np.int64)


def save_values(learner: ValueLearner, path) -> None:
    tensors = {}
    tensors.update(net_tensors(learner.q_net, "q/"))
    tensors.update(net_tensors(learner.v_net, "v/"))
    tensors.update(net_tensors(learner.q_target, "q_target/"))
    save_blob(path, tensors, {
        "layer_widths": learner.q_net.layer_widths,
        "v_layer_widths": learner.v_net.layer_widths,
        "nonlinearity": learner.q_net.activation,
        "expectile": learner.expectile,
        "smoothing": learner.smoothing,
        "discount": learner.discount,
    })


def load_values(path) -> ValueLearner:
    h, t = load_blob(path)
    act = h["nonlinearity"]
    q = net_from_tensors(h["layer_widths"], act, t, "q/")
    v = net_from_tensors(h["v_layer_widths"], act, t, "v/")
    qt = net_from_tensors(h["layer_widths"], act, t, "q_target/")
    return ValueLearner(q, v, qt, h["expectile"], h["smoothing"], h["discount"])


# -- AWR ----------------------------------------------------------------------


@dataclass(frozen=True)
class AwrConfig:
    inverse_temperature: float = 1.0
    clip: float = 100.0

    def __post_init__(self):
        if self.inverse_temperature < 0:
            raise ValueError("inverse temperature must be non-negative")
        if self.clip <= 0:
            raise ValueError("weight clip must be positive")


def awr_weights(adv, config: AwrConfig) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(np.exp(np.minimum(adv * config.inverse_temperature, 700.0)), config.clip)


def awr_update(policy: GaussianPolicy, learner: ValueLearner, s, a, config: AwrConfig, opt: AdamState):
    """One step on  -mean_i w_i log pi(a_i | s_i)  with w_i = min(exp(A_i / beta), clip)."""
    w = awr_weights(advantage(learner, s, a), config)
    loss, grads, nll, norms = policy.nll_and_grad(s, a, w)
    opt.update(policy.params(), grads)
    return loss, gradient_diagnostics(w, norms / np.maximum(w, 1e-300))


def bc_update(policy: GaussianPolicy, inputs, a, opt: AdamState):
    loss, grads, _, _ = policy.nll_and_grad(inputs, a)
    opt.update(policy.params(), grads)
    return loss


# -- batch diagnostics ------------------------------------------------------------


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights are all zero")
    return float(total * total / np.sum(w * w))


def exp_weight_ess(adv, inverse_temperature: float) -> float:
    """ESS of exp(adv * inverse_temperature), computed in the log domain."""
    x = np.asarray(adv, dtype=np.float64) * inverse_temperature
    x = x - x.max()
    return effective_sample_size(np.exp(x))


@dataclass
class GradientDiagnostics:
    weights: np.ndarray
    grad_norms: np.ndarray
    shares: np.ndarray
    ess: float

    @property
    def max_share(self) -> float:
        return float(self.shares.max())


def gradient_diagnostics(weights, grad_norms=None) -> GradientDiagnostics:
    """Per-sample weighted gradient magnitude proxies and the batch ESS.

    `grad_norms` are unweighted per-sample gradient norms; when omitted each
    sample counts as unit norm and the proxy is the weight itself.
    """
    w = np.asarray(weights, dtype=np.float64)
    ess = effective_sample_size(w)
    g = np.ones_like(w) if grad_norms is None else np.asarray(grad_norms, dtype=np.float64)
    proxy = w * g
    total = proxy.sum()
    shares = proxy / total if total > 0 else np.full_like(proxy, 1.0 / len(proxy))
    return GradientDiagnostics(w, proxy, shares, ess)
