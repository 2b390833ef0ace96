"""Tanh-squashed diagonal Gaussian policy, used for AWR and the Gaussian BC baselines."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from cfgrl.neural import DenseNet, load_blob, net_from_tensors, net_tensors, save_blob

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_SQUASH_EPS = 1e-6


class GaussianPolicy:
    """a = low + (tanh(u) + 1) (high - low) / 2 with u ~ N(mu(x), diag(exp(log_std))^2).

    The standard deviation is a state-independent parameter.
    """

    def __init__(self, in_dim, action_dim, widths=(64, 64), activation="gelu", low=None, high=None,
                 rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = int(in_dim)
        self.action_dim = int(action_dim)
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.dtype = np.dtype(dtype)
        self.low = -np.ones(action_dim) if low is None else np.asarray(low, dtype=np.float64)
        self.high = np.ones(action_dim) if high is None else np.asarray(high, dtype=np.float64)
        self.net = DenseNet([in_dim, *self.widths, action_dim], activation, rng, dtype)
        self.log_std = np.zeros(action_dim, dtype=self.dtype)

    def params(self):
        return self.net.params() + [self.log_std]

    def copy(self):
        new = GaussianPolicy.__new__(GaussianPolicy)
        new.__dict__.update(self.__dict__)
        new.net = self.net.copy()
        new.log_std = self.log_std.copy()
        return new

    def astype(self, dtype):
        new = self.copy()
        new.dtype = np.dtype(dtype)
        new.net = new.net.astype(dtype)
        new.log_std = new.log_std.astype(dtype)
        return new

    def _to_unit(self, actions):
        a = np.asarray(actions, dtype=np.float64).reshape(-1, self.action_dim)
        return 2.0 * (a - self.low) / (self.high - self.low) - 1.0

    def _from_unit(self, y):
        return self.low + (y + 1.0) * 0.5 * (self.high - self.low)

    def nll_and_grad(self, inputs, actions, weights=None):
        """Weighted batch mean of -log pi(a | x).

        Returns (loss, grads, per_sample_nll, per_sample_grad_norms); the norms
        are those of each sample's weighted gradient w.r.t. the network output.
        """
        y = np.clip(self._to_unit(actions), -1.0 + _SQUASH_EPS, 1.0 - _SQUASH_EPS)
        u = np.arctanh(y).astype(self.dtype)
        mu, cache = self.net.forward_cache(inputs)
        B = mu.shape[0]
        w = np.ones(B, dtype=self.dtype) if weights is None else np.asarray(weights, dtype=self.dtype)
        log_std = np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        inv_var = np.exp(-2.0 * log_std)
        z = (u - mu) * np.exp(-log_std)
        jac = np.log(1.0 - y * y) + np.log(0.5 * (self.high - self.low))
        nll = (0.5 * z * z + log_std + 0.5 * np.log(2 * np.pi)).sum(axis=1) + jac.sum(axis=1)
        loss = float(np.sum(w * nll) / B)
        dmu = (-(u - mu) * inv_var) * (w / B)[:, None]
        grads, _ = self.net.backward(cache, dmu.astype(self.dtype))
        dlog = ((1.0 - z * z) * (w / B)[:, None]).sum(axis=0)
        inside = (self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX)
        grads.append((dlog * inside).astype(self.dtype))
        norms = np.linalg.norm(dmu * B, axis=1)
        return loss, grads, nll, norms

    def mode(self, inputs):
        return self._from_unit(np.tanh(np.asarray(self.net.forward(inputs), dtype=np.float64)))

    def sample(self, inputs, rng):
        mu = np.asarray(self.net.forward(inputs), dtype=np.float64)
        std = np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))
        return self._from_unit(np.tanh(mu + std * rng.standard_normal(mu.shape)))


def save_gaussian(policy: GaussianPolicy, path) -> None:
    tensors = net_tensors(policy.net, prefix="mean/")
    tensors["log_std"] = policy.log_std
    save_blob(path, tensors, {"layer_widths": policy.net.layer_widths, "nonlinearity": policy.activation})
    meta = {
        "kind": "gaussian_policy",
        "in_dim": policy.in_dim,
        "action_dim": policy.action_dim,
        "widths": policy.widths,
        "nonlinearity": policy.activation,
        "bounds": {"low": policy.low.tolist(), "high": policy.high.tolist()},
    }
    Path(path).with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_gaussian(path) -> GaussianPolicy:
    meta = json.loads(Path(path).with_suffix(".json").read_text())
    _, tensors = load_blob(path)
    pol = GaussianPolicy(meta["in_dim"], meta["action_dim"], meta["widths"], meta["nonlinearity"],
                         meta["bounds"]["low"], meta["bounds"]["high"])
    pol.net = net_from_tensors(pol.net.layer_widths, pol.activation, tensors, prefix="mean/")
    pol.log_std = tensors["log_std"].astype(pol.dtype)
    return pol
