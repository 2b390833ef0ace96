"""Randomized tabular audit: one row per (instance, check)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cfgrl.config import VerifyConfig
from cfgrl.gcbc import tabular_gcbc_identity, tabular_goal_attenuation
from cfgrl.mdp import TabularMdp, TabularPolicy, policy_evaluation, random_mdp, random_policy
from cfgrl.theorems import (
    CHEBYSHEV_SLACK,
    IMPROVEMENT_SLACK,
    ExpClipped,
    IndicatorNonNegAdv,
    chebyshev_check,
    kl_solution_check,
    verify_attenuation,
    verify_improvement,
)

AT_LEAST = ">="
BELOW = "<"
IDENTITY_TOL = 1e-9
KL_TOL = 1e-3


@dataclass(frozen=True)
class AuditRow:
    seed: int
    check_id: str
    statistic: float
    threshold: float
    sense: str = AT_LEAST
    # J of the reference and of the tilted policy (largest weight for sweeps); NaN when not applicable
    j_ref: float = float("nan")
    j_new: float = float("nan")

    @property
    def holds(self) -> bool:
        if not np.isfinite(self.statistic):
            return False
        if self.sense == AT_LEAST:
            return self.statistic >= self.threshold
        return self.statistic < self.threshold


def deterministic_chain(length: int = 4, discount: float = 0.9, num_actions: int = 2) -> TabularMdp:
    """Action 0 advances one state, the others stay; the last state is absorbing."""
    P = np.zeros((length, num_actions, length))
    for s in range(length):
        P[s, 0, min(s + 1, length - 1)] = 1.0
        P[s, 1:, s] = 1.0
    r = np.zeros((length, num_actions))
    rho = np.zeros(length)
    rho[0] = 1.0
    return TabularMdp(P, r, discount, rho)


def _instance(seed: int, cfg: VerifyConfig):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, cfg.max_states, cfg.max_actions, cfg.discount)
    ref = random_policy(rng, mdp.num_states, mdp.num_actions)
    return mdp, ref, rng


def _random_monotone_triple(rng):
    n = int(rng.integers(1, 9))
    mu = rng.dirichlet(np.ones(n))
    x = np.sort(rng.normal(size=n))
    g = np.cumsum(rng.exponential(size=n)) * rng.choice([0.0, 1.0], p=[0.1, 0.9])
    h = np.cumsum(rng.exponential(size=n)) - rng.normal()
    # force an occasional tie in g to exercise ties
    if n > 2 and rng.random() < 0.2:
        g[1] = g[0]
    return mu, x, g, h


def instance_rows(seed: int, cfg: VerifyConfig, with_identity: bool) -> list[AuditRow]:
    mdp, ref, rng = _instance(seed, cfg)
    rows = []
    fns = {"indicator": IndicatorNonNegAdv(), "exp": ExpClipped(1.0, cfg.exp_clip)}
    for name, f in fns.items():
        rep = verify_improvement(mdp, ref, f)
        rows.append(AuditRow(seed, f"improvement/{name}", rep.J_new - rep.J_ref, -IMPROVEMENT_SLACK,
                             j_ref=rep.J_ref, j_new=rep.J_new))
        rows.append(AuditRow(seed, f"per-state-improvement/{name}", rep.per_state_margin, -IMPROVEMENT_SLACK))
        att = verify_attenuation(mdp, ref, f, cfg.attenuation_weights)
        rows.append(AuditRow(seed, f"attenuation/{name}", att.min_increment, -IMPROVEMENT_SLACK,
                             j_ref=att.returns[0], j_new=att.returns[-1]))
    goal = int(rng.integers(mdp.num_states))
    att = tabular_goal_attenuation(mdp, ref, goal, cfg.goal_weights)
    rows.append(AuditRow(seed, "goal-attenuation", att.min_increment, -IMPROVEMENT_SLACK,
                         j_ref=att.returns[0], j_new=att.returns[-1]))
    if with_identity:
        rep = tabular_gcbc_identity(mdp, ref)
        rows.append(AuditRow(seed, "gcbc-identity", rep.max_gap, IDENTITY_TOL, BELOW))
    adv = policy_evaluation(mdp, ref).adv
    s = int(rng.integers(mdp.num_states))
    kl = kl_solution_check(ref.probs[s], adv[s], beta=1.0)
    rows.append(AuditRow(seed, "kl-solution", kl.max_gap, KL_TOL, BELOW))
    return rows


def chain_rows(seed: int, cfg: VerifyConfig) -> list[AuditRow]:
    rng = np.random.default_rng(seed)
    chain = deterministic_chain(discount=cfg.discount)
    ref = TabularPolicy(rng.dirichlet(np.ones(chain.num_actions), size=chain.num_states))
    rep = tabular_gcbc_identity(chain, ref)
    return [AuditRow(seed, "gcbc-identity/chain", rep.max_gap, IDENTITY_TOL, BELOW)]


def chebyshev_rows(seed: int) -> list[AuditRow]:
    rng = np.random.default_rng(seed)
    mu, x, g, h = _random_monotone_triple(rng)
    rep = chebyshev_check(mu, x, g, h)
    return [AuditRow(seed, "chebyshev", rep.lhs - rep.rhs, -CHEBYSHEV_SLACK)]


def run_audit(cfg: VerifyConfig, base_seed: int = 0) -> list[AuditRow]:
    rows = []
    for i in range(cfg.instances):
        rows += instance_rows(base_seed + i, cfg, with_identity=i < cfg.identity_instances)
    rows += chain_rows(base_seed, cfg)
    for i in range(cfg.chebyshev_instances):
        rows += chebyshev_rows(base_seed + i)
    return rows
