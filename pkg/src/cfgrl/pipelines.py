"""Training and evaluation pipelines behind the `train` and `sweep` commands.

Layout under the output directory:

    values/seed<k>/values.blob             shared frozen values (awr, optimality-conditioned cfgrl)
    <method>/seed<k>/policy.blob (+ .json)  single-checkpoint methods
    awr/ib<1/beta>/seed<k>/policy.blob      one checkpoint per inverse temperature
    hcfgrl|hgcbc/seed<k>/{high,low}.blob    hierarchical methods, plus manifest.json
    .../train_log.csv                       per-run training curve
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cfgrl.config import RunConfig, as_dict
from cfgrl.data import TransitionDataset, load_dataset
from cfgrl.envs import evaluate, make_env
from cfgrl.flow import GOAL, OPTIMALITY, FlowPolicyNet, GuidanceConfig, load_policy, make_optimizer, sample, save_policy, train_step
from cfgrl.gaussian import GaussianPolicy, load_gaussian, save_gaussian
from cfgrl.gcbc import (
    GoalSampler,
    HierarchicalActor,
    HierarchicalPolicy,
    hierarchical_targets,
    load_hierarchical,
    relabel,
    save_hierarchical,
    train_hierarchical,
)
from cfgrl.iql import AwrConfig, ValueLearner, awr_update, bc_update, label_optimality, load_values, save_values, value_update
from cfgrl.neural import AdamState

TRAIN_LOG = "train_log.csv"
SWEEP_COLUMNS = ("method", "w_or_beta", "seed", "success_rate", "ci_low", "ci_high", "episodes")
# Gaussian heads squash onto a box slightly wider than the action box so that
# boundary targets stay inside the open tanh range; samples are clipped afterwards.
GAUSSIAN_MARGIN = 1.25
# value-free baselines and the guidance weight they correspond to
DEFINITIONAL_WEIGHT = {"flow-gcbc": 1.0, "flow-bc": 0.0, "gcbc": 1.0, "bc": 0.0, "hgcbc": 1.0}
# reference-scale hyperparameters that the desk-scale defaults replace
REFERENCE_DEFAULTS = {"widths": [512, 512, 512, 512], "steps": 1_000_000, "value_steps": 1_000_000, "batch_size": 1024}

_POLICY_STREAM, _VALUE_STREAM = 1, 2


class MissingArtifact(FileNotFoundError):
    """A dataset or checkpoint that a command needs does not exist."""


def stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass(frozen=True)
class Featurizer:
    """Affine map of raw states onto [-1, 1] per coordinate."""

    low: np.ndarray
    high: np.ndarray

    @classmethod
    def for_env(cls, env) -> "Featurizer":
        lo, hi = env.state_bounds()
        return cls(np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64))

    def __call__(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return 2.0 * (s - self.low) / (self.high - self.low) - 1.0


@dataclass
class Context:
    env: object
    dataset: TransitionDataset | None
    feat: Featurizer

    @property
    def state_dim(self) -> int:
        return self.env.state_dim

    @property
    def action_dim(self) -> int:
        return self.env.action_dim

    def encode(self, actions) -> np.ndarray:
        return self.env.encode_actions(actions)


def make_context(cfg: RunConfig, need_dataset: bool) -> Context:
    env = make_env(cfg.env, map_file=cfg.path(cfg.map_file))
    dataset = None
    if need_dataset:
        path = cfg.dataset_path
        if path is None or not path.is_file():
            raise MissingArtifact(f"dataset: file not found: {path}")
        dataset = load_dataset(path)
    return Context(env, dataset, Featurizer.for_env(env))


# -- run layout ---------------------------------------------------------------


def beta_tag(inv_temp: float) -> str:
    return f"ib{inv_temp:g}"


def run_dir(out: Path, method: str, seed: int, inv_temp: float | None = None) -> Path:
    base = Path(out) / method
    if inv_temp is not None:
        base = base / beta_tag(inv_temp)
    return base / f"seed{seed}"


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


class CurveLogger:
    """Window means of per-step scalars, flushed every `every` steps."""

    def __init__(self, every: int, columns):
        self.every = every
        self.columns = list(columns)
        self.rows = []
        self._acc = {c: [] for c in self.columns}

    def add(self, step: int, **values):
        for k, v in values.items():
            self._acc[k].append(float(v))
        if step % self.every == 0:
            row = {"step": step}
            row.update({k: float(np.mean(v)) for k, v in self._acc.items()})
            self.rows.append(row)
            self._acc = {c: [] for c in self.columns}

    def write(self, path):
        write_csv(path, ["step", *self.columns], self.rows)


def window_means(losses, fraction: float = 0.1) -> tuple[float, float]:
    """(first-window mean, final-window mean) of a logged curve."""
    losses = np.asarray(losses, dtype=np.float64)
    n = max(1, int(round(fraction * len(losses))))
    return float(losses[:n].mean()), float(losses[-n:].mean())


# -- trainers -----------------------------------------------------------------


def _batch(ctx: Context, rng, size: int):
    return rng.integers(0, len(ctx.dataset), size)


def _goal_sampler(cfg: RunConfig) -> GoalSampler:
    return GoalSampler(cfg.train.goal_sampler, cfg.train.discount)


def train_values(cfg: RunConfig, ctx: Context, seed: int, directory: Path) -> ValueLearner:
    t = cfg.train
    rng = stream(seed, _VALUE_STREAM)
    learner = ValueLearner.create(ctx.state_dim, ctx.action_dim, t.widths, t.activation, rng, lr=t.lr,
                                  expectile=t.expectile, smoothing=t.smoothing, discount=t.discount)
    log = CurveLogger(t.log_every, ["loss", "q_loss", "v_loss"])
    d = ctx.dataset
    for step in range(1, t.value_steps + 1):
        idx = _batch(ctx, rng, t.batch_size)
        q_loss, v_loss = value_update(learner, ctx.feat(d.observations[idx]), ctx.encode(d.actions[idx]),
                                      d.rewards[idx], ctx.feat(d.next_observations[idx]), d.dones[idx])
        log.add(step, loss=q_loss + v_loss, q_loss=q_loss, v_loss=v_loss)
    directory.mkdir(parents=True, exist_ok=True)
    save_values(learner, directory / "values.blob")
    log.write(directory / TRAIN_LOG)
    return learner


def _flow(cfg: RunConfig, ctx: Context, conditioning: str, rng) -> FlowPolicyNet:
    t = cfg.train
    return FlowPolicyNet(ctx.state_dim, ctx.action_dim, conditioning, goal_dim=ctx.state_dim, embed_dim=t.embed_dim,
                         mode=t.architecture, widths=t.widths, activation=t.activation,
                         low=ctx.env.action_low, high=ctx.env.action_high, rng=rng)


def train_flow_optimality(cfg: RunConfig, ctx: Context, learner: ValueLearner, seed: int, directory: Path):
    """Optimality-conditioned flow policy with labels 1[A >= 0] from frozen values."""
    t = cfg.train
    rng = stream(seed, _POLICY_STREAM)
    policy = _flow(cfg, ctx, OPTIMALITY, rng)
    opt = make_optimizer(policy, t.lr)
    log = CurveLogger(t.log_every, ["loss", "frac_optimal"])
    d = ctx.dataset
    for step in range(1, t.steps + 1):
        idx = _batch(ctx, rng, t.batch_size)
        s, a = ctx.feat(d.observations[idx]), ctx.encode(d.actions[idx])
        labels = label_optimality(learner, s, a)
        loss, _ = train_step(policy, s, a, labels, t.dropout, opt, rng)
        log.add(step, loss=loss, frac_optimal=labels.mean())
    return _save_flow(policy, log, directory)


def train_flow_goal(cfg: RunConfig, ctx: Context, dropout: float, seed: int, directory: Path):
    """Goal-conditioned flow policy on hindsight goals; `dropout` replaces goals by the null token."""
    t = cfg.train
    rng = stream(seed, _POLICY_STREAM)
    policy = _flow(cfg, ctx, GOAL, rng)
    opt = make_optimizer(policy, t.lr)
    sampler = _goal_sampler(cfg)
    log = CurveLogger(t.log_every, ["loss"])
    d = ctx.dataset
    for step in range(1, t.steps + 1):
        idx = _batch(ctx, rng, t.batch_size)
        _, goals = relabel(d, idx, sampler, rng)
        loss, _ = train_step(policy, ctx.feat(d.observations[idx]), ctx.encode(d.actions[idx]), ctx.feat(goals),
                             dropout, opt, rng)
        log.add(step, loss=loss)
    return _save_flow(policy, log, directory)


def _save_flow(policy, log, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    save_policy(policy, directory / "policy.blob")
    log.write(directory / TRAIN_LOG)
    return policy, log


def _gaussian(cfg: RunConfig, ctx: Context, in_dim: int, out_dim: int, low, high, rng) -> GaussianPolicy:
    t = cfg.train
    low, high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    mid, half = 0.5 * (low + high), 0.5 * (high - low) * GAUSSIAN_MARGIN
    return GaussianPolicy(in_dim, out_dim, t.widths, t.activation, mid - half, mid + half, rng)


def train_awr(cfg: RunConfig, ctx: Context, learner: ValueLearner, inv_temp: float, seed: int, directory: Path):
    t = cfg.train
    rng = stream(seed, _POLICY_STREAM)
    policy = _gaussian(cfg, ctx, ctx.state_dim, ctx.action_dim, ctx.env.action_low, ctx.env.action_high, rng)
    opt = AdamState.for_params(policy.params(), t.lr)
    awr = AwrConfig(inv_temp, t.awr_clip)
    log = CurveLogger(t.log_every, ["loss", "ess", "max_share"])
    d = ctx.dataset
    for step in range(1, t.steps + 1):
        idx = _batch(ctx, rng, t.batch_size)
        loss, diag = awr_update(policy, learner, ctx.feat(d.observations[idx]), ctx.encode(d.actions[idx]), awr, opt)
        log.add(step, loss=loss, ess=diag.ess, max_share=diag.max_share)
    return _save_gaussian(policy, log, directory)


def train_gaussian_bc(cfg: RunConfig, ctx: Context, goal_conditioned: bool, seed: int, directory: Path):
    t = cfg.train
    rng = stream(seed, _POLICY_STREAM)
    in_dim = ctx.state_dim * (2 if goal_conditioned else 1)
    policy = _gaussian(cfg, ctx, in_dim, ctx.action_dim, ctx.env.action_low, ctx.env.action_high, rng)
    opt = AdamState.for_params(policy.params(), t.lr)
    sampler = _goal_sampler(cfg)
    log = CurveLogger(t.log_every, ["loss"])
    d = ctx.dataset
    for step in range(1, t.steps + 1):
        idx = _batch(ctx, rng, t.batch_size)
        x = ctx.feat(d.observations[idx])
        if goal_conditioned:
            _, goals = relabel(d, idx, sampler, rng)
            x = np.concatenate([x, ctx.feat(goals)], axis=1)
        log.add(step, loss=bc_update(policy, x, ctx.encode(d.actions[idx]), opt))
    return _save_gaussian(policy, log, directory)


def _save_gaussian(policy, log, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    save_gaussian(policy, directory / "policy.blob")
    log.write(directory / TRAIN_LOG)
    return policy, log


def train_hier_flow(cfg: RunConfig, ctx: Context, seed: int, directory: Path):
    t = cfg.train
    rng = stream(seed, _POLICY_STREAM)
    sd = ctx.state_dim
    high = FlowPolicyNet(sd, sd, GOAL, goal_dim=sd, mode=t.architecture, widths=t.widths, activation=t.activation,
                         low=-np.ones(sd), high=np.ones(sd), rng=rng)
    low = _flow(cfg, ctx, GOAL, rng)
    hp = HierarchicalPolicy(high, low, t.subgoal_steps)
    opts = (make_optimizer(high, t.lr), make_optimizer(low, t.lr))
    sampler = _goal_sampler(cfg)
    log = CurveLogger(t.log_every, ["loss", "high_loss", "low_loss"])
    for step in range(1, t.steps + 1):
        hl, ll = train_hierarchical(hp, ctx.dataset, sampler, t.dropout, opts, rng, t.batch_size,
                                    features=ctx.feat, encode=ctx.encode)
        log.add(step, loss=hl + ll, high_loss=hl, low_loss=ll)
    save_hierarchical(hp, directory, sampler)
    log.write(directory / TRAIN_LOG)
    return hp, log


def train_hier_gaussian(cfg: RunConfig, ctx: Context, seed: int, directory: Path):
    t = cfg.train
    rng = stream(seed, _POLICY_STREAM)
    sd = ctx.state_dim
    high = _gaussian(cfg, ctx, 2 * sd, sd, -np.ones(sd), np.ones(sd), rng)
    low = _gaussian(cfg, ctx, 2 * sd, ctx.action_dim, ctx.env.action_low, ctx.env.action_high, rng)
    high_opt = AdamState.for_params(high.params(), t.lr)
    low_opt = AdamState.for_params(low.params(), t.lr)
    sampler = _goal_sampler(cfg)
    log = CurveLogger(t.log_every, ["loss", "high_loss", "low_loss"])
    d = ctx.dataset
    for step in range(1, t.steps + 1):
        idx = _batch(ctx, rng, t.batch_size)
        goals, sub = hierarchical_targets(d, idx, sampler, t.subgoal_steps, rng)
        s, g, sg = ctx.feat(d.observations[idx]), ctx.feat(goals), ctx.feat(sub)
        hl = bc_update(high, np.concatenate([s, g], axis=1), sg, high_opt)
        ll = bc_update(low, np.concatenate([s, sg], axis=1), ctx.encode(d.actions[idx]), low_opt)
        log.add(step, loss=hl + ll, high_loss=hl, low_loss=ll)
    directory.mkdir(parents=True, exist_ok=True)
    save_gaussian(high, directory / "high.blob")
    save_gaussian(low, directory / "low.blob")
    manifest = {"kind": "hierarchical_gaussian", "subgoal_steps": t.subgoal_steps, "high": "high.blob", "low": "low.blob"}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    log.write(directory / TRAIN_LOG)
    return (high, low), log


def needs_values(cfg: RunConfig) -> bool:
    methods = cfg.train.methods
    return "awr" in methods or ("cfgrl" in methods and cfg.train.conditioning == OPTIMALITY)


def train_all(cfg: RunConfig, log_fn=None) -> dict:
    """Train every configured method for every seed; returns {run directory: final loss}."""
    log_fn = log_fn or (lambda msg: None)
    ctx = make_context(cfg, need_dataset=True)
    out = cfg.out_dir
    t = cfg.train
    finals = {}

    def record(directory, log):
        finals[str(directory.relative_to(out))] = log.rows[-1]["loss"] if log.rows else float("nan")

    for seed in cfg.seeds:
        learner = None
        if needs_values(cfg):
            log_fn(f"values seed={seed}")
            learner = train_values(cfg, ctx, seed, run_dir(out, "values", seed))
        for method in t.methods:
            log_fn(f"{method} seed={seed}")
            directory = run_dir(out, method, seed)
            if method == "cfgrl":
                if t.conditioning == OPTIMALITY:
                    _, log = train_flow_optimality(cfg, ctx, learner, seed, directory)
                else:
                    _, log = train_flow_goal(cfg, ctx, t.dropout, seed, directory)
            elif method == "flow-gcbc":
                _, log = train_flow_goal(cfg, ctx, t.gcbc_dropout, seed, directory)
            elif method == "flow-bc":
                _, log = train_flow_goal(cfg, ctx, 1.0, seed, directory)
            elif method == "awr":
                for inv_temp in t.awr_inv_temps:
                    d = run_dir(out, method, seed, inv_temp)
                    _, log = train_awr(cfg, ctx, learner, inv_temp, seed, d)
                    record(d, log)
                continue
            elif method == "bc":
                _, log = train_gaussian_bc(cfg, ctx, False, seed, directory)
            elif method == "gcbc":
                _, log = train_gaussian_bc(cfg, ctx, True, seed, directory)
            elif method == "hcfgrl":
                _, log = train_hier_flow(cfg, ctx, seed, directory)
            elif method == "hgcbc":
                _, log = train_hier_gaussian(cfg, ctx, seed, directory)
            else:  # pragma: no cover - rejected by config validation
                raise ValueError(method)
            record(directory, log)
    manifest = {
        "config": as_dict(cfg),
        "overrides": {k: {"value": getattr(t, k), "reference_default": v} for k, v in REFERENCE_DEFAULTS.items()},
        "final_loss": finals,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return finals


# -- evaluation ---------------------------------------------------------------


class FeaturizedSampler:
    """Adapter applying the state featurizer to observations and goals before `inner`."""

    def __init__(self, inner, feat: Featurizer):
        self.inner, self.feat = inner, feat

    def reset(self, n):
        if hasattr(self.inner, "reset"):
            self.inner.reset(n)

    def __call__(self, obs, goals, rng):
        return self.inner(self.feat(obs), self.feat(goals), rng)


def flow_sampler(policy: FlowPolicyNet, w: float, steps: int):
    cfg = GuidanceConfig(w=w, steps=steps)
    if policy.conditioning == GOAL:
        return lambda s, g, rng: sample(policy, s, cfg, rng, cond=g)
    return lambda s, g, rng: sample(policy, s, cfg, rng)


def gaussian_sampler(policy: GaussianPolicy, goal_conditioned: bool):
    def _act(s, g, rng):
        x = np.concatenate([s, g], axis=1) if goal_conditioned else s
        return policy.mode(x)

    return _act


class HierarchicalGaussianActor:
    def __init__(self, high: GaussianPolicy, low: GaussianPolicy, subgoal_steps: int):
        self.high, self.low, self.k = high, low, subgoal_steps
        self.reset(0)

    def reset(self, n):
        self.calls, self.subgoal = 0, None

    def __call__(self, s, g, rng):
        if self.calls % self.k == 0:
            self.subgoal = np.clip(self.high.mode(np.concatenate([s, g], axis=1)), -1.0, 1.0)
        self.calls += 1
        return self.low.mode(np.concatenate([s, self.subgoal], axis=1))


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingArtifact(f"checkpoint not found: {path}")
    return path


def sweep_entries(cfg: RunConfig, method: str, seed: int) -> list[tuple[float, object]]:
    """(w_or_beta, sampler) pairs for one method and seed; each checkpoint is loaded once."""
    out = cfg.out_dir
    s = cfg.sweep
    d = run_dir(out, method, seed)
    if method == "cfgrl":
        policy = load_policy(_require(d / "policy.blob"))
        return [(w, flow_sampler(policy, w, s.flow_steps)) for w in s.weights]
    if method in ("flow-gcbc", "flow-bc"):
        policy = load_policy(_require(d / "policy.blob"))
        w = DEFINITIONAL_WEIGHT[method]
        return [(w, flow_sampler(policy, w, s.flow_steps))]
    if method == "awr":
        entries = []
        for inv_temp in cfg.train.awr_inv_temps:
            policy = load_gaussian(_require(run_dir(out, method, seed, inv_temp) / "policy.blob"))
            entries.append((inv_temp, gaussian_sampler(policy, False)))
        return entries
    if method in ("bc", "gcbc"):
        policy = load_gaussian(_require(d / "policy.blob"))
        return [(DEFINITIONAL_WEIGHT[method], gaussian_sampler(policy, method == "gcbc"))]
    if method == "hcfgrl":
        _require(d / "manifest.json")
        hp = load_hierarchical(d)
        entries = []
        for w in s.weights:
            low_w = w if s.low_weight is None else s.low_weight
            entries.append((w, HierarchicalActor(hp, GuidanceConfig(w, s.flow_steps, -np.ones(hp.high.action_dim),
                                                                    np.ones(hp.high.action_dim)),
                                                 GuidanceConfig(low_w, s.flow_steps))))
        return entries
    if method == "hgcbc":
        m = json.loads(_require(d / "manifest.json").read_text())
        high, low = load_gaussian(_require(d / m["high"])), load_gaussian(_require(d / m["low"]))
        return [(DEFINITIONAL_WEIGHT[method], HierarchicalGaussianActor(high, low, m["subgoal_steps"]))]
    raise ValueError(method)  # pragma: no cover


def split_episodes(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (i < extra) for i in range(parts)]


def run_sweep(cfg: RunConfig) -> list[dict]:
    ctx = make_context(cfg, need_dataset=False)
    counts = split_episodes(cfg.sweep.episodes, len(cfg.seeds))
    jobs = []
    for m_order, method in enumerate(cfg.train.methods):
        for seed, n in zip(cfg.seeds, counts):
            for w, sampler in sweep_entries(cfg, method, seed):
                jobs.append((m_order, method, w, seed, n, FeaturizedSampler(sampler, ctx.feat)))

    def _run(job):
        m_order, method, w, seed, n, sampler = job
        env = make_env(cfg.env, map_file=cfg.path(cfg.map_file))
        # same evaluation stream for every w: paired comparisons across weights
        res = evaluate(env, sampler, n, stream(cfg.eval_seed, seed))
        return (m_order, w, seed), {
            "method": method, "w_or_beta": float(w), "seed": seed, "success_rate": res.success_rate,
            "ci_low": res.ci_low, "ci_high": res.ci_high, "episodes": res.episodes,
        }

    if cfg.sweep.workers > 1:
        with ThreadPoolExecutor(cfg.sweep.workers) as pool:
            results = list(pool.map(_run, jobs))
    else:
        results = [_run(j) for j in jobs]
    return [row for _, row in sorted(results, key=lambda kv: kv[0])]
