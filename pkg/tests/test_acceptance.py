"""Acceptance criteria 1-11; each test prints one PASS/FAIL line."""
import builtins
import io
import json
import time
from pathlib import Path

import numpy as np
import pytest
from gradcheck import max_relative_error

from cfgrl import cli
from cfgrl.audit import chebyshev_rows, deterministic_chain
from cfgrl.config import VerifyConfig
from cfgrl.flow import GOAL, OPTIMALITY, SEPARATE, SHARED, FlowPolicyNet, cfm_loss, tilt_fidelity_probe, \
    train_two_mode_policy
from cfgrl.gaussian import GaussianPolicy
from cfgrl.gcbc import tabular_gcbc_identity, tabular_goal_attenuation
from cfgrl.iql import ValueLearner, exp_weight_ess, expectile_loss, value_update
from cfgrl.mdp import TabularPolicy, random_mdp, random_policy
from cfgrl.neural import DenseNet, loss_and_grad
from cfgrl.theorems import ExpClipped, IndicatorNonNegAdv, verify_attenuation, verify_improvement

SLACK = 1e-9
VERIFY = VerifyConfig()


def instances(n=VERIFY.instances):
    for seed in range(n):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, VERIFY.max_states, VERIFY.max_actions, VERIFY.discount)
        yield mdp, random_policy(rng, mdp.num_states, mdp.num_actions)


OPTIMALITY_FNS = {"indicator": IndicatorNonNegAdv(), "exp": ExpClipped(1.0, VERIFY.exp_clip)}


def test_01_policy_improvement(criterion):
    start = time.perf_counter()
    worst = np.inf
    for mdp, ref in instances():
        for f in OPTIMALITY_FNS.values():
            rep = verify_improvement(mdp, ref, f)
            worst = min(worst, rep.J_new - rep.J_ref)
    elapsed = time.perf_counter() - start
    criterion(1, worst >= -SLACK and elapsed < 10.0,
              f"min J(product) - J(ref) = {worst:.3e} over 100 MDPs x 2 functions in {elapsed:.2f}s")


def test_02_attenuation(criterion):
    start = time.perf_counter()
    worst = np.inf
    for mdp, ref in instances():
        for f in OPTIMALITY_FNS.values():
            worst = min(worst, verify_attenuation(mdp, ref, f, VERIFY.attenuation_weights).min_increment)
    elapsed = time.perf_counter() - start
    criterion(2, worst >= -SLACK and elapsed < 30.0,
              f"min J increment over w grid = {worst:.3e} in {elapsed:.2f}s")


def test_03_chebyshev(criterion):
    rows = [r for seed in range(1000) for r in chebyshev_rows(seed)]
    worst = min(r.statistic for r in rows)
    criterion(3, len(rows) == 1000 and all(r.holds for r in rows), f"min lhs - rhs = {worst:.3e} on 1000 triples")


def test_04_gcbc_identity(criterion):
    gaps = [tabular_gcbc_identity(mdp, ref).max_gap for mdp, ref in instances(50)]
    chain = deterministic_chain()
    chain_ref = TabularPolicy(np.random.default_rng(0).dirichlet(np.ones(2), size=chain.num_states))
    chain_rep = tabular_gcbc_identity(chain, chain_ref)
    worst = max(max(gaps), chain_rep.max_gap)
    criterion(4, worst < 1e-9 and chain_rep.compared > 0,
              f"max gap {worst:.3e} on 50 MDPs plus chain ({chain_rep.max_gap:.3e})")


def test_05_goal_attenuation(criterion):
    worst = np.inf
    for mdp, ref in instances():
        for goal in range(mdp.num_states):
            worst = min(worst, tabular_goal_attenuation(mdp, ref, goal, VERIFY.goal_weights).min_increment)
    criterion(5, worst >= -SLACK, f"min J_goal increment = {worst:.3e} over all instances and goal states")


def _dense_errors(rng):
    out = {}
    for act in ("gelu", "mish"):
        net = DenseNet([3, 8, 8, 2], act, rng, dtype=np.float64)
        x, y, w = rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), rng.uniform(0.5, 2, 6)
        _, grads = loss_and_grad(net, x, y, w)
        out[f"dense/{act}"] = max_relative_error(lambda: loss_and_grad(net, x, y, w)[0], net.params(), grads)
    return out


def _flow_errors(rng):
    out = {}
    for cond in (OPTIMALITY, GOAL):
        for mode in (SHARED, SEPARATE):
            for act in ("gelu", "mish"):
                pol = FlowPolicyNet(3, 2, cond, goal_dim=3, embed_dim=4, mode=mode, widths=(8, 8), activation=act,
                                    rng=rng, dtype=np.float64)
                B = 8
                s, a = rng.normal(size=(B, 3)), rng.uniform(-1, 1, (B, 2))
                c = rng.integers(0, 2, B) if cond == OPTIMALITY else rng.normal(size=(B, 3))
                null, t, a0 = np.arange(B) % 3 == 0, rng.random(B), rng.normal(size=(B, 2))
                _, grads = cfm_loss(pol, s, a, c, null, None, t=t, a0=a0)
                loss = lambda: cfm_loss(pol, s, a, c, null, None, t=t, a0=a0)[0]  # noqa: E731
                out[f"flow/{cond}/{mode}/{act}"] = max_relative_error(loss, pol.params(), grads)
    return out


def _gaussian_errors(rng):
    out = {}
    for act in ("gelu", "mish"):
        pol = GaussianPolicy(3, 2, (8,), act, low=[-1, -1], high=[1, 1], rng=rng).astype(np.float64)
        x, a, w = rng.normal(size=(6, 3)), rng.uniform(-0.9, 0.9, (6, 2)), rng.uniform(0, 3, 6)
        _, grads, _, _ = pol.nll_and_grad(x, a, w)
        out[f"gaussian/{act}"] = max_relative_error(lambda: pol.nll_and_grad(x, a, w)[0], pol.params(), grads)
    return out


class _Capture:
    def __init__(self, store, key):
        self.store, self.key = store, key

    def update(self, params, grads):
        self.store[self.key] = [g.copy() for g in grads]


def _value_errors(rng):
    out = {}
    for act in ("gelu", "mish"):
        lr = ValueLearner.create(3, 2, widths=(6, 6), activation=act, rng=rng, dtype=np.float64)
        s, a, r, s2 = rng.normal(size=(8, 3)), rng.normal(size=(8, 2)), rng.normal(size=8), rng.normal(size=(8, 3))
        grads = {}
        lr.v_opt, lr.q_opt = _Capture(grads, "v"), _Capture(grads, "q")
        v_before = [p.copy() for p in lr.v_net.params()]
        value_update(lr, s, a, r, s2)
        lr.v_net.set_params(v_before)
        sa = np.concatenate([s, a], axis=1)

        def v_loss():
            u = lr.q_target.forward(sa)[:, 0] - lr.v(s)
            return float(np.mean(expectile_loss(u, lr.expectile)))

        def q_loss():
            diff = lr.q(s, a) - (r + lr.discount * lr.v(s2))
            return float(np.mean(diff * diff))

        out[f"value/{act}"] = max_relative_error(v_loss, lr.v_net.params(), grads["v"])
        out[f"q/{act}"] = max_relative_error(q_loss, lr.q_net.params(), grads["q"])
    return out


def test_06_gradients(criterion):
    rng = np.random.default_rng(0)
    errors = {**_dense_errors(rng), **_flow_errors(rng), **_gaussian_errors(rng), **_value_errors(rng)}
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    criterion(6, worst < 1e-4, f"worst relative error {worst:.2e} ({name}) across {len(errors)} architectures")


def test_07_guided_sampler_fidelity(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    policy = train_two_mode_policy(rng)
    frac = tilt_fidelity_probe(policy, [0.0, 1.0, 2.0, 4.0], rng, n_samples=10_000)
    vals = list(frac.values())
    drops = [b - a for a, b in zip(vals, vals[1:]) if b < a]
    ok = (len(drops) == 0 or (len(drops) == 1 and drops[0] >= -0.02))
    elapsed = time.perf_counter() - start
    criterion(7, ok and elapsed < 300.0, f"o=1 fraction by w {frac} in {elapsed:.1f}s")


def _run(argv) -> int:
    return cli.main([str(a) for a in argv])


def _pipeline_config(directory: Path, body: str) -> Path:
    path = directory / "run.toml"
    path.write_text(body)
    return path


TREND_CONFIG = """
env = "pointmaze-small"
seeds = [0, 1, 2, 3, 4]
out = "run"
dataset = "data/pointmaze-small_noisy_expert_eps0.5_seed0.ndjson"

[data]
epsilons = [0.5]
episodes = 300

[train]
methods = ["cfgrl"]

[sweep]
weights = [0.0, 1.0, 1.5, 2.0, 3.0]
episodes = 1000
svg = false
"""


@pytest.mark.slow
def test_08_pointmaze_trend(criterion, tmp_path):
    start = time.perf_counter()
    cfg = _pipeline_config(tmp_path, TREND_CONFIG)
    codes = [_run(["gen-data", "--config", cfg, "--out", tmp_path / "data"]),
             _run(["train", "--config", cfg]), _run(["sweep", "--config", cfg])]
    from cfgrl.report import aggregate, read_sweep_csv

    means = {a["w_or_beta"]: a["mean"] for a in aggregate(read_sweep_csv(tmp_path / "run/sweep.csv"))}
    elapsed = time.perf_counter() - start
    ok = codes == [0, 0, 0] and means[3.0] >= means[1.0] >= means[0.0] and elapsed < 1800
    shown = ", ".join(f"w={w:g}: {m:.3f}" for w, m in means.items())
    criterion(8, ok, f"mean success over 5 seeds {shown} in {elapsed / 60:.1f} min")


def test_09_ess_monotone(criterion):
    rng = np.random.default_rng(0)
    inv_temps = [0.0, 1.0, 3.0, 10.0, 30.0]
    batches = 0
    violations = 0
    for _ in range(100):
        scale = rng.uniform(0.01, 5.0)
        for adv in (rng.normal(scale=scale, size=256), scale * rng.standard_t(2, size=256),
                    -scale * rng.exponential(size=256)):
            ess = [exp_weight_ess(adv, b) for b in inv_temps]
            violations += sum(y > x * (1 + 1e-12) for x, y in zip(ess, ess[1:]))
            batches += 1
    criterion(9, violations == 0, f"{violations} increases of ESS in 1/beta over {batches} advantage batches")


SMALL_CONFIG = """
env = "pointmaze-small"
seeds = [0]
out = "run"
dataset = "data/pointmaze-small_noisy_expert_eps0.5_seed0.ndjson"

[data]
episodes = 10

[train]
methods = ["cfgrl", "awr"]
steps = 50
value_steps = 50
batch_size = 32
widths = [16]
log_every = 10

[sweep]
weights = [0.0, 1.0, 1.5, 2.0, 3.0]
episodes = 4
flow_steps = 4
svg = false
"""


@pytest.fixture(scope="module")
def small_runs(tmp_path_factory):
    roots = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(f"run_{name}")
        cfg = _pipeline_config(root, SMALL_CONFIG)
        (root / "verify.toml").write_text("[verify]\ninstances = 10\nchebyshev_instances = 50\n")
        assert _run(["gen-data", "--config", cfg, "--out", root / "data"]) == 0
        assert _run(["train", "--config", cfg]) == 0
        assert _run(["verify", "--config", root / "verify.toml", "--out", root / "verify"]) == 0
        roots.append((root, cfg))
    return roots


class _OpenCounter:
    def __init__(self):
        self.paths = []

    def wrap(self, real):
        def _open(file, *args, **kwargs):
            if isinstance(file, (str, Path)) and str(file).endswith(".blob"):
                self.paths.append(Path(file).resolve())
            return real(file, *args, **kwargs)

        return _open


def test_10_single_checkpoint_for_guidance_sweep(criterion, small_runs, monkeypatch):
    root, cfg = small_runs[0]
    counter = _OpenCounter()
    monkeypatch.setattr(builtins, "open", counter.wrap(builtins.open))
    monkeypatch.setattr(io, "open", counter.wrap(io.open))
    assert _run(["sweep", "--config", cfg]) == 0
    monkeypatch.undo()
    out = root / "run"
    cfgrl_opens = [p for p in counter.paths if out / "cfgrl" in p.parents]
    awr_opens = {p for p in counter.paths if out / "awr" in p.parents}
    inv_temps = json.loads((out / "train_manifest.json").read_text())["config"]["train"]["awr_inv_temps"]
    awr_runs = {p.parent for p in (out / "awr").rglob("train_log.csv")}
    rows = (out / "sweep.csv").read_text().splitlines()[1:]
    cfgrl_rows = [r for r in rows if r.startswith("cfgrl,")]
    ok = len(cfgrl_opens) == 1 and len(cfgrl_rows) == 5 and len(awr_opens) == len(inv_temps) == len(awr_runs)
    criterion(10, ok, f"cfgrl sweep over {len(cfgrl_rows)} weights opened {len(cfgrl_opens)} checkpoint; "
                      f"AWR over {len(inv_temps)} betas opened {len(awr_opens)} from {len(awr_runs)} training runs")


def test_11_determinism(criterion, small_runs):
    for root, cfg in small_runs:
        assert _run(["sweep", "--config", cfg]) == 0
        assert _run(["report", root / "run/sweep.csv"]) == 0
    (a, _), (b, _) = small_runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".csv", ".ndjson", ".md"))
    diffs = [str(p) for p in files if (a / p).read_bytes() != (b / p).read_bytes()]
    csvs = sum(p.suffix == ".csv" for p in files)
    criterion(11, not diffs and csvs >= 5, f"{len(files)} outputs ({csvs} CSV) compared across repeats; "
                                           f"differing: {diffs or 'none'}")
