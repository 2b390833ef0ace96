import csv
import hashlib
import json
from pathlib import Path

import pytest

from cfgrl import cli
from cfgrl.audit import AuditRow
from cfgrl.pipelines import SWEEP_COLUMNS, TRAIN_LOG, window_means

DATASET = "data/pointmaze-small_noisy_expert_eps0.5_seed0.ndjson"
ALL_METHODS = ["cfgrl", "awr", "gcbc", "flow-gcbc", "bc", "flow-bc", "hgcbc", "hcfgrl"]


def write_config(directory: Path, body: str) -> Path:
    path = directory / "run.toml"
    path.write_text(body)
    return path


def tiny_config(methods, steps=60, extra_train="", sweep="weights = [0.0, 1.0, 3.0]\nepisodes = 6"):
    return f"""
env = "pointmaze-small"
seeds = [0, 1]
out = "run"
dataset = "{DATASET}"

[data]
episodes = 10

[train]
methods = {json.dumps(methods)}
steps = {steps}
value_steps = 40
batch_size = 32
widths = [16]
log_every = 10
awr_inv_temps = [0.0, 3.0]
{extra_train}

[sweep]
flow_steps = 4
svg = false
{sweep}
"""


def run(argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root, tiny_config(ALL_METHODS))
    assert run(["gen-data", "--config", cfg, "--out", root / "data"]) == 0
    assert run(["train", "--config", cfg]) == 0
    return root, cfg


class TestUsage:
    def test_no_command(self):
        with pytest.raises(SystemExit) as err:
            cli.main([])
        assert err.value.code == 1

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["verify", "--bogus"])
        assert err.value.code == 1

    def test_missing_config_file(self, tmp_path, capsys):
        assert run(["verify", "--config", tmp_path / "absent.toml"]) == 1
        assert "--config" in capsys.readouterr().err

    def test_missing_map_file_names_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, 'env = "gridworld-small"\nmap_file = "nope.txt"\n')
        assert run(["gen-data", "--config", cfg]) == 1
        assert "map_file" in capsys.readouterr().err

    def test_zero_episodes(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "[data]\nepisodes = 0\n")
        assert run(["gen-data", "--config", cfg]) == 1
        assert "data.episodes" in capsys.readouterr().err

    def test_negative_seed(self, tmp_path):
        assert run(["verify", "--seed", "-3", "--out", tmp_path]) == 1


class TestVerify:
    def test_default_passes(self, tmp_path):
        assert run(["verify", "--out", tmp_path]) == 0
        rows = read_rows(tmp_path / "verify.csv")
        assert list(rows[0]) == list(cli.VERIFY_COLUMNS)
        assert all(r["holds"] == "true" for r in rows)
        ids = {r["check_id"] for r in rows}
        assert {"improvement/indicator", "attenuation/exp", "chebyshev", "gcbc-identity/chain"} <= ids

    def test_long_horizon(self, tmp_path):
        cfg = write_config(tmp_path, "[verify]\ninstances = 10\ndiscount = 0.999\nchebyshev_instances = 10\n")
        assert run(["verify", "--config", cfg, "--out", tmp_path]) == 0

    def test_failure_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.setattr(cli, "run_audit", lambda cfg, base_seed: [AuditRow(0, "improvement/exp", -1.0, -1e-9)])
        assert run(["verify", "--out", tmp_path]) == 2
        assert read_rows(tmp_path / "verify.csv")[0]["holds"] == "false"

    def test_repeat_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, "[verify]\ninstances = 5\nchebyshev_instances = 20\n")
        run(["verify", "--config", cfg, "--out", tmp_path / "a"])
        run(["verify", "--config", cfg, "--out", tmp_path / "b"])
        assert (tmp_path / "a/verify.csv").read_bytes() == (tmp_path / "b/verify.csv").read_bytes()


class TestGenData:
    def test_one_file_per_epsilon_and_reproducible(self, tmp_path):
        cfg = write_config(tmp_path, "[data]\nepisodes = 4\nepsilons = [0.0, 0.25, 1.0]\n")
        assert run(["gen-data", "--config", cfg, "--out", tmp_path / "a", "--seed", 7]) == 0
        assert run(["gen-data", "--config", cfg, "--out", tmp_path / "b", "--seed", 7]) == 0
        names = {p.name for p in (tmp_path / "a").glob("*.ndjson")}
        assert names == {f"pointmaze-small_noisy_expert_eps{e}_seed7.ndjson" for e in ("0", "0.25", "1")}
        for name in sorted(names) + ["manifest.json"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        manifest = json.loads((tmp_path / "a/manifest.json").read_text())
        for entry in manifest["files"]:
            digest = hashlib.sha256((tmp_path / "a" / entry["file"]).read_bytes()).hexdigest()
            assert digest == entry["sha256"]

    def test_seeds_differ(self, tmp_path):
        cfg = write_config(tmp_path, "[data]\nepisodes = 4\n")
        run(["gen-data", "--config", cfg, "--out", tmp_path / "a", "--seed", 1])
        run(["gen-data", "--config", cfg, "--out", tmp_path / "b", "--seed", 2])
        a = next((tmp_path / "a").glob("*.ndjson")).read_text().splitlines()[1:]
        b = next((tmp_path / "b").glob("*.ndjson")).read_text().splitlines()[1:]
        assert a != b


class TestTrain:
    def test_layout(self, trained):
        root, _ = trained
        out = root / "run"
        for seed in (0, 1):
            for method in ("cfgrl", "flow-gcbc", "flow-bc", "bc", "gcbc"):
                assert (out / method / f"seed{seed}" / "policy.blob").is_file()
                assert (out / method / f"seed{seed}" / TRAIN_LOG).is_file()
            for tag in ("ib0", "ib3"):
                assert (out / "awr" / tag / f"seed{seed}" / "policy.blob").is_file()
            for method in ("hcfgrl", "hgcbc"):
                assert (out / method / f"seed{seed}" / "manifest.json").is_file()
        manifest = json.loads((out / "train_manifest.json").read_text())
        assert manifest["overrides"]["steps"] == {"value": 60, "reference_default": 1_000_000}

    def test_awr_logs_diagnostics(self, trained):
        root, _ = trained
        row = read_rows(root / "run/awr/ib3/seed0" / TRAIN_LOG)[0]
        assert {"loss", "ess", "max_share"} <= set(row)

    def test_flow_bc_is_gcbc_with_full_dropout(self, tmp_path):
        cfg = write_config(tmp_path, tiny_config(["flow-bc", "flow-gcbc"], extra_train="gcbc_dropout = 1.0"))
        run(["gen-data", "--config", cfg, "--out", tmp_path / "data"])
        assert run(["train", "--config", cfg]) == 0
        finals = json.loads((tmp_path / "run/train_manifest.json").read_text())["final_loss"]
        for seed in (0, 1):
            assert finals[f"flow-bc/seed{seed}"] == pytest.approx(finals[f"flow-gcbc/seed{seed}"], abs=1e-10)

    def test_loss_decreases(self, tmp_path):
        body = tiny_config(["cfgrl"], steps=600).replace("seeds = [0, 1]", "seeds = [0]")
        cfg = write_config(tmp_path, body)
        run(["gen-data", "--config", cfg, "--out", tmp_path / "data"])
        assert run(["train", "--config", cfg]) == 0
        losses = [float(r["loss"]) for r in read_rows(tmp_path / "run/cfgrl/seed0" / TRAIN_LOG)]
        first, last = window_means(losses)
        assert last < first

    def test_repeat_is_byte_identical(self, trained, tmp_path):
        root, cfg = trained
        assert run(["train", "--config", cfg, "--out", tmp_path / "again"]) == 0
        for path in (root / "run").rglob("*"):
            if path.is_file() and path.suffix in (".blob", ".csv", ".json") and path.name != "train_manifest.json":
                twin = tmp_path / "again" / path.relative_to(root / "run")
                assert path.read_bytes() == twin.read_bytes(), path

    def test_missing_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tiny_config(["cfgrl"]))
        assert run(["train", "--config", cfg]) == 1
        assert "dataset" in capsys.readouterr().err


class TestSweep:
    def test_rows_and_episode_accounting(self, trained):
        root, cfg = trained
        assert run(["sweep", "--config", cfg]) == 0
        rows = read_rows(root / "run/sweep.csv")
        assert tuple(rows[0]) == SWEEP_COLUMNS
        per_method = {}
        for r in rows:
            per_method.setdefault(r["method"], set()).add(float(r["w_or_beta"]))
        assert per_method["cfgrl"] == per_method["hcfgrl"] == {0.0, 1.0, 3.0}
        assert per_method["awr"] == {0.0, 3.0}
        assert per_method["flow-bc"] == per_method["bc"] == {0.0}
        assert per_method["flow-gcbc"] == per_method["gcbc"] == per_method["hgcbc"] == {1.0}
        cfgrl = [r for r in rows if r["method"] == "cfgrl" and float(r["w_or_beta"]) == 1.0]
        assert sum(int(r["episodes"]) for r in cfgrl) == 6
        for r in rows:
            assert float(r["ci_low"]) <= float(r["success_rate"]) <= float(r["ci_high"])

    def test_single_weight_one_row_per_seed(self, trained, tmp_path):
        root, _ = trained
        body = tiny_config(["cfgrl"], sweep="weights = [2.0]\nepisodes = 4").replace('out = "run"',
                                                                                   f'out = "{root / "run"}"')
        cfg = write_config(tmp_path, body.replace(DATASET, str(root / DATASET)))
        assert run(["sweep", "--config", cfg, "--out", root / "run"]) == 0
        rows = read_rows(root / "run/sweep.csv")
        assert [(r["w_or_beta"], r["seed"]) for r in rows] == [("2.0", "0"), ("2.0", "1")]

    def test_missing_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tiny_config(["cfgrl"]))
        assert run(["sweep", "--config", cfg]) == 1
        assert "checkpoint" in capsys.readouterr().err


def write_sweep(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow(r)


class TestReport:
    def test_single_seed_single_block(self, tmp_path):
        write_sweep(tmp_path / "a.csv", [("cfgrl", 0.0, 0, 0.5, 0.4, 0.6, 10), ("cfgrl", 3.0, 0, 0.8, 0.7, 0.9, 10)])
        assert run(["report", tmp_path / "a.csv"]) == 0
        text = (tmp_path / "report.md").read_text()
        assert text.count("### ") == 1
        assert "| cfgrl | 0 | 0.500 ± 0.000 | 1 |" in text
        assert "| cfgrl | 3 | **0.800 ± 0.000** | 1 |" in text
        assert (tmp_path / "report.svg").is_file()

    def test_bold_within_five_percent(self, tmp_path):
        write_sweep(tmp_path / "b.csv", [("cfgrl", 1.0, 0, 0.77, 0, 1, 10), ("awr", 1.0, 0, 0.8, 0, 1, 10),
                                         ("bc", 0.0, 0, 0.75, 0, 1, 10)])
        run(["report", tmp_path / "b.csv", "--out", tmp_path / "r"])
        text = (tmp_path / "r/report.md").read_text()
        assert "**0.770" in text and "**0.800" in text and "**0.750" not in text

    def test_population_std(self, tmp_path):
        write_sweep(tmp_path / "c.csv", [("cfgrl", 1.0, 0, 0.2, 0, 1, 10), ("cfgrl", 1.0, 1, 0.6, 0, 1, 10)])
        run(["report", tmp_path / "c.csv"])
        assert "0.400 ± 0.200" in (tmp_path / "report.md").read_text()

    def test_schema_mismatch(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("method,score\ncfgrl,1\n")
        assert run(["report", tmp_path / "bad.csv"]) == 1
        assert "expected columns" in capsys.readouterr().err

    def test_missing_csv(self, tmp_path):
        assert run(["report", tmp_path / "absent.csv"]) == 1
