"""cfgrl verify | gen-data | train | sweep | report

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from cfgrl.audit import run_audit
from cfgrl.config import ConfigError, RunConfig, as_dict, from_dict, load_config
from cfgrl.data import DatasetFormatError, save_dataset
from cfgrl.envs import Behavior, generate_dataset, make_env
from cfgrl.pipelines import SWEEP_COLUMNS, MissingArtifact, run_sweep, train_all, write_csv

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2
VERIFY_COLUMNS = ("seed", "check_id", "j_ref", "j_new", "statistic", "threshold", "holds")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cfgrl", description="Guided flow policies: audits, data, training, sweeps, reports.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (
        ("verify", "run the randomized tabular audit"),
        ("gen-data", "generate offline datasets, one file per epsilon"),
        ("train", "train every configured method and seed"),
        ("sweep", "evaluate checkpoints over guidance weights"),
        ("report", "summarize sweep CSVs as markdown"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="TOML run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the configured seed list with a single seed")
        p.add_argument("--out", type=Path, help="output directory")
        if name == "report":
            p.add_argument("csv", nargs="+", type=Path, help="sweep CSV files")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config is not None else from_dict({})
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed", "must be non-negative")
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out = str(args.out.resolve())
    return cfg


def _opt(value: float):
    return "" if np.isnan(value) else value


def cmd_verify(cfg: RunConfig) -> int:
    rows = run_audit(cfg.verify, base_seed=cfg.seeds[0])
    path = cfg.out_dir / "verify.csv"
    write_csv(path, VERIFY_COLUMNS, [
        {"seed": r.seed, "check_id": r.check_id, "j_ref": _opt(r.j_ref), "j_new": _opt(r.j_new),
         "statistic": r.statistic, "threshold": r.threshold,
         "holds": "true" if r.holds else "false"} for r in rows
    ])
    failed = [r for r in rows if not r.holds]
    by_check = {}
    for r in rows:
        total, bad = by_check.get(r.check_id, (0, 0))
        by_check[r.check_id] = (total + 1, bad + (not r.holds))
    for check, (total, bad) in by_check.items():
        print(f"{check:32s} {total - bad}/{total} hold")
    print(f"wrote {path}")
    return EXIT_VERIFY if failed else EXIT_OK


def dataset_filename(env: str, behavior: str, epsilon: float, seed: int) -> str:
    return f"{env}_{behavior}_eps{epsilon:g}_seed{seed}.ndjson"


def cmd_gen_data(cfg: RunConfig) -> int:
    env = make_env(cfg.env, map_file=cfg.path(cfg.map_file))
    seed = cfg.seeds[0]
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for eps in cfg.data.epsilons:
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(round(eps * 1_000_000))]))
        ds = generate_dataset(env, Behavior(cfg.data.behavior, eps), cfg.data.episodes, rng, seed=seed)
        path = out / dataset_filename(cfg.env, cfg.data.behavior, eps, seed)
        save_dataset(ds, path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        files.append({"file": path.name, "epsilon": eps, "episodes": cfg.data.episodes,
                      "transitions": len(ds), "sha256": digest})
        print(f"wrote {path} ({len(ds)} transitions)")
    manifest = {"env": cfg.env, "seed": seed, "behavior": cfg.data.behavior, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    finals = train_all(cfg, log_fn=lambda msg: print(f"training {msg}", flush=True))
    for run, loss in finals.items():
        print(f"{run:32s} final loss {loss:.5f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    from cfgrl.plotting import plot_sweep

    rows = run_sweep(cfg)
    path = cfg.out_dir / "sweep.csv"
    write_csv(path, SWEEP_COLUMNS, rows)
    if cfg.sweep.svg:
        plot_sweep(rows, path.with_suffix(".svg"), title=cfg.env)
    for r in rows:
        print(f"{r['method']:10s} w/1-beta={r['w_or_beta']:<6g} seed={r['seed']:<3d} success={r['success_rate']:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_report(paths, out_dir: Path | None) -> int:
    from cfgrl.plotting import plot_blocks
    from cfgrl.report import build_report

    text, blocks = build_report(paths)
    out_dir = out_dir if out_dir is not None else Path(paths[0]).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(text)
    plot_blocks(blocks, out_dir / "report.svg")
    print(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.csv, args.out.resolve() if args.out else None)
        cfg = resolve_config(args)
        handler = {"verify": cmd_verify, "gen-data": cmd_gen_data, "train": cmd_train, "sweep": cmd_sweep}
        return handler[args.command](cfg)
    except (ConfigError, MissingArtifact, DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"cfgrl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
