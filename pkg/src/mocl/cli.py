"""Command-line entry point.

    mocl run --config exp.toml [--seeds 1 2 3]
    mocl gen-data --config exp.toml [--seed 1]
    mocl train --config exp.toml [--seed 1]
    mocl eval --config exp.toml [--seed 1]
    mocl fwt --matrix acc_til.csv --reference reference.csv
    mocl heatmap --checkpoint DIR --suite suite.jsonl --out heatmap.csv

Exit codes: 0 ok, 2 invalid config or mismatched artifacts, 3 training
divergence, 4 file-system errors.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from mocl import experiment
from mocl.config import load_config
from mocl.data import load_jsonl
from mocl.errors import (ArtifactMismatchError, ConfigurationError, DataFormatError, ProtocolError,
                         TrainingDivergenceError)
from mocl.learner import load_state
from mocl.metrics import (AccuracyMatrix, avg_final, fwt, heatmap, read_matrix_csv, read_reference_csv,
                          write_heatmap_csv)

EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4


def _seeds(args, cfg) -> list[int]:
    if getattr(args, "seeds", None):
        return list(args.seeds)
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return list(cfg.seeds)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    experiment.run(cfg, _seeds(args, cfg))
    return 0


def _per_seed(stage):
    def cmd(args) -> int:
        cfg = load_config(args.config)
        for seed in _seeds(args, cfg):
            result = stage(cfg, seed)
            print(f"[{cfg.method} seed={seed}] {stage.__name__}: "
                  f"{result if not isinstance(result, dict) else experiment.seed_dir(cfg, seed)}")
        return 0
    return cmd


def cmd_fwt(args) -> int:
    names, a = read_matrix_csv(args.matrix)
    refs = read_reference_csv(args.reference)
    missing = [n for n in names if n not in refs]
    if missing:
        raise DataFormatError(f"{args.reference}: no reference for {', '.join(missing)}")
    m = AccuracyMatrix(names, a, np.array([refs[n] for n in names]))
    print(f"fwt={fwt(m):.6f} avg={avg_final(m):.6f}")
    return 0


def cmd_heatmap(args) -> int:
    state, _ = load_state(args.checkpoint)
    tasks = load_jsonl(args.suite)
    by_name = {t.name: t for t in tasks}
    missing = [n for n in state.task_names if n not in by_name]
    if missing:
        raise ArtifactMismatchError(f"suite {args.suite} lacks task(s) {', '.join(missing)} "
                                    f"present in checkpoint {args.checkpoint}")
    ordered = [by_name[n] for n in state.task_names]
    write_heatmap_csv(args.out, heatmap(state, ordered, args.split))
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mocl", description="Continual learning with composed PEFT modules.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="gen-data, train and eval for every seed, then aggregate")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", type=int, nargs="+")
    r.set_defaults(func=cmd_run)

    for name, stage in (("gen-data", experiment.gen_data), ("train", experiment.train),
                        ("eval", experiment.evaluate)):
        s = sub.add_parser(name, help=f"{name} stage only")
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int)
        s.set_defaults(func=_per_seed(stage))

    f = sub.add_parser("fwt", help="forward transfer from a matrix CSV and a reference CSV")
    f.add_argument("--matrix", required=True)
    f.add_argument("--reference", required=True)
    f.set_defaults(func=cmd_fwt)

    h = sub.add_parser("heatmap", help="matching-weight heatmap from a saved checkpoint")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--suite", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--split", default="train", choices=("train", "val", "test"))
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, ArtifactMismatchError, DataFormatError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
