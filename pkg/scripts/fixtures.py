"""Run a method on a named fixture and print its accuracy matrices.

    python scripts/fixtures.py interference --methods seq_ft_peft mocl --seeds 1 2 3
"""
import argparse
import ast
import dataclasses
import time

import numpy as np

from mocl.config import DataConfig
from mocl.experiment import build_backbone, build_suite, reference_accuracies, run_sequence
from mocl.fixtures import FIXTURES, fixture_config
from mocl.metrics import avg_final, fwt


def main():
    p = argparse.ArgumentParser()
    p.add_argument("fixture", choices=sorted(FIXTURES))
    p.add_argument("--methods", nargs="+", default=["mocl"])
    p.add_argument("--seeds", nargs="+", type=int, default=[1])
    p.add_argument("--fwt", action="store_true")
    p.add_argument("--cil", action="store_true")
    p.add_argument("--set", nargs="*", default=[], help="data overrides key=value")
    p.add_argument("--peft", nargs="*", default=[], help="peft overrides key=value")
    p.add_argument("--train", nargs="*", default=[], help="train overrides key=value")
    args = p.parse_args()
    data = {k: type(getattr(DataConfig(), k) if getattr(DataConfig(), k) is not None else 0)(ast.literal_eval(v))
            for k, v in (s.split("=") for s in args.set)}
    for seed in args.seeds:
        cfg0 = fixture_config(args.fixture, "mocl", **data)
        tr = {k: ast.literal_eval(v) for k, v in (s.split("=") for s in args.train)}
        pf = {k: (v if k == "kind" else ast.literal_eval(v)) for k, v in (s.split("=") for s in args.peft)}
        cfg0 = dataclasses.replace(cfg0, train=dataclasses.replace(cfg0.train, **tr),
                                   peft=dataclasses.replace(cfg0.peft, **pf))
        tasks = build_suite(cfg0, seed)
        backbone, vocab = build_backbone(cfg0, tasks, seed)
        refs = reference_accuracies(cfg0, backbone, vocab, tasks, seed) if args.fwt else None
        for m in args.methods:
            t0 = time.time()
            name, _, mode = m.partition(":")
            cfg = dataclasses.replace(cfg0, method=name)
            if mode:
                cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, til_mode=mode))
            res = run_sequence(cfg, backbone, vocab, tasks, seed, ("TIL", "CIL") if args.cil else ("TIL",))
            til = res.matrices["TIL"]
            line = f"seed={seed} {m:<14} avg={avg_final(til):.4f} diag={np.round(til.diagonal(), 3)} "
            line += f"last={np.round(til.final_row(), 3)}"
            if refs is not None:
                til.reference = refs
                line += f" fwt={fwt(til):+.4f} ref={np.round(refs, 3)}"
            if "CIL" in res.matrices:
                line += f" cil={avg_final(res.matrices['CIL']):.4f}"
            print(line + f" ({time.time() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
