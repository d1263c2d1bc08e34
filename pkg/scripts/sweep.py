"""One-axis hyperparameter sweeps on top of a base config.

    python3 scripts/sweep.py prompt_length --base configs/toy/text_prompt.toml --values 1 2 4 8
    python3 scripts/sweep.py bottleneck --base configs/toy/mrs_adapter.toml --values 4 8 16 32
    python3 scripts/sweep.py share --base configs/toy/mrs_adapter.toml --values 1 4 8 16

``bottleneck`` sets d (and r = d), ``share`` sets r with d fixed.  Each point
is a full k-fold run; results land in ``<out>/results.csv`` with the swept
value in the method column.
"""

import argparse
import copy

import torch

from petl_retrieval.config import RunConfig
from petl_retrieval.report import emit_report
from petl_retrieval.training import run_benchmark

AXES = {
    "prompt_length": lambda p, v: p.update(prompt_length=v),
    "bottleneck": lambda p, v: p.update(d=v, r=v),
    "share": lambda p, v: p.update(r=v),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("axis", choices=sorted(AXES))
    parser.add_argument("--base", required=True)
    parser.add_argument("--values", type=int, nargs="+", required=True)
    parser.add_argument("--out")
    parser.add_argument("--folds", type=int)
    args = parser.parse_args()
    torch.set_num_threads(1)

    base = RunConfig.from_file(args.base)
    configs = []
    for v in args.values:
        cfg = copy.deepcopy(base)
        AXES[args.axis](cfg.strategy.params, v)
        cfg.name = f"{base.name}_{args.axis}={v}"
        cfg.validate()
        configs.append(cfg)
    rows = run_benchmark(configs, k_folds=args.folds)
    emit_report(rows, args.out or f"runs/sweep_{args.axis}", extra={"axis": args.axis, "values": args.values})
    for v, row in zip(args.values, rows):
        if row.record is None:
            print(f"{args.axis}={v:<4d} failed: {row.error}")
        else:
            print(f"{args.axis}={v:<4d} mR {row.record.mr:6.2f}  trainable {row.record.params_trainable:,}")


if __name__ == "__main__":
    main()
