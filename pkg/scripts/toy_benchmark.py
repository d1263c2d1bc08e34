"""Benchmark every toy config and print the table next to the chance level.

    python3 scripts/toy_benchmark.py --out runs/toy_bench --folds 1
"""

import argparse
from pathlib import Path

import torch

from petl_retrieval.config import RunConfig
from petl_retrieval.report import emit_report
from petl_retrieval.training import chance_mr, prepare_data, run_benchmark


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--configs", default="configs/toy")
    parser.add_argument("--out", default="runs/toy_bench")
    parser.add_argument("--folds", type=int, help="override k_folds (default: each config's own)")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()
    torch.set_num_threads(args.threads)

    configs = [RunConfig.from_file(p) for p in sorted(Path(args.configs).glob("*.toml"))]
    rows = run_benchmark(configs, k_folds=args.folds)
    chance = chance_mr(prepare_data(configs[0], configs[0].seed).test)
    emit_report(rows, args.out, extra={"chance_mr": chance})

    print(f"{'method':22s} {'mR':>7s} {'TR@1':>7s} {'IR@1':>7s} {'trainable':>10s}")
    for row in sorted(rows, key=lambda r: -1 if r.record is None else r.record.mr):
        if row.record is None:
            print(f"{row.method:22s} failed: {row.error}")
            continue
        rec = row.record
        print(f"{row.method:22s} {rec.mr:7.2f} {rec.tr_r1:7.2f} {rec.ir_r1:7.2f} {rec.params_trainable:10,d}")
    print(f"chance mR on the fold-0 test split: {chance:.2f}")


if __name__ == "__main__":
    main()
