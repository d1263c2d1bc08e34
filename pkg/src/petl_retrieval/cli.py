"""Command-line entry point: ``python3 -m petl_retrieval <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, ToyDatasetConfig
from .errors import InputError, NumericalError, PetlError

log = logging.getLogger("petl_retrieval")

IO_EXIT_CODE = 5
CONFIG_SUFFIXES = (".json", ".toml")


def _load_config(path: str, seed: int | None = None, out: str | None = None) -> RunConfig:
    cfg = RunConfig.from_file(path)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output_dir = out
    return cfg


def cmd_run(args) -> int:
    from .encoder import save_checkpoint
    from .metrics import encode_split
    from .report import emit_report, versioned_path
    from .training import train

    cfg = _load_config(args.config, args.seed, args.out)
    result = train(cfg, fold=args.fold)
    out = Path(cfg.output_dir)
    embeddings = None
    if args.dump_embeddings:
        embeddings = {s: encode_split(result.model, getattr(result.data, s)) for s in ("val", "test")}
    row = {"method": cfg.strategy.label, **result.test.as_dict()}
    emit_report([row], out, embeddings, extra={"run": result.to_dict(), "config": cfg.to_dict()})
    ckpt = save_checkpoint(result.model, versioned_path(out / f"{cfg.name}.safetensors"), metadata={
        "run_config": cfg.to_dict(),
        "fold": args.fold,
        "vocab": result.data.vocab.itos,
        "config_hash": cfg.config_hash(),
    })
    print(json.dumps({"test": result.test.as_dict(), "best_epoch": result.best_epoch,
                      "checkpoint": str(ckpt)}, indent=2))
    return 0


def _config_files(directory: str) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise InputError(f"config directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix in CONFIG_SUFFIXES)
    if not files:
        raise InputError(f"no .json or .toml configs in {root}")
    return files


def cmd_bench(args) -> int:
    from .report import emit_report
    from .training import run_benchmark

    configs = [_load_config(str(p)) for p in _config_files(args.configs)]
    rows = run_benchmark(configs, k_folds=args.folds)
    paths = emit_report(rows, args.out)
    for row in rows:
        if row.record is None:
            print(f"{row.method:24s} FAILED {row.error}")
        else:
            print(f"{row.method:24s} mR {row.record.mr:6.2f}  params {row.record.params_trainable:,}")
    print(f"report written to {paths['csv'].parent}")
    return 0 if all(r.record is not None for r in rows) else 1


def cmd_gradcheck(args) -> int:
    from .training import grad_check

    cfg = _load_config(args.config)
    res = grad_check(cfg, epsilon=args.epsilon, batch_size=args.batch_size)
    print(json.dumps(dataclasses.asdict(res), indent=2))
    if res.frozen_with_grad:
        raise NumericalError(f"frozen parameters received gradients: {res.frozen_with_grad[:3]}")
    if res.max_rel_error >= args.tol:
        raise NumericalError(f"max relative error {res.max_rel_error:.3g} >= {args.tol:g} ({res.worst_parameter})")
    return 0


def cmd_make_toy_data(args) -> int:
    from .data import export_toy_dataset, synthesize_toy_dataset

    cfg = ToyDatasetConfig(n_classes=args.classes, items_per_class=args.per_class, seed=args.seed)
    if args.noise_std is not None:
        cfg.noise_std = args.noise_std
    cfg.validate()
    path = export_toy_dataset(synthesize_toy_dataset(cfg), args.out)
    print(path)
    return 0


def cmd_export_embeddings(args) -> int:
    from .encoder import read_checkpoint
    from .metrics import encode_split
    from .report import dump_embeddings
    from .training import make_model, prepare_data

    tensors, header = read_checkpoint(args.checkpoint)
    if "run_config" not in header:
        raise InputError(f"{args.checkpoint} has no run_config metadata; was it written by `run`?")
    cfg = RunConfig.from_dict(json.loads(header["run_config"]))
    seed = cfg.seed + int(header.get("fold", "0"))
    data = prepare_data(cfg, seed)
    if "vocab" in header and json.loads(header["vocab"]) != data.vocab.itos:
        raise InputError("dataset vocabulary differs from the one stored in the checkpoint")
    split = getattr(data, args.split)
    model = make_model(cfg, seed)
    model.load_state_dict({k: v.to(model.text.proj.dtype) for k, v in tensors.items()})
    V, T = encode_split(model, split, cfg.eval_batch_size)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    for name, path in dump_embeddings(V, T, out, args.split).items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petl-retrieval", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one config and write metrics, report and checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--dump-embeddings", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="k-fold benchmark over every config in a directory")
    p.add_argument("--configs", required=True)
    p.add_argument("--out", default="bench")
    p.add_argument("--folds", type=int, help="override k_folds of every config")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="autograd vs. central finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-toy-data", help="export the synthetic dataset as PNGs plus manifest")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-std", type=float)
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("export-embeddings", help="dump image/text embeddings of a split as .npy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PetlError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
