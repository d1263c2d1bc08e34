"""Training loop, learning-rate schedule, gradient check and benchmark sweeps."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .config import CLIP_MEAN, CLIP_STD, RunConfig
from .data import (
    DatasetManifest,
    RetrievalSplit,
    Vocabulary,
    load_manifest,
    prepare_split,
    split_dataset,
    synthesize_toy_dataset,
)
from .encoder import DualEncoder, build_model, load_backbone
from .errors import ConfigError, NumericalError, PetlError
from .losses import RetrievalBatch, hmmc_components
from .metrics import MetricsRecord, evaluate_retrieval, kfold_aggregate
from .petl import ParamReport, attach_strategy, count_parameters, trainable_parameters

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def lr_schedule(epoch: int, base_lr: float, decay_factor: float = 0.7, decay_every: int = 20) -> float:
    """Step decay: base_lr * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return base_lr * decay_factor ** (epoch // decay_every)


@dataclass
class PreparedData:
    train: RetrievalSplit
    val: RetrievalSplit
    test: RetrievalSplit
    vocab: Vocabulary


def prepare_data(cfg: RunConfig, seed: int, manifest: DatasetManifest | None = None) -> PreparedData:
    data = cfg.data
    if manifest is None:
        manifest = synthesize_toy_dataset(data.toy) if data.source == "toy" else load_manifest(data.source)
    if data.mean is not None:
        mean, std = data.mean, data.std
    elif manifest.normalization:
        mean, std = manifest.normalization["mean"], manifest.normalization["std"]
    elif data.source == "toy":
        mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    else:
        mean, std = CLIP_MEAN, CLIP_STD
    train, val, test = split_dataset(manifest, data.ratios, seed)
    for name, part in (("train", train), ("val", val), ("test", test)):
        if len(part) == 0:
            raise ConfigError(f"{name} split is empty; dataset too small for ratios {data.ratios}")
    vocab = Vocabulary.from_texts(train.captions()[0])
    if len(vocab) > cfg.encoder.vocab_size:
        raise ConfigError(f"vocabulary of {len(vocab)} words exceeds encoder vocab_size {cfg.encoder.vocab_size}")
    enc = cfg.encoder
    prep = lambda m: prepare_split(m, vocab, enc.image_size, enc.context_length, mean, std)  # noqa: E731
    return PreparedData(prep(train), prep(val), prep(test), vocab)


@dataclass
class RunResult:
    name: str
    strategy: str
    seed: int
    config_hash: str
    loss_curve: list[float]
    lr_curve: list[float]
    val_mr_curve: list[float]
    initial_val: MetricsRecord
    initial_test: MetricsRecord
    best_val: MetricsRecord
    best_epoch: int
    test: MetricsRecord
    params: ParamReport
    steps: int
    wall_clock: float
    model: DualEncoder | None = field(default=None, repr=False, compare=False)
    data: PreparedData | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("model", "data"):
                continue
            value = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
        return out


def _snapshot(model: DualEncoder) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in trainable_parameters(model)}


def _restore(model: DualEncoder, state: dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, value in state.items():
            params[name].copy_(value)


def make_model(cfg: RunConfig, seed: int) -> DualEncoder:
    model = build_model(cfg.encoder, seed=seed, dtype=DTYPES[cfg.dtype])
    if cfg.backbone_checkpoint:
        load_backbone(model, cfg.backbone_checkpoint)
    return attach_strategy(model, cfg.strategy, seed=seed)


def batch_loss(model: DualEncoder, split: RetrievalSplit, image_idx: np.ndarray, caption_idx: np.ndarray,
               cfg: RunConfig, generator: torch.Generator) -> tuple[torch.Tensor, dict]:
    """HMMC loss of one batch: a clean pass for (v, t) and an augmented pass for (v+, t+)."""
    dtype = model.text.proj.dtype
    images = torch.as_tensor(split.images[image_idx], dtype=dtype)
    ids = [split.token_ids[c] for c in caption_idx]
    p = cfg.loss.dropout_p
    batch = RetrievalBatch(
        V=model.encode_images(images),
        T=model.encode_texts(ids),
        V_aug=model.encode_images(images, p, generator),
        T_aug=model.encode_texts(ids, p, generator),
        image_id=torch.as_tensor(image_idx),
    )
    parts = hmmc_components(batch, cfg.loss)
    return parts["cross"] + parts["intra_v"] + parts["intra_t"], parts


def train(cfg: RunConfig, fold: int = 0, manifest: DatasetManifest | None = None,
          on_epoch: Callable[[int, float, MetricsRecord], None] | None = None) -> RunResult:
    """Train one fold. Fold f reseeds the split and initialisation with ``seed + f``."""
    cfg.validate()
    start = time.perf_counter()
    seed = cfg.seed + fold
    data = prepare_data(cfg, seed, manifest)
    model = make_model(cfg, seed)
    params = [p for _, p in trainable_parameters(model)]
    report = count_parameters(model)
    opt = None
    if params:
        o = cfg.optimizer
        opt = torch.optim.Adam(params, lr=o.lr, betas=tuple(o.betas), eps=o.eps, weight_decay=o.weight_decay)

    evaluate = lambda split: evaluate_retrieval(model, split, cfg.eval_batch_size)  # noqa: E731
    initial_val = evaluate(data.val)
    initial_test = evaluate(data.test)
    best_val, best_epoch, best_state = initial_val, -1, _snapshot(model)

    shuffle = np.random.default_rng(seed)
    dropout_gen = torch.Generator().manual_seed(seed + 7919)
    pairs_img = data.train.caption_to_image
    loss_curve, lr_curve, val_curve = [], [], []
    steps = 0
    if opt is not None:
        model.train()
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg.optimizer.lr, cfg.schedule.decay_factor, cfg.schedule.decay_every)
            for group in opt.param_groups:
                group["lr"] = lr
            order = shuffle.permutation(len(pairs_img))
            total, n_batches = 0.0, 0
            for lo in range(0, len(order), cfg.batch_size):
                caption_idx = order[lo:lo + cfg.batch_size]
                if len(caption_idx) < 2:
                    continue
                loss, parts = batch_loss(model, data.train, pairs_img[caption_idx], caption_idx, cfg, dropout_gen)
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, step {steps}: "
                        + ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items())
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                steps += 1
                total += loss.item()
                n_batches += 1
            loss_curve.append(total / max(n_batches, 1))
            lr_curve.append(lr)
            val = evaluate(data.val)
            val_curve.append(val.mr)
            if val.mr > best_val.mr:
                best_val, best_epoch, best_state = val, epoch, _snapshot(model)
            log.info("%s fold %d epoch %d loss %.4f val mR %.2f", cfg.name, fold, epoch, loss_curve[-1], val.mr)
            if on_epoch is not None:
                on_epoch(epoch, loss_curve[-1], val)
        _restore(model, best_state)
    test = evaluate(data.test)
    return RunResult(
        name=cfg.name,
        strategy=cfg.strategy.label,
        seed=seed,
        config_hash=cfg.config_hash(),
        loss_curve=loss_curve,
        lr_curve=lr_curve,
        val_mr_curve=val_curve,
        initial_val=initial_val,
        initial_test=initial_test,
        best_val=best_val,
        best_epoch=best_epoch,
        test=test,
        params=report,
        steps=steps,
        wall_clock=time.perf_counter() - start,
        model=model,
        data=data,
    )


# --------------------------------------------------------------- grad check

def finite_difference_grad(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                           eps: float = 1e-5) -> list[torch.Tensor]:
    """Central differences of a scalar closure w.r.t. every element of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> torch.Tensor:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp(min=floor)
    return (analytic - numeric).abs() / denom


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    worst_parameter: str
    n_elements: int
    frozen_with_grad: list[str]
    loss: float


def grad_check(cfg: RunConfig, epsilon: float = 1e-5, batch_size: int = 4, perturb_std: float = 0.1,
               seed: int | None = None) -> GradCheckResult:
    """Autograd vs. central finite differences of the HMMC loss over all trainable tensors.

    Runs in double precision on one batch. Trainable tensors are first
    perturbed with N(0, perturb_std) noise so zero-initialised up-projections
    do not hide the down-projection gradients.
    """
    cfg = copy.deepcopy(cfg)
    cfg.dtype = "float64"
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    data = prepare_data(cfg, seed)
    model = make_model(cfg, seed)
    named = trainable_parameters(model)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in named:
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * perturb_std)

    rng = np.random.default_rng(seed)
    image_idx = rng.choice(data.train.n_images, size=batch_size, replace=False)
    caption_idx = np.array([rng.choice(np.flatnonzero(data.train.caption_to_image == i)) for i in image_idx])

    def loss_fn() -> torch.Tensor:
        g = torch.Generator().manual_seed(seed + 1)
        return batch_loss(model, data.train, image_idx, caption_idx, cfg, g)[0]

    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    frozen_with_grad = [n for n, p in model.named_parameters() if not p.requires_grad and p.grad is not None]
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for _, p in named]
    numeric = finite_difference_grad(loss_fn, [p for _, p in named], epsilon)
    worst, worst_abs, worst_name, n = 0.0, 0.0, "", 0
    for (name, _), a, num in zip(named, analytic, numeric):
        if not a.numel():
            continue
        n += a.numel()
        err = relative_error(a, num).max().item()
        worst_abs = max(worst_abs, (a - num).abs().max().item())
        if err > worst:
            worst, worst_name = err, name
    return GradCheckResult(worst, worst_abs, worst_name, n, frozen_with_grad, loss.item())


# ----------------------------------------------------------------- benchmark

@dataclass
class BenchmarkRow:
    method: str
    record: MetricsRecord | None
    folds: list[RunResult] = field(default_factory=list, repr=False)
    error: str | None = None

    def as_row(self) -> dict:
        return {"method": self.method, **self.record.as_dict()}


def run_benchmark(configs: Sequence[RunConfig], k_folds: int | None = None) -> list[BenchmarkRow]:
    """One row per config: the mean test record over k reseeded folds."""
    if not configs:
        raise ConfigError("run_benchmark needs at least one config")
    rows = []
    for cfg in configs:
        k = cfg.k_folds if k_folds is None else k_folds
        try:
            folds = [train(cfg, fold) for fold in range(k)]
        except PetlError as exc:
            log.error("run %s failed: %s", cfg.name, exc)
            rows.append(BenchmarkRow(cfg.name, None, error=f"{exc.category}: {exc}"))
            continue
        for f in folds:
            f.model, f.data = None, None
        rows.append(BenchmarkRow(cfg.name, kfold_aggregate([f.test for f in folds]), folds))
    return rows


def chance_mr(split: RetrievalSplit) -> float:
    """Expected mR of a uniformly random ranking on ``split``."""
    n_img = split.n_images
    n_cap = len(split.token_ids)
    counts = np.bincount(split.caption_to_image, minlength=n_img)
    tr = []
    for k in (1, 5, 10):
        k = min(k, n_cap)
        # P(no ground-truth caption in a random top-k) = C(n-g, k) / C(n, k)
        miss = [math.comb(n_cap - g, k) / math.comb(n_cap, k) for g in counts]
        tr.append(100.0 * (1.0 - float(np.mean(miss))))
    ir = [100.0 * min(k, n_img) / n_img for k in (1, 5, 10)]
    return float(np.mean(tr + ir))
