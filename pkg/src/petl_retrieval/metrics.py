"""Recall@K in both retrieval directions, mean recall, and fold averaging."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError

FIELDS = ("tr_r1", "tr_r5", "tr_r10", "ir_r1", "ir_r5", "ir_r10", "mr", "params_trainable", "params_total")
KS = (1, 5, 10)


@dataclass
class MetricsRecord:
    """``tr_*``: image queries retrieving captions; ``ir_*``: caption queries retrieving images."""

    tr_r1: float
    tr_r5: float
    tr_r10: float
    ir_r1: float
    ir_r5: float
    ir_r10: float
    mr: float
    params_trainable: int = 0
    params_total: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def recalls(self) -> list[float]:
        return [self.tr_r1, self.tr_r5, self.tr_r10, self.ir_r1, self.ir_r5, self.ir_r10]


def similarity_matrix(V, T) -> np.ndarray:
    """Rows are images, columns captions. Inputs are unit-norm embeddings."""
    V = np.asarray(V, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if V.ndim != 2 or T.ndim != 2 or V.shape[1] != T.shape[1]:
        raise InputError(f"embedding dimensions do not match: {V.shape} vs {T.shape}")
    return V @ T.T


def _ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of ``scores[q, targets[q]]`` within row q; ties go to the lower index."""
    rows = np.arange(scores.shape[0])
    target_scores = scores[rows, targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    higher = scores > target_scores
    tied_before = (scores == target_scores) & (cols < targets[:, None])
    return (higher | tied_before).sum(axis=1)


def recall_at_k(S, caption_to_image: Sequence[int], K: int, direction: str) -> float:
    """Percentage of queries whose ground truth lands in the top K.

    ``image_query`` succeeds when any caption of the image ranks in the top
    K of its row; ``text_query`` when the caption's image ranks in the top K
    of its column.
    """
    S = np.asarray(S, dtype=np.float64)
    labels = np.asarray(caption_to_image, dtype=np.int64)
    n_img, n_cap = S.shape
    if labels.shape != (n_cap,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= n_img:
        raise InputError("caption_to_image must give one valid image index per caption")
    if K < 1:
        raise InputError("K must be >= 1")
    if direction == "image_query":
        if K > n_cap:
            raise InputError(f"K={K} exceeds the {n_cap} candidate captions")
        best = np.full(n_img, n_cap)
        for i in range(n_img):
            gt = np.flatnonzero(labels == i)
            if gt.size:
                best[i] = _ranks(np.broadcast_to(S[i], (gt.size, n_cap)), gt).min()
        return 100.0 * (best < K).mean()
    if direction == "text_query":
        if K > n_img:
            raise InputError(f"K={K} exceeds the {n_img} candidate images")
        return 100.0 * (_ranks(S.T, labels) < K).mean()
    raise InputError(f"unknown direction {direction!r}")


def mean_recall(values: Sequence[float]) -> float:
    values = list(values)
    if len(values) != 6:
        raise InputError(f"mean recall needs exactly six recall values, got {len(values)}")
    return sum(values) / 6.0


def metrics_from_similarity(S, caption_to_image, params_trainable: int = 0, params_total: int = 0) -> MetricsRecord:
    """All six recalls; K is capped at the candidate count for tiny splits."""
    S = np.asarray(S)
    n_img, n_cap = S.shape
    tr = [recall_at_k(S, caption_to_image, min(k, n_cap), "image_query") for k in KS]
    ir = [recall_at_k(S, caption_to_image, min(k, n_img), "text_query") for k in KS]
    return MetricsRecord(*tr, *ir, mean_recall(tr + ir), params_trainable, params_total)


def kfold_aggregate(records: Sequence[MetricsRecord]) -> MetricsRecord:
    if not records:
        raise InputError("cannot aggregate an empty list of records")
    values = {
        f: float(np.mean([getattr(r, f) for r in records])) for f in FIELDS
    }
    values["params_trainable"] = int(round(values["params_trainable"]))
    values["params_total"] = int(round(values["params_total"]))
    return MetricsRecord(**values)


def encode_split(model, split, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (no augmentation) image and caption embeddings of a split."""
    import torch

    was_training = model.training
    model.eval()
    dtype = model.text.proj.dtype
    with torch.no_grad():
        V = [
            model.encode_images(torch.as_tensor(split.images[i:i + batch_size], dtype=dtype))
            for i in range(0, split.n_images, batch_size)
        ]
        T = [
            model.encode_texts(split.token_ids[i:i + batch_size])
            for i in range(0, len(split.token_ids), batch_size)
        ]
    model.train(was_training)
    return torch.cat(V).double().numpy(), torch.cat(T).double().numpy()


def evaluate_retrieval(model, split, batch_size: int = 128) -> MetricsRecord:
    if split.n_images == 0 or len(split.token_ids) == 0:
        raise InputError("cannot evaluate an empty split")
    from .petl import count_parameters

    V, T = encode_split(model, split, batch_size)
    report = count_parameters(model)
    return metrics_from_similarity(similarity_matrix(V, T), split.caption_to_image,
                                   report.trainable, report.total)
