"""Hybrid multi-modal contrastive objective.

One cross-modal bidirectional triplet term plus one intra-modal term per
modality, where the intra-modal positive of each sample is its own
dropout-augmented forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .config import LossConfig
from .errors import ConfigError, InputError


def dropout_augment(x: torch.Tensor, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout: zero each entry with probability p, rescale survivors by 1/(1-p).

    Mask draws are float32 regardless of ``x.dtype`` so a seeded generator
    produces the same mask in single and double precision.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=torch.float32, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def _same_image_mask(n: int, image_id, device) -> torch.Tensor:
    if image_id is None:
        return torch.eye(n, dtype=torch.bool, device=device)
    ids = torch.as_tensor(image_id, device=device)
    if ids.shape != (n,):
        raise InputError(f"image_id must have shape ({n},), got {tuple(ids.shape)}")
    return ids[:, None] == ids[None, :]


def triplet_from_similarities(sims: torch.Tensor, margin: float, mode: str = "hardest",
                              image_id=None) -> torch.Tensor:
    """Bidirectional hinge over a square similarity matrix.

    ``sims[i, j]`` compares anchor i with positive-side item j; the diagonal
    holds the matched pairs. For pair i the row direction penalises
    ``margin - sims[i, i] + sims[i, j]`` and the column direction
    ``margin - sims[i, i] + sims[j, i]``, over j not sharing i's image.
    """
    if sims.dim() != 2 or sims.shape[0] != sims.shape[1]:
        raise InputError(f"similarity matrix must be square, got {tuple(sims.shape)}")
    n = sims.shape[0]
    if n < 2:
        raise InputError("triplet losses need a batch of at least 2 pairs")
    if mode not in ("hardest", "sum"):
        raise ConfigError(f"negative_mode must be hardest or sum, got {mode!r}")
    pos = sims.diagonal()
    excluded = _same_image_mask(n, image_id, sims.device)
    cost_row = (margin - pos[:, None] + sims).clamp(min=0).masked_fill(excluded, 0.0)
    cost_col = (margin - pos[None, :] + sims).clamp(min=0).masked_fill(excluded, 0.0)
    if mode == "hardest":
        return cost_row.max(dim=1).values.sum() + cost_col.max(dim=0).values.sum()
    return cost_row.sum() + cost_col.sum()


def cross_modal_loss(V: torch.Tensor, T: torch.Tensor, margin: float, mode: str = "hardest",
                     image_id=None) -> torch.Tensor:
    if V.shape != T.shape:
        raise InputError(f"image and text embeddings differ in shape: {tuple(V.shape)} vs {tuple(T.shape)}")
    return triplet_from_similarities(V @ T.T, margin, mode, image_id)


def intra_modal_loss(anchors: torch.Tensor, positives: torch.Tensor, margin: float,
                     mode: str = "hardest", image_id=None) -> torch.Tensor:
    """Anchor vs. other samples' augmented views, and other originals vs. the anchor's view."""
    if anchors.shape != positives.shape:
        raise InputError("anchors and positives differ in shape")
    return triplet_from_similarities(anchors @ positives.T, margin, mode, image_id)


@dataclass
class RetrievalBatch:
    V: torch.Tensor
    T: torch.Tensor
    V_aug: torch.Tensor
    T_aug: torch.Tensor
    image_id: torch.Tensor | Sequence | None = None


def hmmc_components(batch: RetrievalBatch, cfg: LossConfig) -> dict[str, torch.Tensor]:
    mode = cfg.negative_mode
    return {
        "cross": cross_modal_loss(batch.V, batch.T, cfg.margin_cross, mode, batch.image_id),
        "intra_v": intra_modal_loss(batch.V, batch.V_aug, cfg.margin_image, mode, batch.image_id),
        "intra_t": intra_modal_loss(batch.T, batch.T_aug, cfg.margin_text, mode, batch.image_id),
    }


def hmmc_loss(batch: RetrievalBatch, cfg: LossConfig) -> torch.Tensor:
    parts = hmmc_components(batch, cfg)
    return parts["cross"] + parts["intra_v"] + parts["intra_t"]
