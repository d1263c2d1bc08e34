"""CLIP-style dual encoder: token embedding, transformer blocks, pooling.

Parameter names follow dot paths (``visual.blocks.3.mlp.w1.weight``) so a
named-tensor checkpoint maps one-to-one onto the module tree. Attached PETL
state lives under ``petl.``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn

from .config import EncoderConfig
from .errors import ConfigError, InputError, NumericalError
from .losses import dropout_augment

CHECKPOINT_VERSION = "1"

# special ids shared with the toy tokenizer
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

BRANCH = {"image": "vision", "text": "text"}


@dataclass
class TokenSequence:
    """A batch of token matrices for one modality.

    ``tokens`` is (B, N, D). For text, ``eos_index`` holds the EOS position
    of each row and ``valid`` marks non-padding positions. ``prompt_start``
    and ``n_prompts`` record where learnable prompt rows were inserted.
    """

    tokens: torch.Tensor
    modality: str
    eos_index: torch.Tensor | None = None
    valid: torch.Tensor | None = None
    prompt_start: torch.Tensor | None = None
    n_prompts: int = 0

    def replace(self, **changes) -> "TokenSequence":
        return dataclasses.replace(self, **changes)

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


def quick_gelu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(1.702 * x)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        head_dim = d // self.heads
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, head_dim).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) * head_dim**-0.5
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, width: int, ratio: int):
        super().__init__()
        self.w1 = nn.Linear(width, width * ratio)
        self.w2 = nn.Linear(width * ratio, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(quick_gelu(self.w1(x)))


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int, eps: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(width, eps=eps)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width, eps=eps)
        self.mlp = Mlp(width, mlp_ratio)


class VisionTower(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w, s = cfg.vision_width, cfg.patch_size
        self.width = w
        self.patch_embed = nn.Linear(3 * s * s, w, bias=False)
        self.cls_token = nn.Parameter(torch.empty(w))
        self.pos_embed = nn.Parameter(torch.empty(cfg.num_image_tokens, w))
        self.ln_pre = nn.LayerNorm(w, eps=cfg.ln_eps)
        self.blocks = nn.ModuleList(
            Block(w, cfg.vision_heads, cfg.mlp_ratio, cfg.ln_eps) for _ in range(cfg.layers)
        )
        self.ln_post = nn.LayerNorm(w, eps=cfg.ln_eps)
        self.proj = nn.Parameter(torch.empty(w, cfg.embed_dim))


class TextTower(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w = cfg.text_width
        self.width = w
        self.token_embed = nn.Embedding(cfg.vocab_size, w)
        self.pos_embed = nn.Parameter(torch.empty(cfg.context_length, w))
        self.blocks = nn.ModuleList(
            Block(w, cfg.text_heads, cfg.mlp_ratio, cfg.ln_eps) for _ in range(cfg.layers)
        )
        self.ln_post = nn.LayerNorm(w, eps=cfg.ln_eps)
        self.proj = nn.Parameter(torch.empty(w, cfg.embed_dim))


class DualEncoder(nn.Module):
    """Image and text towers plus an optional attached PETL module."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.visual = VisionTower(cfg)
        self.text = TextTower(cfg)
        self.petl: nn.Module | None = None

    def tower(self, modality: str) -> VisionTower | TextTower:
        if modality == "image":
            return self.visual
        if modality == "text":
            return self.text
        raise ConfigError(f"unknown modality {modality!r}")

    def backbone_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("petl."):
                yield name, p

    def encode_images(self, images, dropout_p=None, generator=None) -> torch.Tensor:
        return encode(images, self, "image", dropout_p, generator)

    def encode_texts(self, token_ids, dropout_p=None, generator=None) -> torch.Tensor:
        return encode(token_ids, self, "text", dropout_p, generator)


def init_parameters(model: nn.Module, seed: int, std: float = 0.02) -> None:
    """Layer norms to identity, biases to zero, everything else N(0, std)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.split(".")
            if any(part.startswith("ln") for part in leaf[:-1]):
                p.fill_(1.0 if leaf[-1] == "weight" else 0.0)
            elif leaf[-1] == "bias":
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)


def build_model(
    cfg: EncoderConfig,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    device: str | torch.device = "cpu",
) -> DualEncoder:
    """Randomly initialised backbone. ``device="meta"`` allocates nothing."""
    with torch.device(device):
        model = DualEncoder(cfg)
    if str(device) != "meta":
        init_parameters(model, seed, cfg.init_std)
    return model.to(dtype)


def embed_image_tokens(images: torch.Tensor, model: DualEncoder) -> TokenSequence:
    """Patch tokens with a prepended CLS row plus positional embedding.

    Accepts (H, W, 3) or (B, H, W, 3), channels last.
    """
    cfg = model.config
    tower = model.visual
    x = torch.as_tensor(images, dtype=tower.proj.dtype, device=tower.proj.device)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ConfigError(
            f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, 3), got {tuple(x.shape)}"
        )
    b, s, g = x.shape[0], cfg.patch_size, cfg.grid
    # (B, gh, s, gw, s, C) -> (B, gh*gw, C*s*s), matching a conv kernel's (C, kh, kw) flattening
    patches = x.reshape(b, g, s, g, s, 3).permute(0, 1, 3, 5, 2, 4).reshape(b, g * g, 3 * s * s)
    patch_tokens = tower.patch_embed(patches)
    cls = tower.cls_token.expand(b, 1, -1)
    tokens = torch.cat([cls, patch_tokens], dim=1) + tower.pos_embed
    return TokenSequence(tokens, "image")


def embed_text_tokens(token_ids: Sequence[int] | Sequence[Sequence[int]], model: DualEncoder) -> TokenSequence:
    """Word plus positional embeddings for BOS/EOS-wrapped id lists.

    Rows of a batch are right-padded with ``PAD_ID``; ``eos_index`` is the
    last real position of each row.
    """
    cfg = model.config
    tower = model.text
    if len(token_ids) and isinstance(token_ids[0], (int, np.integer)):
        token_ids = [token_ids]
    if not len(token_ids):
        raise InputError("empty text batch")
    lengths = [len(ids) for ids in token_ids]
    if min(lengths) < 2:
        raise InputError("token sequences need at least BOS and EOS")
    if max(lengths) > cfg.context_length:
        raise InputError(f"sequence of length {max(lengths)} exceeds context_length {cfg.context_length}")
    n = max(lengths)
    ids = torch.full((len(token_ids), n), PAD_ID, dtype=torch.long, device=tower.proj.device)
    for row, seq in enumerate(token_ids):
        ids[row, : len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token id outside vocabulary of size {cfg.vocab_size}")
    lengths_t = torch.as_tensor(lengths, device=ids.device)
    valid = torch.arange(n, device=ids.device)[None, :] < lengths_t[:, None]
    tokens = tower.token_embed(ids) + tower.pos_embed[:n]
    return TokenSequence(tokens, "text", eos_index=lengths_t - 1, valid=valid)


def attention_mask(x: TokenSequence, causal: bool) -> torch.Tensor | None:
    if x.modality != "text":
        return None
    n = x.length
    mask = x.valid[:, None, None, :]
    if causal:
        tri = torch.ones(n, n, dtype=torch.bool, device=x.tokens.device).tril()
        mask = mask & tri
    return mask


def block_forward(x: TokenSequence, layer_index: int, model: DualEncoder) -> TokenSequence:
    """One pre-LN transformer block, with attached PETL hooks applied.

    x_hat = MHA(LN(x)) + x; out = MLP(LN(x_hat)) + x_hat, plus the parallel
    adapter delta computed from x_hat when one is attached.
    """
    tower = model.tower(x.modality)
    if not 0 <= layer_index < len(tower.blocks):
        raise ConfigError(f"layer_index {layer_index} out of range for {len(tower.blocks)} layers")
    petl = model.petl
    branch = BRANCH[x.modality]
    if petl is not None:
        x = petl.apply_prompts(x, layer_index, model)
    h = x.tokens
    if h.shape[-1] != tower.width:
        raise ConfigError(f"token width {h.shape[-1]} does not match {branch} width {tower.width}")
    blk = tower.blocks[layer_index]
    mask = attention_mask(x, model.config.text_causal)
    attn_out = blk.attn(blk.ln1(h), mask)
    if petl is not None:
        attn_out = petl.adapt_attn(branch, layer_index, attn_out)
    h_hat = attn_out + h
    mlp_out = blk.mlp(blk.ln2(h_hat))
    if petl is not None:
        mlp_out = petl.adapt_mlp(branch, layer_index, mlp_out)
    out = mlp_out + h_hat
    if petl is not None:
        delta = petl.parallel_delta(branch, layer_index, h_hat)
        if delta is not None:
            out = out + delta
    return x.replace(tokens=out)


def l2_normalize(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericalError("cannot normalise a zero embedding vector")
    return z / norms


def pool_and_project(x: TokenSequence, model: DualEncoder) -> torch.Tensor:
    """CLS row (images) or EOS row (text) -> LN -> projection -> unit norm."""
    tower = model.tower(x.modality)
    if x.modality == "image":
        pooled = x.tokens[:, 0]
    else:
        if x.eos_index is None:
            raise InputError("text sequence has no eos_index")
        pooled = x.tokens[torch.arange(x.tokens.shape[0]), x.eos_index]
    z = tower.ln_post(pooled) @ tower.proj
    if model.petl is not None:
        z = model.petl.head(BRANCH[x.modality], z)
    return l2_normalize(z)


def encode(inputs, model: DualEncoder, modality: str, dropout_p: float | None = None,
           generator: torch.Generator | None = None) -> torch.Tensor:
    """Full pipeline to unit-norm (B, D) embeddings.

    With ``dropout_p`` set, the token matrix is dropout-augmented right after
    positional addition; otherwise the pass is deterministic.
    """
    if dropout_p is not None and not 0.0 <= dropout_p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {dropout_p}")
    if modality == "image":
        x = embed_image_tokens(inputs, model)
    elif modality == "text":
        x = embed_text_tokens(inputs, model)
    else:
        raise ConfigError(f"unknown modality {modality!r}")
    if dropout_p:
        x = x.replace(tokens=dropout_augment(x.tokens, dropout_p, generator))
    if modality == "image":
        x = x.replace(tokens=model.visual.ln_pre(x.tokens))
    for layer in range(model.config.layers):
        x = block_forward(x, layer, model)
    return pool_and_project(x, model)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: DualEncoder, path: str | Path, metadata: dict | None = None) -> Path:
    """Named float32 tensors plus a JSON header (safetensors container)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {
        name: t.detach().to("cpu", torch.float32).contiguous()
        for name, t in model.state_dict().items()
    }
    header = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": json.dumps(dataclasses.asdict(model.config)),
    }
    for key, value in (metadata or {}).items():
        header[key] = value if isinstance(value, str) else json.dumps(value)
    save_file(tensors, str(path), metadata=header)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    from safetensors import safe_open

    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint {path} does not exist")
    with safe_open(str(path), framework="pt") as fh:
        header = dict(fh.metadata() or {})
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {header.get('format_version')!r}")
    return load_file(str(path)), header


def load_backbone(model: DualEncoder, path: str | Path) -> None:
    """Copy backbone tensors by name; shapes must match the model config."""
    tensors, _ = read_checkpoint(path)
    own = dict(model.backbone_parameters())
    missing = sorted(set(own) - set(tensors))
    if missing:
        raise InputError(f"checkpoint lacks {len(missing)} backbone tensors, e.g. {missing[:3]}")
    with torch.no_grad():
        for name, p in own.items():
            src = tensors[name]
            if tuple(src.shape) != tuple(p.shape):
                raise ConfigError(f"{name}: checkpoint shape {tuple(src.shape)} != model {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))


_CLIP_BLOCK_NAMES = {
    "ln_1": "ln1",
    "ln_2": "ln2",
    "attn.in_proj_weight": "attn.qkv.weight",
    "attn.in_proj_bias": "attn.qkv.bias",
    "attn.out_proj": "attn.proj",
    "mlp.c_fc": "mlp.w1",
    "mlp.c_proj": "mlp.w2",
}


def convert_clip_state_dict(state: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Rename an OpenAI CLIP state dict onto this module tree."""
    out = {}
    for name, t in state.items():
        if name in ("logit_scale", "input_resolution", "context_length", "vocab_size"):
            continue
        if name == "visual.conv1.weight":
            out["visual.patch_embed.weight"] = t.reshape(t.shape[0], -1)
            continue
        new = (
            name.replace("visual.class_embedding", "visual.cls_token")
            .replace("visual.positional_embedding", "visual.pos_embed")
            .replace("token_embedding", "text.token_embed")
            .replace("ln_final", "text.ln_post")
            .replace("text_projection", "text.proj")
        )
        if name == "positional_embedding":
            new = "text.pos_embed"
        if name.startswith("transformer."):
            new = "text." + name
        new = new.replace("transformer.resblocks", "blocks")
        for old, repl in _CLIP_BLOCK_NAMES.items():
            new = new.replace(f".{old}", f".{repl}")
        out[new] = t
    return out
