"""Parameter-efficient transfer strategies and trainability bookkeeping.

Every strategy is a ``PetlModule`` attached to ``DualEncoder.petl``. The
encoder calls its hooks at fixed points of each block; the base class
makes every hook a no-op so a strategy only overrides what it touches.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import EncoderConfig, PetlStrategy
from .encoder import BRANCH, DualEncoder, TokenSequence
from .errors import ConfigError, InputError

ADAPTER_DOWN_STD = 0.01
PROMPT_STD = 0.02


class PetlModule(nn.Module):
    kind = ""

    def apply_prompts(self, x: TokenSequence, layer: int, model: DualEncoder) -> TokenSequence:
        return x

    def adapt_attn(self, branch: str, layer: int, h: torch.Tensor) -> torch.Tensor:
        return h

    def adapt_mlp(self, branch: str, layer: int, h: torch.Tensor) -> torch.Tensor:
        return h

    def parallel_delta(self, branch: str, layer: int, h: torch.Tensor) -> torch.Tensor | None:
        return None

    def head(self, branch: str, z: torch.Tensor) -> torch.Tensor:
        return z


# ------------------------------------------------------------------ adapters

class AdapterParams(nn.Module):
    """Bottleneck with its own skip connection: s * ReLU(x W_down) W_up + x."""

    def __init__(self, width: int, d: int, scale: float = 1.0):
        super().__init__()
        if not 0 < d < width:
            raise ConfigError(f"adapter bottleneck d={d} must satisfy 0 < d < {width}")
        self.down = nn.Parameter(torch.zeros(width, d))
        self.up = nn.Parameter(torch.zeros(d, width))
        self.scale = float(scale)


def adapter_forward(x: torch.Tensor, a: AdapterParams) -> torch.Tensor:
    if x.shape[-1] != a.down.shape[0]:
        raise ConfigError(f"adapter expects width {a.down.shape[0]}, got {x.shape[-1]}")
    return a.scale * (torch.relu(x @ a.down) @ a.up) + x


class SequentialAdapter(PetlModule):
    """Adapters after MHA and after the FFN of every layer, untied."""

    kind = "adapter_sequential"

    def __init__(self, cfg: EncoderConfig, d: int, scale: float, branches):
        super().__init__()
        self.branches = list(branches)
        widths = {"vision": cfg.vision_width, "text": cfg.text_width}
        self.adapters = nn.ModuleDict({
            b: nn.ModuleList(
                nn.ModuleDict({"attn": AdapterParams(widths[b], d, scale),
                               "mlp": AdapterParams(widths[b], d, scale)})
                for _ in range(cfg.layers)
            )
            for b in self.branches
        })

    def adapt_attn(self, branch, layer, h):
        if branch not in self.adapters:
            return h
        return adapter_forward(h, self.adapters[branch][layer]["attn"])

    def adapt_mlp(self, branch, layer, h):
        if branch not in self.adapters:
            return h
        return adapter_forward(h, self.adapters[branch][layer]["mlp"])


class MrsAdapterParams(nn.Module):
    """Down-projections per branch; up-projections whose last ``r`` output
    columns come from one matrix shared by both branches.

    With ``share=False`` each branch instead owns a full-width up-projection.
    """

    def __init__(self, vision_width: int, text_width: int, d: int, r: int,
                 share: bool = True, branches=("vision", "text")):
        super().__init__()
        if not 0 < d < min(vision_width, text_width):
            raise ConfigError(f"bottleneck d={d} must satisfy 0 < d < min(Dv, Dt)={min(vision_width, text_width)}")
        if not (0 < r < vision_width and r < text_width):
            raise ConfigError(f"share dim r={r} must satisfy 0 < r < min(Dv, Dt)")
        if share and set(branches) != {"vision", "text"}:
            raise ConfigError("a shared up-projection needs both branches")
        self.d, self.r, self.share = d, r, share
        self.branches = list(branches)
        widths = {"vision": vision_width, "text": text_width}
        suffix = {"vision": "v", "text": "t"}
        for b in self.branches:
            up_width = widths[b] - r if share else widths[b]
            self.register_parameter(f"down_{suffix[b]}", nn.Parameter(torch.zeros(widths[b], d)))
            self.register_parameter(f"up_{suffix[b]}", nn.Parameter(torch.zeros(d, up_width)))
        if share:
            self.up_share = nn.Parameter(torch.zeros(d, r))


def mrs_adapter_forward(x: torch.Tensor, m: MrsAdapterParams, branch: str) -> torch.Tensor:
    """Adapter delta (no skip): [ReLU(x W_down) W_up ; ReLU(x W_down) W_share]."""
    if branch not in m.branches:
        raise ConfigError(f"adapter has no {branch} branch")
    s = "v" if branch == "vision" else "t"
    down = getattr(m, f"down_{s}")
    if x.shape[-1] != down.shape[0]:
        raise ConfigError(f"{branch} adapter expects width {down.shape[0]}, got {x.shape[-1]}")
    hidden = torch.relu(x @ down)
    specific = hidden @ getattr(m, f"up_{s}")
    if not m.share:
        return specific
    return torch.cat([specific, hidden @ m.up_share], dim=-1)


class MrsAdapter(PetlModule):
    """Adapter in parallel with the FFN of every layer of both towers."""

    def __init__(self, cfg: EncoderConfig, d: int, r: int, tie_across_layers: bool = True,
                 share: bool = True, branches=("vision", "text")):
        super().__init__()
        self.kind = "mrs_adapter" if share else "mrs_no_share"
        self.tied = bool(tie_across_layers)
        self.branches = list(branches)

        def make():
            return MrsAdapterParams(cfg.vision_width, cfg.text_width, d, r, share, branches)

        if self.tied:
            self.shared = make()
        else:
            self.layers = nn.ModuleList(make() for _ in range(cfg.layers))

    def params_for(self, layer: int) -> MrsAdapterParams:
        return self.shared if self.tied else self.layers[layer]

    def parallel_delta(self, branch, layer, h):
        if branch not in self.branches:
            return None
        return mrs_adapter_forward(h, self.params_for(layer), branch)


# ------------------------------------------------------------------- prompts

def _insert_rows(x: TokenSequence, prompts: torch.Tensor, starts: torch.Tensor) -> TokenSequence:
    b = x.tokens.shape[0]
    p = prompts.shape[0]
    rows, valid_rows = [], []
    for i in range(b):
        s = int(starts[i])
        rows.append(torch.cat([x.tokens[i, :s], prompts, x.tokens[i, s:]], dim=0))
        if x.valid is not None:
            ones = torch.ones(p, dtype=torch.bool, device=x.valid.device)
            valid_rows.append(torch.cat([x.valid[i, :s], ones, x.valid[i, s:]]))
    return x.replace(
        tokens=torch.stack(rows),
        valid=torch.stack(valid_rows) if valid_rows else None,
        eos_index=None if x.eos_index is None else x.eos_index + p,
        prompt_start=starts,
        n_prompts=p,
    )


def _replace_rows(x: TokenSequence, prompts: torch.Tensor) -> TokenSequence:
    b, p = x.tokens.shape[0], prompts.shape[0]
    idx = x.prompt_start[:, None] + torch.arange(p, device=x.tokens.device)
    tokens = x.tokens.clone()
    tokens[torch.arange(b)[:, None], idx] = prompts.to(tokens.dtype).expand(b, p, -1)
    return x.replace(tokens=tokens)


def prompt_prepend(x: TokenSequence, prompts: torch.Tensor, layer: int, depth: str = "shallow",
                   position: str = "end", context_length: int | None = None) -> TokenSequence:
    """Insert learnable prompt rows at layer 0; deep prompts replace them at later layers.

    Image prompts go right after CLS. Text prompts go just before EOS
    (``end``) or in the middle of the content words (``mid``).
    """
    p = prompts.shape[0]
    if p == 0:
        return x
    if layer > 0:
        if depth == "deep" and x.n_prompts:
            return _replace_rows(x, prompts)
        return x
    b = x.tokens.shape[0]
    if x.modality == "image":
        starts = torch.ones(b, dtype=torch.long, device=x.tokens.device)
    else:
        eos = x.eos_index
        if context_length is not None and int(eos.max()) + 1 + p > context_length:
            raise InputError(
                f"{p} prompt tokens overflow context_length {context_length} for a {int(eos.max()) + 1}-token text"
            )
        starts = eos.clone() if position == "end" else 1 + (eos - 1) // 2
    return _insert_rows(x, prompts, starts)


class PromptTuning(PetlModule):
    """Learnable prompt tokens for the text tower, the image tower, or both."""

    def __init__(self, cfg: EncoderConfig, kind: str, text_length: int, visual_length: int,
                 depth: str, position: str = "end"):
        super().__init__()
        self.kind = kind
        self.depth = depth
        self.position = position
        self.context_length = cfg.context_length
        blocks = cfg.layers if depth == "deep" else 1
        self.prompts = nn.ModuleDict()
        if text_length:
            self.prompts["text"] = nn.ParameterList(
                nn.Parameter(torch.zeros(text_length, cfg.text_width)) for _ in range(blocks)
            )
        if visual_length:
            self.prompts["vision"] = nn.ParameterList(
                nn.Parameter(torch.zeros(visual_length, cfg.vision_width)) for _ in range(blocks)
            )

    def apply_prompts(self, x, layer, model):
        branch = BRANCH[x.modality]
        if branch not in self.prompts:
            return x
        bank = self.prompts[branch]
        if layer > 0 and self.depth != "deep":
            return x
        return prompt_prepend(x, bank[layer if self.depth == "deep" else 0], layer, self.depth,
                              self.position, self.context_length)


class LinearProbe(PetlModule):
    """One D x D linear head per tower after the frozen projection, identity-initialised."""

    kind = "linear_probe"

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.heads = nn.ModuleDict({b: nn.Linear(cfg.embed_dim, cfg.embed_dim) for b in ("vision", "text")})

    def head(self, branch, z):
        return self.heads[branch](z)


# --------------------------------------------------------------- attachment

def build_petl_module(cfg: EncoderConfig, strategy: PetlStrategy) -> PetlModule | None:
    kind = strategy.kind
    hp = strategy.resolved()
    if kind in ("zero_shot", "full_finetune"):
        return None
    if kind == "linear_probe":
        return LinearProbe(cfg)
    if kind == "adapter_sequential":
        return SequentialAdapter(cfg, int(hp["d"]), float(hp["scale"]), hp["branches"])
    if kind == "mrs_adapter":
        return MrsAdapter(cfg, int(hp["d"]), int(hp["r"]), bool(hp["tie_across_layers"]))
    if kind == "mrs_no_share":
        return MrsAdapter(cfg, int(hp["d"]), int(hp["r"]), bool(hp["tie_across_layers"]),
                          share=False, branches=hp["branches"])
    length = int(hp["prompt_length"])
    if length < 0:
        raise ConfigError("prompt_length must be >= 0")
    if kind == "text_prompt":
        return PromptTuning(cfg, kind, length, 0, hp["prompt_depth"], hp["prompt_position"])
    if kind == "visual_prompt":
        return PromptTuning(cfg, kind, 0, length, hp["prompt_depth"])
    visual = hp["visual_prompt_length"]
    visual = length if visual is None else int(visual)
    return PromptTuning(cfg, kind, length, visual, hp["prompt_depth"], hp["prompt_position"])


def _init_petl(module: PetlModule, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.split(".")[-1]
            if isinstance(module, LinearProbe):
                if leaf == "weight":
                    p.copy_(torch.eye(p.shape[0], dtype=p.dtype))
                else:
                    p.zero_()
            elif leaf.startswith("down"):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * ADAPTER_DOWN_STD)
            elif isinstance(module, PromptTuning):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * PROMPT_STD)
            else:
                p.zero_()


def attach_strategy(model: DualEncoder, strategy: PetlStrategy, seed: int = 0) -> DualEncoder:
    """Attach the strategy's module (replacing any previous one) and set trainability flags."""
    ref = model.text.proj
    with torch.device(ref.device):
        module = build_petl_module(model.config, strategy)
    if module is not None:
        module = module.to(ref.dtype)
        if ref.device.type != "meta":
            _init_petl(module, seed)
    model.petl = module
    model.strategy = strategy
    full = strategy.kind == "full_finetune"
    for _, p in model.backbone_parameters():
        p.requires_grad_(full)
    if module is not None:
        for p in module.parameters():
            p.requires_grad_(True)
    return model


@dataclass
class ParamReport:
    trainable: int
    total: int
    reduction_pct: float


def trainable_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def count_parameters(model: DualEncoder) -> ParamReport:
    """Exact counts; the reduction is relative to full fine-tuning of the same backbone."""
    trainable = sum(p.numel() for _, p in trainable_parameters(model))
    total = sum(p.numel() for p in model.parameters())
    backbone = sum(p.numel() for _, p in model.backbone_parameters())
    return ParamReport(trainable, total, 100.0 * (1.0 - trainable / backbone))
