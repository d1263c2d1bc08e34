"""Convert OpenAI CLIP ViT-B/32 weights into a backbone checkpoint.

    python3 scripts/convert_clip_checkpoint.py ViT-B-32.pt checkpoints/clip_vit_b32.safetensors

Accepts the TorchScript archive from the official release or a plain state
dict saved with ``torch.save``.
"""

import argparse

import torch

from petl_retrieval.config import EncoderConfig
from petl_retrieval.encoder import build_model, convert_clip_state_dict, save_checkpoint


def load_state(path: str) -> dict:
    try:
        return torch.jit.load(path, map_location="cpu").state_dict()
    except RuntimeError:
        state = torch.load(path, map_location="cpu", weights_only=True)
        return state.get("state_dict", state)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("source")
    parser.add_argument("out")
    args = parser.parse_args()

    model = build_model(EncoderConfig())
    missing, unexpected = model.load_state_dict(convert_clip_state_dict(load_state(args.source)), strict=False)
    if missing or unexpected:
        raise SystemExit(f"name mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    save_checkpoint(model, args.out, metadata={"source": args.source})
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
