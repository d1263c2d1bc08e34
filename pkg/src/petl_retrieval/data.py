"""Manifests, splitting, image preprocessing, tokenisation, toy data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import ToyDatasetConfig
from .encoder import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from .errors import ConfigError, InputError

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

# Toy PNG export maps [-3, 3] onto [0, 255]; these constants undo it.
TOY_PNG_MEAN = (0.5, 0.5, 0.5)
TOY_PNG_STD = (1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0)


@dataclass
class ManifestItem:
    image_id: str
    captions: list[str]
    image_path: str | None = None
    split: str | None = None
    label: int | None = None
    image: np.ndarray | None = field(default=None, repr=False)


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    root: Path | None = None
    normalization: dict | None = None

    def __len__(self) -> int:
        return len(self.items)

    def captions(self) -> tuple[list[str], list[int]]:
        """Flattened captions with the index of their image in ``items``."""
        texts, owner = [], []
        for i, item in enumerate(self.items):
            texts.extend(item.captions)
            owner.extend([i] * len(item.captions))
        return texts, owner

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self.items[i] for i in indices], self.root, self.normalization)

    def to_json(self) -> dict:
        out = {"version": MANIFEST_VERSION, "items": []}
        if self.normalization:
            out["normalization"] = self.normalization
        for item in self.items:
            entry = {"image_path": item.image_path, "image_id": item.image_id, "captions": item.captions}
            if item.split:
                entry["split"] = item.split
            if item.label is not None:
                entry["label"] = item.label
            out["items"].append(entry)
        return out


def validate_manifest(manifest: DatasetManifest) -> None:
    seen: dict[str, int] = {}
    for idx, item in enumerate(manifest.items):
        if item.image_id in seen:
            raise InputError(f"item {idx}: duplicate image_id {item.image_id!r} (first at item {seen[item.image_id]})")
        seen[item.image_id] = idx
        if not item.captions or any(not str(c).strip() for c in item.captions):
            raise InputError(f"item {idx} ({item.image_id!r}): needs at least one nonempty caption")
        if item.split is not None and item.split not in SPLITS:
            raise InputError(f"item {idx}: unknown split {item.split!r}")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise InputError(f"manifest {path} is not valid JSON: {exc}") from exc
    entries = raw["items"] if isinstance(raw, dict) else raw
    if not isinstance(entries, list):
        raise InputError("manifest must hold a list of items")
    items = []
    for idx, entry in enumerate(entries):
        try:
            items.append(ManifestItem(
                image_id=str(entry["image_id"]),
                captions=[str(c) for c in entry["captions"]],
                image_path=entry.get("image_path"),
                split=entry.get("split"),
                label=entry.get("label"),
            ))
        except (KeyError, TypeError) as exc:
            raise InputError(f"item {idx}: malformed entry ({exc})") from exc
    manifest = DatasetManifest(items, path.parent, raw.get("normalization") if isinstance(raw, dict) else None)
    validate_manifest(manifest)
    if check_files:
        missing = [it.image_path for it in items if not it.image_path or not (path.parent / it.image_path).exists()]
        if missing:
            raise InputError(f"{len(missing)} image files missing, e.g. {missing[:3]}")
    return manifest


def split_dataset(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Train/val/test manifests. Preassigned splits are honoured as-is.

    Otherwise a seeded shuffle is cut with floor(n * ratio) for val and test
    and the remainder goes to train.
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three nonnegative values summing to 1, got {ratios}")
    assigned = [it.split for it in manifest.items]
    if any(s is not None for s in assigned):
        if any(s is None for s in assigned):
            raise InputError("manifest mixes items with and without a preassigned split")
        return tuple(
            manifest.subset([i for i, s in enumerate(assigned) if s == name]) for name in SPLITS
        )
    n = len(manifest)
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_val - n_test
    return (
        manifest.subset(order[:n_train].tolist()),
        manifest.subset(order[n_train:n_train + n_val].tolist()),
        manifest.subset(order[n_train + n_val:].tolist()),
    )


def preprocess_image(raw, target_size: int, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Bilinear resize to target x target, then per-channel (x - mean) / std.

    ``raw`` is a path, a PIL image, or an H x W x 3 array. uint8 data is
    scaled to [0, 1] first; float arrays are used as given.
    """
    if isinstance(raw, (str, Path)):
        try:
            with Image.open(raw) as im:
                raw = im.convert("RGB")
                raw.load()
        except (OSError, UnidentifiedImageError) as exc:
            raise InputError(f"cannot decode image {raw}: {exc}") from exc
    if isinstance(raw, Image.Image):
        raw = np.asarray(raw.convert("RGB"))
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected an H x W x 3 image, got shape {arr.shape}")
    data = arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)
    if data.shape[:2] != (target_size, target_size):
        channels = [
            np.asarray(Image.fromarray(data[:, :, c], mode="F").resize((target_size, target_size), Image.BILINEAR))
            for c in range(3)
        ]
        data = np.stack(channels, axis=-1)
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return (data - mean) / std


# --------------------------------------------------------------- tokenising

class Vocabulary:
    """Whitespace vocabulary with fixed special ids (PAD, BOS, EOS, UNK)."""

    specials = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, words: Sequence[str] = ()):
        self.itos = list(self.specials)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def get(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocabulary":
        return cls(sorted({w for t in texts for w in t.lower().split()}))


def tokenize(text: str, vocab, context_length: int) -> list[int]:
    """Lowercase, split on whitespace, map to ids, wrap in BOS/EOS.

    ``vocab`` is a ``Vocabulary`` or a plain word -> id mapping. Long texts
    are truncated so the result has at most ``context_length`` ids and
    still ends in EOS.
    """
    words = str(text).lower().split()
    if not words:
        raise InputError("cannot tokenize empty text")
    if context_length < 3:
        raise ConfigError("context_length must be >= 3")
    lookup = vocab.get if isinstance(vocab, Vocabulary) else (lambda w: vocab.get(w, UNK_ID))
    ids = [lookup(w) for w in words[: context_length - 2]]
    return [BOS_ID, *ids, EOS_ID]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.itos[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID))


# ---------------------------------------------------------------- toy data

_FILLERS = ("a", "the", "there", "is", "are", "some", "many", "in", "near", "with", "of", "and")


def synthesize_toy_dataset(cfg: ToyDatasetConfig) -> DatasetManifest:
    """Class prototypes plus Gaussian noise; captions drawn from class-specific templates.

    Each class owns a disjoint slice of content words, so a caption
    identifies its class and nothing else.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_content = cfg.vocab_size - len(_FILLERS)
    per_class = n_content // cfg.n_classes
    if per_class < 3:
        raise ConfigError(f"vocab_size {cfg.vocab_size} leaves fewer than 3 words per class")
    items: list[ManifestItem] = []
    shape = (cfg.image_size, cfg.image_size, cfg.channels)
    for c in range(cfg.n_classes):
        words = [f"w{c * per_class + k}" for k in range(per_class)]
        bank = []
        for _ in range(cfg.templates_per_class):
            content = rng.choice(words, size=3, replace=False)
            fillers = rng.choice(_FILLERS, size=2, replace=False)
            bank.append(f"{fillers[0]} {content[0]} {fillers[1]} {content[1]} {content[2]}")
        prototype = rng.standard_normal(shape).astype(np.float32)
        for i in range(cfg.items_per_class):
            image = prototype + cfg.noise_std * rng.standard_normal(shape).astype(np.float32)
            replace = cfg.captions_per_image > len(bank)
            picks = rng.choice(len(bank), size=cfg.captions_per_image, replace=replace)
            items.append(ManifestItem(
                image_id=f"c{c:02d}_{i:03d}",
                captions=[bank[k] for k in picks],
                label=c,
                image=image,
            ))
    return DatasetManifest(items)


def export_toy_dataset(manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Write PNG images plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for item in manifest.items:
        if item.image is None:
            raise InputError(f"item {item.image_id} has no in-memory image to export")
        pixels = np.clip((item.image + 3.0) / 6.0 * 255.0, 0, 255).round().astype(np.uint8)
        if pixels.shape[2] == 1:
            pixels = np.repeat(pixels, 3, axis=2)
        item.image_path = f"images/{item.image_id}.png"
        Image.fromarray(pixels[:, :, :3]).save(out / item.image_path)
    manifest.normalization = {"mean": list(TOY_PNG_MEAN), "std": list(TOY_PNG_STD)}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=1))
    return path


def load_images(manifest: DatasetManifest, size: int, mean, std) -> np.ndarray:
    """(N, size, size, 3) float32 array in manifest order."""
    out = np.empty((len(manifest), size, size, 3), dtype=np.float32)
    for i, item in enumerate(manifest.items):
        if item.image is not None:
            raw = item.image
            if raw.shape[2] == 1:
                raw = np.repeat(raw, 3, axis=2)
            out[i] = preprocess_image(raw, size, mean, std)
        else:
            root = manifest.root or Path(".")
            out[i] = preprocess_image(root / item.image_path, size, mean, std)
    return out


@dataclass
class RetrievalSplit:
    """Preprocessed images and tokenised captions of one split."""

    images: np.ndarray
    token_ids: list[list[int]]
    caption_to_image: np.ndarray
    image_ids: list[str]

    @property
    def n_images(self) -> int:
        return len(self.image_ids)


def prepare_split(manifest: DatasetManifest, vocab, image_size: int, context_length: int,
                  mean, std) -> RetrievalSplit:
    texts, owner = manifest.captions()
    return RetrievalSplit(
        images=load_images(manifest, image_size, mean, std),
        token_ids=[tokenize(t, vocab, context_length) for t in texts],
        caption_to_image=np.asarray(owner, dtype=np.int64),
        image_ids=[it.image_id for it in manifest.items],
    )
