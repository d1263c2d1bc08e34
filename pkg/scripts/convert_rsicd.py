"""Turn the RSICD annotation file into a dataset manifest.

RSICD ships ``dataset_rsicd.json`` in the Karpathy layout::

    {"images": [{"filename": "airport_1.jpg", "split": "train",
                 "sentences": [{"raw": "..."}, ...]}, ...]}

    python3 scripts/convert_rsicd.py dataset_rsicd.json RSICD_images/ data/rsicd/manifest.json

By default the official split is dropped so that training reshuffles 80/10/10
per fold; pass ``--keep-split`` to keep it.
"""

import argparse
import json
import os
from pathlib import Path

from petl_retrieval.data import load_manifest


def convert(annotations: dict, image_dir: Path, manifest_dir: Path, keep_split: bool) -> dict:
    items = []
    for entry in annotations["images"]:
        captions = [s["raw"].strip() for s in entry.get("sentences", []) if s.get("raw", "").strip()]
        item = {
            "image_id": Path(entry["filename"]).stem,
            "image_path": os.path.relpath(image_dir / entry["filename"], manifest_dir),
            "captions": captions,
        }
        if keep_split:
            item["split"] = {"restval": "train"}.get(entry["split"], entry["split"])
        items.append(item)
    return {"version": 1, "items": items}


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("annotations")
    parser.add_argument("image_dir")
    parser.add_argument("out")
    parser.add_argument("--keep-split", action="store_true")
    args = parser.parse_args()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.annotations) as fh:
        manifest = convert(json.load(fh), Path(args.image_dir).resolve(), out.parent.resolve(), args.keep_split)
    out.write_text(json.dumps(manifest))
    # validate what we wrote: ids, captions and image files
    print(f"{len(load_manifest(out))} images written to {out}")


if __name__ == "__main__":
    main()
