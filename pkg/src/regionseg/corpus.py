"""Corpus manifests: loading, validation and converters from upstream formats.

Manifest schema (version 1)::

    {
      "version": 1,
      "categories": ["..."],                  # optional
      "samples": [
        {
          "id": "unique id",
          "image": "relative/or/absolute/path.png",
          "query": "free-form query text",
          "split": "val" | "test" | "short_query" | "long_query",
          "category": "name" | null,           # optional
          "annotations": [
            {"type": "polygon", "data": [[x0, y0, x1, y1, ...], ...]},
            {"type": "rle", "data": {"width": w, "height": h, "counts": [...]}}
          ]
        }
      ]
    }

Each annotation is one ground-truth instance. Polygon rings are filled with
the even-odd rule one ring at a time and the rings of an annotation are
unioned. An empty ``annotations`` list marks a sample whose target is absent.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import CorpusError, FormatError
from .masks import BinaryMask, coco_string_to_counts, rasterize_polygons, rle_decode

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("val", "test", "short_query", "long_query")


@dataclass
class Sample:
    id: str
    image_path: Path
    query: str
    width: int
    height: int
    gt_masks: List[BinaryMask] = field(default_factory=list)
    split: str = "val"
    category: Optional[str] = None

    def load_image(self) -> np.ndarray:
        with Image.open(self.image_path) as img:
            return np.asarray(img.convert("RGB"))

    def gt_union(self) -> BinaryMask:
        return BinaryMask.union(self.gt_masks, self.width, self.height)


@dataclass
class Corpus:
    samples: List[Sample]
    errors: List[Tuple[str, str]] = field(default_factory=list)
    categories: List[str] = field(default_factory=list)
    manifest_path: Optional[Path] = None

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> Sample:
        return self.samples[idx]

    def by_id(self) -> Dict[str, Sample]:
        return {s.id: s for s in self.samples}


def decode_annotation(ann: dict, width: int, height: int) -> BinaryMask:
    kind = ann.get("type")
    data = ann.get("data")
    if kind == "polygon":
        if not isinstance(data, list) or not data:
            raise FormatError("polygon data must be a non-empty list")
        rings = data if isinstance(data[0], list) else [data]
        out = np.zeros((height, width), dtype=bool)
        for ring in rings:
            out |= rasterize_polygons([ring], width, height).bits
        return BinaryMask(out)
    if kind == "rle":
        if not isinstance(data, dict):
            raise FormatError("rle data must be an object")
        counts = data.get("counts")
        if isinstance(counts, str):
            counts = coco_string_to_counts(counts)
        w, h = data.get("width"), data.get("height")
        if (w, h) != (width, height):
            raise FormatError(f"RLE dims {(w, h)} do not match image dims {(width, height)}")
        if not isinstance(counts, list):
            raise FormatError("rle counts must be a list")
        return rle_decode(counts, (width, height))
    raise FormatError(f"unknown annotation type {kind!r}")


def _image_size(path: Path) -> Tuple[int, int]:
    # Image.open only parses the header; pixels load lazily later
    with Image.open(path) as img:
        return img.size


def _parse_entry(entry: dict, root: Path) -> Sample:
    if not isinstance(entry, dict):
        raise FormatError("sample entry must be an object")
    for key in ("id", "image", "query"):
        if not isinstance(entry.get(key), str) or not entry[key]:
            raise FormatError(f"missing or empty field {key!r}")
    split = entry.get("split", "val")
    if split not in SPLITS:
        raise FormatError(f"unknown split {split!r}")
    path = Path(entry["image"])
    if not path.is_absolute():
        path = root / path
    if not path.is_file():
        raise FormatError(f"image file not found: {path}")
    width, height = _image_size(path)
    anns = entry.get("annotations")
    if anns is None:
        anns = [entry["annotation"]] if entry.get("annotation") else []
    if not isinstance(anns, list):
        raise FormatError("annotations must be a list")
    masks = [decode_annotation(a, width, height) for a in anns]
    return Sample(
        id=entry["id"],
        image_path=path,
        query=entry["query"],
        width=width,
        height=height,
        gt_masks=masks,
        split=split,
        category=entry.get("category"),
    )


def load_corpus(root: str | os.PathLike, manifest: str | os.PathLike | None = None) -> Corpus:
    """Load a manifest; bad entries are collected in ``Corpus.errors``.

    Image paths are resolved against ``root``. ``manifest`` defaults to
    ``root/manifest.json``. Raises :class:`CorpusError` if the manifest is
    unreadable or no entry survives.
    """
    root = Path(root)
    manifest_path = Path(manifest) if manifest is not None else root / "manifest.json"
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CorpusError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("samples"), list):
        raise CorpusError("manifest must be an object with a 'samples' list")
    if doc.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise CorpusError(f"unsupported manifest version {doc.get('version')!r}")

    samples: List[Sample] = []
    errors: List[Tuple[str, str]] = []
    seen = set()
    for idx, entry in enumerate(doc["samples"]):
        sid = entry.get("id", f"#{idx}") if isinstance(entry, dict) else f"#{idx}"
        try:
            sample = _parse_entry(entry, root)
            if sample.id in seen:
                raise FormatError(f"duplicate sample id {sample.id!r}")
        except (FormatError, OSError, ValueError) as exc:
            errors.append((str(sid), str(exc)))
            log.warning("skipping sample %s: %s", sid, exc)
            continue
        seen.add(sample.id)
        samples.append(sample)
    if not samples:
        raise CorpusError(f"no valid samples in {manifest_path} ({len(errors)} errors)")
    categories = doc.get("categories") or sorted({s.category for s in samples if s.category})
    return Corpus(samples=samples, errors=errors, categories=list(categories), manifest_path=manifest_path)


def write_manifest(path: str | os.PathLike, entries: Sequence[dict], categories: Sequence[str] = ()) -> None:
    doc = {"version": MANIFEST_VERSION, "samples": list(entries)}
    if categories:
        doc["categories"] = list(categories)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, ensure_ascii=False)
        fh.write("\n")


# --------------------------------------------------------------------------- converters

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


def import_reasonseg(src_dir: str | os.PathLike, split: str = "val", by_query_length: bool = False) -> List[dict]:
    """Convert a ReasonSeg split directory (``name.jpg`` + ``name.json``).

    Each query sentence becomes its own sample; every ``target`` shape is one
    annotation. Shapes labelled ``ignore`` are dropped.
    """
    src = Path(src_dir)
    entries = []
    for js in sorted(src.glob("*.json")):
        with open(js, encoding="utf-8") as fh:
            meta = json.load(fh)
        image = next((js.with_suffix(s) for s in IMAGE_SUFFIXES if js.with_suffix(s).is_file()), None)
        if image is None:
            log.warning("no image for %s", js.name)
            continue
        texts = meta.get("text") or []
        if isinstance(texts, str):
            texts = [texts]
        anns = []
        for shape in meta.get("shapes", []):
            if shape.get("label", "target").lower() == "ignore":
                continue
            flat = [float(v) for pt in shape.get("points", []) for v in pt]
            if len(flat) >= 6:
                anns.append({"type": "polygon", "data": [flat]})
        entry_split = split
        if by_query_length:
            entry_split = "long_query" if meta.get("is_sentence") else "short_query"
        for k, text in enumerate(texts):
            entries.append({
                "id": f"{js.stem}#{k}" if len(texts) > 1 else js.stem,
                "image": image.name,
                "query": text,
                "split": entry_split,
                "category": None,
                "annotations": anns,
            })
    return entries


def import_coco(coco_json: str | os.PathLike, split: str = "val") -> Tuple[List[dict], List[str]]:
    """Convert COCO instance annotations into one sample per (image, category).

    The query is the category name, as in open-vocabulary evaluation.
    """
    with open(coco_json, encoding="utf-8") as fh:
        coco = json.load(fh)
    cats = {c["id"]: c["name"] for c in coco.get("categories", [])}
    by_image: Dict[int, Dict[int, List[dict]]] = {}
    for ann in coco.get("annotations", []):
        if ann.get("iscrowd"):
            continue
        by_image.setdefault(ann["image_id"], {}).setdefault(ann["category_id"], []).append(ann)
    entries = []
    for img in sorted(coco.get("images", []), key=lambda i: i["id"]):
        for cat_id in sorted(by_image.get(img["id"], {})):
            anns = []
            for ann in by_image[img["id"]][cat_id]:
                seg = ann.get("segmentation")
                if isinstance(seg, list):
                    anns.append({"type": "polygon", "data": [list(map(float, p)) for p in seg]})
                elif isinstance(seg, dict):
                    h, w = seg["size"]
                    counts = seg["counts"]
                    if isinstance(counts, str):
                        counts = coco_string_to_counts(counts)
                    anns.append({"type": "rle", "data": {"width": w, "height": h, "counts": counts}})
            entries.append({
                "id": f"{img['id']}:{cat_id}",
                "image": img["file_name"],
                "query": cats.get(cat_id, str(cat_id)),
                "split": split,
                "category": cats.get(cat_id, str(cat_id)),
                "annotations": anns,
            })
    return entries, [cats[k] for k in sorted(cats)]
