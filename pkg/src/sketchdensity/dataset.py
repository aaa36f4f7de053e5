"""On-disk dataset layout, synthetic corpus materialisation and loading.

Layout under a dataset root::

    images/<id>.png               8-bit RGB
    annotations/<id>.json         {"polylines": [[[x, y], ...], ...], "label_mask": "label_masks/<id>.png"}
    label_masks/<id>.png          8- or 16-bit label image
    sketches/level<k>/<id>.png    8-bit grayscale, 255 = ink
    manifest.jsonl                one sorted JSON record per id
    synth-spec.json               corpus parameters (synthetic corpora only)

Sketches are extracted from the 8-bit image exactly as stored, so ingestion
and generation see identical pixels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, DataError
from .sketch_extraction import (
    AnnotationRecord,
    KeyDensitySketchSet,
    build_key_density_set,
    default_level_specs,
)
from .synthetic_data import corpus_specs, generate_scene

MANIFEST = "manifest.jsonl"
SYNTH_SPEC = "synth-spec.json"


def quantize(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_png(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype == np.uint16:
        im = Image.fromarray(arr.astype(np.uint16), mode="I;16")
    else:
        im = Image.fromarray(arr)
    # fixed encoder settings and no metadata keep bytes reproducible
    im.save(path, format="PNG", optimize=False, compress_level=6)


def read_sketch(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.float32)


def read_label_mask(path):
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int32)


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_record(root, record_id, split, image_u8, annotation, key_set):
    root = Path(root)
    write_png(root / "images" / f"{record_id}.png", image_u8)
    ann = {"polylines": [np.asarray(p, dtype=float).tolist() for p in annotation.polylines]}
    if annotation.label_mask is not None:
        lm = np.asarray(annotation.label_mask)
        dtype = np.uint8 if lm.max(initial=0) < 256 else np.uint16
        write_png(root / "label_masks" / f"{record_id}.png", lm.astype(dtype))
        ann["label_mask"] = f"label_masks/{record_id}.png"
    ann_path = root / "annotations" / f"{record_id}.json"
    ann_path.parent.mkdir(parents=True, exist_ok=True)
    ann_path.write_text(json.dumps(ann, sort_keys=True))
    sketch_hashes = []
    for k, sketch in enumerate(key_set.sketches, start=1):
        p = root / "sketches" / f"level{k}" / f"{record_id}.png"
        write_png(p, (sketch > 0.5).astype(np.uint8) * 255)
        sketch_hashes.append(_sha(p))
    h, w = image_u8.shape[:2]
    return {
        "id": record_id,
        "split": split,
        "resolution": [h, w],
        "levels": list(range(1, len(key_set) + 1)),
        "densities": list(key_set.densities),
        "image_sha256": _sha(root / "images" / f"{record_id}.png"),
        "sketch_sha256": sketch_hashes,
    }


def _write_manifest(root, records):
    lines = [json.dumps(r, sort_keys=True) for r in sorted(records, key=lambda r: r["id"])]
    (Path(root) / MANIFEST).write_text("\n".join(lines) + "\n")


def prepare_synthetic(root, num_train=512, num_eval=64, resolution=64, seed=0,
                      texture_range=(0.5, 1.0), level_specs=None):
    """Generate, extract and write a synthetic corpus; returns the dataset digest."""
    root = Path(root)
    specs = level_specs or default_level_specs()
    records = []
    for record_id, split, spec in corpus_specs(num_train, num_eval, (resolution, resolution),
                                               seed, texture_range):
        scene = generate_scene(spec)
        image_u8 = quantize(scene.image)
        key_set = build_key_density_set(image_u8 / 255.0, scene.annotation, specs, record_id)
        records.append(_write_record(root, record_id, split, image_u8, scene.annotation, key_set))
    _write_manifest(root, records)
    (root / SYNTH_SPEC).write_text(json.dumps({
        "num_train": num_train, "num_eval": num_eval, "resolution": resolution, "seed": seed,
        "texture_range": list(texture_range),
        "levels": [{"kind": s.kind, "density": s.density} for s in specs],
    }, sort_keys=True, indent=1))
    return dataset_digest(root)


def ingest_external(source, root, level_specs=None, eval_fraction=0.1):
    """Extract key sketches for an ``images/`` + ``annotations/`` directory.

    Every id is validated before anything is written; the first offending id
    in sorted order is reported through :class:`DataError`.
    """
    source, root = Path(source), Path(root)
    specs = level_specs or default_level_specs()
    needs_polylines = any(s.kind == "polyline" for s in specs)
    needs_mask = any(s.kind == "contour" for s in specs)
    images = sorted((source / "images").glob("*.png"))
    if not images:
        raise ConfigurationError(f"no images under {source / 'images'}")
    loaded = []
    for path in images:
        rid = path.stem
        ann_path = source / "annotations" / f"{rid}.json"
        polylines, mask = [], None
        if ann_path.is_file():
            try:
                ann = json.loads(ann_path.read_text())
            except json.JSONDecodeError as exc:
                raise DataError(rid, f"malformed annotation JSON ({exc})") from None
            polylines = ann.get("polylines", [])
            if ann.get("label_mask"):
                mask_path = source / ann["label_mask"]
                if not mask_path.is_file():
                    raise DataError(rid, f"label mask file missing: {ann['label_mask']}")
                mask = read_label_mask(mask_path)
        elif needs_polylines or needs_mask:
            raise DataError(rid, "annotation file missing")
        if needs_mask and mask is None:
            raise DataError(rid, "label mask required by the contour level but absent")
        image = read_image(path)
        if mask is not None and mask.shape != image.shape[:2]:
            raise DataError(rid, "label mask resolution differs from image")
        try:
            annotation = AnnotationRecord(polylines, mask)
            key_set = build_key_density_set(image, annotation, specs, rid)
        except (ValueError, TypeError) as exc:
            raise DataError(rid, str(exc)) from None
        loaded.append((rid, image, annotation, key_set))
    n_eval = int(round(eval_fraction * len(loaded)))
    records = []
    for i, (rid, image, annotation, key_set) in enumerate(loaded):
        split = "eval" if i >= len(loaded) - n_eval else "train"
        records.append(_write_record(root, rid, split, quantize(image), annotation, key_set))
    _write_manifest(root, records)
    return dataset_digest(root)


def dataset_digest(root):
    """SHA-256 of the manifest, which itself hashes every stored file."""
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise ConfigurationError(f"no dataset manifest at {path}")
    return _sha(path)


def read_manifest(root):
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise ConfigurationError(f"no dataset manifest at {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@dataclass
class SketchDataset:
    """In-memory split: images (N,3,H,W), sketches (N,L,H,W) in {0,1}."""

    ids: list
    images: torch.Tensor
    sketches: torch.Tensor
    densities: tuple

    def __len__(self):
        return len(self.ids)

    def key_set(self, index):
        return KeyDensitySketchSet(list(self.densities),
                                   [s.numpy() for s in self.sketches[index]], self.ids[index])


def load_split(root, split, limit=None):
    root = Path(root)
    records = [r for r in read_manifest(root) if r["split"] == split]
    if limit is not None:
        records = records[:limit]
    if not records:
        raise ConfigurationError(f"dataset at {root} has no '{split}' records")
    densities = tuple(records[0]["densities"])
    images, sketches = [], []
    for r in records:
        if tuple(r["densities"]) != densities:
            raise DataError(r["id"], "key densities differ from the rest of the dataset")
        img_path = root / "images" / f"{r['id']}.png"
        if not img_path.is_file():
            raise DataError(r["id"], "image file missing")
        images.append(read_image(img_path).transpose(2, 0, 1))
        levels = []
        for k in r["levels"]:
            p = root / "sketches" / f"level{k}" / f"{r['id']}.png"
            if not p.is_file():
                raise DataError(r["id"], f"sketch level {k} missing")
            levels.append(read_sketch(p))
        sketches.append(np.stack(levels))
    return SketchDataset([r["id"] for r in records], torch.from_numpy(np.stack(images)),
                         torch.from_numpy(np.stack(sketches)), densities)
