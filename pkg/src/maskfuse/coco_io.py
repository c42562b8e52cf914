"""COCO dataset / results JSON and the compressed RLE string codec.

Only the subset of the COCO schema this package needs is read: ``images``
(id, width, height, file_name), ``annotations`` with RLE segmentations, and
``categories``.  Masks cross the file boundary as compressed count strings;
in memory they are :class:`~maskfuse.masks.RleMask` objects until a consumer
needs dense bits.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from ._backend import kernels
from .copypaste import DatasetSample, Instance
from .errors import MalformedRLE, SchemaError
from .masks import InstancePrediction, PredictionSet, RleMask, mask_area, rle_decode, rle_encode


def encode_rle_string(rle: RleMask) -> str:
    return kernels.rle_to_string(np.ascontiguousarray(rle.counts, dtype=np.int64)).decode("ascii")


def decode_rle_string(counts: str, height: int, width: int) -> RleMask:
    raw = counts.encode("ascii") if isinstance(counts, str) else bytes(counts)
    try:
        values = kernels.rle_from_string(raw)
    except ValueError as exc:
        raise MalformedRLE(str(exc)) from None
    return RleMask(height, width, values)


def to_rle(mask) -> RleMask:
    return mask if isinstance(mask, RleMask) else rle_encode(mask)


def segmentation_to_json(mask) -> dict:
    rle = to_rle(mask)
    return {"size": [rle.height, rle.width], "counts": encode_rle_string(rle)}


def _bbox(rle: RleMask):
    if rle.area() == 0:
        return [0, 0, 0, 0]
    ys, xs = np.nonzero(rle_decode(rle).bits)
    return [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)]


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    file_name: str = ""


@dataclass
class CocoDataset:
    images: dict  # image id -> ImageInfo
    categories: list  # [{"id": ..., "name": ...}]
    instances: dict = field(default_factory=dict)  # image id -> tuple[Instance]

    def ground_truth(self):
        return {i: tuple(self.instances.get(i, ())) for i in sorted(self.images)}

    def __eq__(self, other):
        if not isinstance(other, CocoDataset):
            return NotImplemented
        return (
            self.images == other.images
            and self.categories == other.categories
            and self._canonical() == other._canonical()
        )

    def _canonical(self):
        # RLE is canonical, so dense and run-length masks compare alike
        return {
            i: tuple((inst.category_id, inst.instance_id, to_rle(inst.mask)) for inst in insts)
            for i, insts in self.ground_truth().items()
        }


def _require(obj, key, kind, path, source):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing field {key!r}", path, source)
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise SchemaError(f"field {key!r} must be an integer", f"{path}.{key}", source)
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise SchemaError(f"field {key!r} must be a number", f"{path}.{key}", source)
    if kind in (list, dict, str) and not isinstance(value, kind):
        raise SchemaError(f"field {key!r} must be a {kind.__name__}", f"{path}.{key}", source)
    return value


def parse_segmentation(seg, path, source=None) -> RleMask:
    if isinstance(seg, list):
        raise SchemaError("polygon segmentations are not supported; use RLE", path, source)
    size = _require(seg, "size", list, path, source)
    if len(size) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in size):
        raise SchemaError("size must be [height, width]", f"{path}.size", source)
    counts = _require(seg, "counts", None, path, source)
    try:
        if isinstance(counts, str):
            return decode_rle_string(counts, size[0], size[1])
        if isinstance(counts, list):
            return RleMask(size[0], size[1], counts)
    except MalformedRLE as exc:
        raise SchemaError(f"malformed RLE: {exc}", f"{path}.counts", source) from None
    raise SchemaError("counts must be a string or a list of integers", f"{path}.counts", source)


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON ({exc.msg})", f"line {exc.lineno} column {exc.colno}", str(path)) from None


def _dump_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def parse_dataset(doc, source=None) -> CocoDataset:
    if not isinstance(doc, dict):
        raise SchemaError("dataset must be a JSON object", "$", source)
    images = {}
    for k, im in enumerate(_require(doc, "images", list, "$", source)):
        p = f"images[{k}]"
        info = ImageInfo(
            id=_require(im, "id", int, p, source),
            width=_require(im, "width", int, p, source),
            height=_require(im, "height", int, p, source),
            file_name=im.get("file_name", "") if isinstance(im, dict) else "",
        )
        if info.id in images:
            raise SchemaError(f"duplicate image id {info.id}", p, source)
        if info.width < 1 or info.height < 1:
            raise SchemaError("image size must be at least 1x1", p, source)
        images[info.id] = info
    categories = []
    for k, cat in enumerate(doc.get("categories", [])):
        p = f"categories[{k}]"
        cid = _require(cat, "id", int, p, source)
        categories.append({"id": cid, "name": str(cat.get("name", cid))})
    instances = {}
    for k, ann in enumerate(doc.get("annotations", [])):
        p = f"annotations[{k}]"
        image_id = _require(ann, "image_id", int, p, source)
        if image_id not in images:
            raise SchemaError(f"unknown image_id {image_id}", p, source)
        rle = parse_segmentation(_require(ann, "segmentation", None, p, source), f"{p}.segmentation", source)
        info = images[image_id]
        if rle.size != (info.height, info.width):
            raise SchemaError(
                f"segmentation size {list(rle.size)} differs from image {info.height}x{info.width}",
                f"{p}.segmentation.size",
                source,
            )
        inst = Instance(rle, _require(ann, "category_id", int, p, source), _require(ann, "id", int, p, source))
        instances.setdefault(image_id, []).append(inst)
    return CocoDataset(images, categories, {i: tuple(v) for i, v in instances.items()})


def load_dataset(path) -> CocoDataset:
    return parse_dataset(_load_json(path), str(path))


def dataset_to_json(ds: CocoDataset) -> dict:
    annotations = []
    for image_id in sorted(ds.images):
        for inst in ds.instances.get(image_id, ()):
            rle = to_rle(inst.mask)
            annotations.append(
                {
                    "id": inst.instance_id,
                    "image_id": image_id,
                    "category_id": inst.category_id,
                    "segmentation": segmentation_to_json(rle),
                    "area": mask_area(rle),
                    "bbox": _bbox(rle),
                    "iscrowd": 0,
                }
            )
    return {
        "images": [
            {"id": i.id, "width": i.width, "height": i.height, "file_name": i.file_name}
            for i in (ds.images[k] for k in sorted(ds.images))
        ],
        "annotations": annotations,
        "categories": list(ds.categories),
    }


def save_dataset(ds: CocoDataset, path):
    _dump_json(dataset_to_json(ds), path)


def parse_results(doc, images: Optional[Mapping[int, ImageInfo]] = None, source=None, tag=None) -> dict:
    """Group a COCO results list into ``{image_id: PredictionSet}``.

    With ``images`` given, every listed image gets a (possibly empty) set and
    records for other images are rejected.  ``tag`` becomes each prediction's
    source when the record carries none.
    """
    if not isinstance(doc, list):
        raise SchemaError("results must be a JSON list", "$", source)
    grouped = {}
    sizes = {}
    for k, rec in enumerate(doc):
        p = f"[{k}]"
        image_id = _require(rec, "image_id", int, p, source)
        score = float(_require(rec, "score", float, p, source))
        if not 0.0 <= score <= 1.0:
            raise SchemaError(f"score {score} outside [0, 1]", f"{p}.score", source)
        rle = parse_segmentation(_require(rec, "segmentation", None, p, source), f"{p}.segmentation", source)
        if images is not None:
            if image_id not in images:
                raise SchemaError(f"unknown image_id {image_id}", p, source)
            info = images[image_id]
            expected = (info.height, info.width)
        else:
            expected = sizes.setdefault(image_id, rle.size)
        if rle.size != expected:
            raise SchemaError(f"segmentation size {list(rle.size)} differs from {list(expected)}", p, source)
        src = rec.get("source", tag)
        grouped.setdefault(image_id, []).append(
            InstancePrediction(rle, _require(rec, "category_id", int, p, source), score, src)
        )
    ids = sorted(set(grouped) | (set(images) if images is not None else set()))
    out = {}
    for image_id in ids:
        if images is not None:
            w, h = images[image_id].width, images[image_id].height
        else:
            h, w = sizes[image_id]
        out[image_id] = PredictionSet(image_id, w, h, tuple(grouped.get(image_id, ())))
    return out


def load_results(path, images=None, tag=None) -> dict:
    return parse_results(_load_json(path), images, str(path), tag)


def results_to_json(predictions: Mapping[int, PredictionSet]) -> list:
    out = []
    for image_id in sorted(predictions):
        for p in predictions[image_id].predictions:
            out.append(
                {
                    "image_id": image_id,
                    "category_id": p.category_id,
                    "score": p.score,
                    "segmentation": segmentation_to_json(p.mask),
                }
            )
    return out


def save_results(predictions, path):
    _dump_json(results_to_json(predictions), path)


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(pixels, path):
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def iter_samples(ds: CocoDataset, image_dir) -> Iterator[DatasetSample]:
    """Yield one :class:`DatasetSample` per image, reading pixels lazily."""
    for image_id in sorted(ds.images):
        info = ds.images[image_id]
        path = os.path.join(image_dir, info.file_name)
        pixels = load_image(path)
        if pixels.shape[:2] != (info.height, info.width):
            raise SchemaError(f"image file {path} is {pixels.shape[1]}x{pixels.shape[0]}", f"images[id={image_id}]")
        yield DatasetSample(pixels, ds.instances.get(image_id, ()), image_id, info.file_name)
