"""Reading and writing COCO annotation files and raw annotation event logs."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .core import Action, Annotation, AnnotationEvent, BBox, ClassTaxonomy, ImageRecord

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """Raised for malformed or inconsistent input files."""


@dataclass
class Dataset:
    taxonomy: ClassTaxonomy
    images: List[ImageRecord] = field(default_factory=list)
    boxes: list = field(default_factory=list)

    def __post_init__(self):
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate image ids in dataset")
        known = set(ids)
        c = len(self.taxonomy)
        for b in self.boxes:
            if b.image_id not in known:
                raise FormatError(f"box references unknown image {b.image_id}")
            if not 0 <= b.label < c:
                raise FormatError(f"label {b.label} outside taxonomy of {c} classes")

    def image_map(self) -> Dict[int, ImageRecord]:
        return {im.image_id: im for im in self.images}

    def boxes_by_image(self) -> Dict[int, list]:
        out = {im.image_id: [] for im in self.images}
        for b in self.boxes:
            out[b.image_id].append(b)
        return out

    def annotations(self) -> List[Annotation]:
        """Boxes projected to plain :class:`Annotation` records."""
        return [Annotation(b.image_id, b.bbox, b.label) for b in self.boxes]

    def subset(self, image_ids) -> "Dataset":
        keep = set(image_ids)
        return Dataset(
            self.taxonomy,
            [im for im in self.images if im.image_id in keep],
            [b for b in self.boxes if b.image_id in keep],
        )

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.taxonomy == other.taxonomy
            and self.images == other.images
            and self.annotations() == other.annotations()
        )


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from exc


def _coco_bbox(raw, where: str) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise FormatError(f"{where}: bbox must be [x, y, w, h]")
    x, y, w, h = (float(v) for v in raw)
    if w <= 0 or h <= 0:
        raise FormatError(f"{where}: non-positive box dimensions (w={w}, h={h})")
    return BBox(x, y, w, h)


def _category_map(doc, taxonomy: ClassTaxonomy, path) -> Dict[int, int]:
    cats = {}
    for cat in doc["categories"]:
        try:
            cats[cat["id"]] = taxonomy.index(str(cat["name"]))
        except KeyError:
            raise FormatError(f"{path}: category {cat.get('name')!r} not in taxonomy") from None
    return cats


def parse_coco(path, taxonomy: Optional[ClassTaxonomy] = None) -> Dataset:
    """Load a COCO detection document, mapping categories onto ``taxonomy`` by name."""
    taxonomy = taxonomy or ClassTaxonomy()
    doc = _load_json(path)
    if not isinstance(doc, dict) or not all(
        isinstance(doc.get(k), list) for k in ("images", "annotations", "categories")
    ):
        raise FormatError(f"{path}: not a COCO document (need images/annotations/categories arrays)")
    cats = _category_map(doc, taxonomy, path)

    images = []
    try:
        for im in doc["images"]:
            images.append(
                ImageRecord(
                    image_id=im["id"],
                    width=im["width"],
                    height=im["height"],
                    is_gold=bool(im.get("is_gold", False)),
                    file_name=im.get("file_name"),
                )
            )
    except KeyError as exc:
        raise FormatError(f"{path}: image entry missing {exc}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    known = {im.image_id for im in images}
    if len(known) != len(images):
        raise FormatError(f"{path}: duplicate image ids")
    sizes = {im.image_id: (im.width, im.height) for im in images}

    boxes = []
    n_outside = 0
    for n, ann in enumerate(doc["annotations"]):
        where = f"{path}: annotation #{n}"
        try:
            image_id, cat_id, raw = ann["image_id"], ann["category_id"], ann["bbox"]
        except KeyError as exc:
            raise FormatError(f"{where} missing {exc}") from None
        if image_id not in known:
            raise FormatError(f"{where} references unknown image {image_id}")
        if cat_id not in cats:
            raise FormatError(f"{where} has undeclared category id {cat_id}")
        bbox = _coco_bbox(raw, where)
        if not bbox.within(*sizes[image_id]):
            n_outside += 1
        boxes.append(Annotation(image_id, bbox, cats[cat_id], ann_id=ann.get("id"), score=ann.get("score")))
    if n_outside:
        log.warning("%s: %d boxes extend beyond their image bounds", path, n_outside)
    return Dataset(taxonomy, images, boxes)


def coco_document(dataset: Dataset) -> dict:
    tax = dataset.taxonomy
    images = []
    for im in dataset.images:
        entry = {
            "id": im.image_id,
            "width": im.width,
            "height": im.height,
            "file_name": im.file_name or f"{im.image_id}.png",
        }
        if im.is_gold:
            entry["is_gold"] = True
        images.append(entry)
    annotations = []
    used = {b.ann_id for b in dataset.boxes if b.ann_id is not None}
    next_id = 1
    for b in dataset.boxes:
        ann_id = b.ann_id
        if ann_id is None:
            while next_id in used:
                next_id += 1
            ann_id = next_id
            used.add(ann_id)
        entry = {
            "id": ann_id,
            "image_id": b.image_id,
            "category_id": b.label + 1,
            "bbox": b.bbox.as_list(),
            "area": b.bbox.area,
            "iscrowd": 0,
        }
        if b.score is not None:
            entry["score"] = b.score
        annotations.append(entry)
    categories = [{"id": i + 1, "name": n} for i, n in enumerate(tax.names)]
    return {"images": images, "annotations": annotations, "categories": categories}


def write_coco(dataset: Dataset, path) -> None:
    doc = coco_document(dataset)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def parse_detections(path, taxonomy: ClassTaxonomy, images: Optional[Sequence[ImageRecord]] = None) -> List[Annotation]:
    """Detections from a COCO results array, or from a COCO document with scores.

    Category ids in a bare results array are taken as 1-based taxonomy indices,
    the convention used by :func:`write_coco`.
    """
    doc = _load_json(path)
    if isinstance(doc, dict):
        return list(parse_coco(path, taxonomy).boxes)
    if not isinstance(doc, list):
        raise FormatError(f"{path}: expected a COCO results array")
    known = None if images is None else {im.image_id for im in images}
    dets = []
    for n, d in enumerate(doc):
        where = f"{path}: detection #{n}"
        try:
            image_id, cat, raw, score = d["image_id"], d["category_id"], d["bbox"], d["score"]
        except KeyError as exc:
            raise FormatError(f"{where} missing {exc}") from None
        if known is not None and image_id not in known:
            raise FormatError(f"{where} references unknown image {image_id}")
        label = int(cat) - 1
        if not 0 <= label < len(taxonomy):
            raise FormatError(f"{where}: category id {cat} outside taxonomy")
        dets.append(Annotation(image_id, _coco_bbox(raw, where), label, score=float(score)))
    return dets


def write_detections(dets: Sequence[Annotation], path) -> None:
    out = [
        {"image_id": d.image_id, "category_id": d.label + 1, "bbox": d.bbox.as_list(), "score": d.score}
        for d in dets
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh)
        fh.write("\n")


# event log: one JSON object per line

_REQUIRED = ("annotator_id", "image_id", "box_id", "action")
_GEOMETRY = ("x", "y", "w", "h")


def event_to_record(ev: AnnotationEvent) -> dict:
    rec = {
        "annotator_id": ev.annotator_id,
        "image_id": ev.image_id,
        "box_id": ev.box_id,
        "action": ev.action.value,
    }
    if not ev.is_delete:
        rec["label"] = ev.label
        rec.update(zip(_GEOMETRY, ev.bbox.as_list()))
    return rec


def _parse_label(raw, taxonomy: ClassTaxonomy, where: str) -> int:
    if isinstance(raw, str) and not raw.lstrip("-").isdigit():
        try:
            return taxonomy.index(raw)
        except KeyError:
            raise FormatError(f"{where}: unknown class name {raw!r}") from None
    label = int(raw)
    if not 0 <= label < len(taxonomy):
        raise FormatError(f"{where}: label {label} out of range for {len(taxonomy)} classes")
    return label


def record_to_event(rec: dict, taxonomy: ClassTaxonomy, where: str = "event") -> AnnotationEvent:
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise FormatError(f"{where}: missing required field(s) {', '.join(missing)}")
    try:
        action = Action(rec["action"])
    except ValueError:
        raise FormatError(f"{where}: unknown action {rec['action']!r}") from None
    common = dict(annotator_id=str(rec["annotator_id"]), image_id=rec["image_id"], box_id=str(rec["box_id"]))
    if action is Action.DELETE:
        return AnnotationEvent(action=action, **common)
    missing = [k for k in ("label",) + _GEOMETRY if rec.get(k) is None]
    if missing:
        raise FormatError(f"{where}: missing required field(s) {', '.join(missing)}")
    label = _parse_label(rec["label"], taxonomy, where)
    try:
        bbox = BBox(*(float(rec[k]) for k in _GEOMETRY))
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None
    return AnnotationEvent(action=action, label=label, bbox=bbox, **common)


def parse_event_log(path, taxonomy: Optional[ClassTaxonomy] = None) -> List[AnnotationEvent]:
    taxonomy = taxonomy or ClassTaxonomy()
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{where}: record is not an object")
            events.append(record_to_event(rec, taxonomy, where))
    return events


def write_event_log(events: Sequence[AnnotationEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(event_to_record(ev)))
            fh.write("\n")


@dataclass
class ValidationReport:
    class_counts: Dict[str, int]
    boxes_per_image: Dict[int, int]  # box count -> number of images with that count
    out_of_bounds: List[Tuple[int, int]]  # (image_id, position of the box in the dataset)
    num_images: int
    num_boxes: int

    def as_dict(self) -> dict:
        return {
            "num_images": self.num_images,
            "num_boxes": self.num_boxes,
            "class_counts": self.class_counts,
            "boxes_per_image": {str(k): v for k, v in sorted(self.boxes_per_image.items())},
            "out_of_bounds": [list(t) for t in self.out_of_bounds],
        }


def validate_dataset(dataset: Dataset) -> ValidationReport:
    counts = Counter(b.label for b in dataset.boxes)
    class_counts = {name: counts.get(i, 0) for i, name in enumerate(dataset.taxonomy.names)}
    per_image = Counter({im.image_id: 0 for im in dataset.images})
    per_image.update(b.image_id for b in dataset.boxes)
    hist = Counter(per_image.values())
    sizes = {im.image_id: (im.width, im.height) for im in dataset.images}
    oob = [
        (b.image_id, n) for n, b in enumerate(dataset.boxes) if not b.bbox.within(*sizes[b.image_id])
    ]
    return ValidationReport(
        class_counts=class_counts,
        boxes_per_image=dict(sorted(hist.items())),
        out_of_bounds=oob,
        num_images=len(dataset.images),
        num_boxes=len(dataset.boxes),
    )


def write_report(report: ValidationReport, path) -> None:
    Path(path).write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")
