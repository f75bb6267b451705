"""
Synthetic annotation campaigns with known truth and known annotator confusion.

Each image draws from its own random substream keyed by (seed, image index),
and each (image, annotator) response from a substream keyed by
(seed, image index, annotator index), so output is identical however the
work is ordered or split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .core import Action, Annotation, AnnotationEvent, AnnotatorProfile, BBox, ClassTaxonomy, ImageRecord
from .evaluation import iou
from .ingest import Dataset

_TRUTH_STREAM = 1
_RESPONSE_STREAM = 2
_ASSIGN_STREAM = 3

MAX_OVERLAP = 0.3  # placement rejects boxes overlapping an earlier one above this IoU
PLACEMENT_TRIES = 200


class InfeasibleGeometry(ValueError):
    pass


def accuracy_confusion(accuracy: Optional[float], num_classes: int) -> np.ndarray:
    """Confusion with ``accuracy`` on the diagonal and the rest spread evenly.

    ``None`` gives a uniform guesser.
    """
    if accuracy is None:
        return np.full((num_classes, num_classes), 1.0 / num_classes)
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    off = (1.0 - accuracy) / (num_classes - 1) if num_classes > 1 else 0.0
    m = np.full((num_classes, num_classes), off)
    np.fill_diagonal(m, accuracy)
    return m


@dataclass(frozen=True, eq=False)
class SimConfig:
    n_images: int = 100
    mean_boxes: float = 13.0
    class_probs: Optional[Tuple[float, ...]] = None  # None: uniform
    annotators_per_image: int = 5
    confusions: Tuple[np.ndarray, ...] = ()  # one (C, C) matrix per annotator
    jitter_sigma: float = 0.0  # pixels, applied to x and y
    size_jitter: float = 0.0  # log-sd applied to w and h
    miss_prob: float = 0.0
    add_prob: float = 0.0
    gold_per_level: int = 5
    level_size: int = 15
    seed: int = 0
    width: float = 1920.0
    height: float = 1080.0
    min_size: float = 30.0
    max_size: float = 300.0
    taxonomy: ClassTaxonomy = field(default_factory=ClassTaxonomy)

    def __post_init__(self):
        c = len(self.taxonomy)
        for name in ("miss_prob", "add_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_images < 0 or self.mean_boxes < 0 or self.jitter_sigma < 0 or self.size_jitter < 0:
            raise ValueError("counts and noise scales must be non-negative")
        if not 0 <= self.gold_per_level <= self.level_size:
            raise ValueError("gold_per_level must lie in [0, level_size]")
        if self.class_probs is not None:
            p = np.asarray(self.class_probs, dtype=float)
            if p.shape != (c,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError("class_probs must be a distribution over the taxonomy")
        confs = []
        for m in self.confusions:
            m = np.asarray(m, dtype=float)
            if m.shape != (c, c) or np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1) > 1e-9):
                raise ValueError("every confusion must be a row-stochastic (C, C) matrix")
            confs.append(m)
        if not confs:
            confs = [np.eye(c) for _ in range(max(self.annotators_per_image, 1))]
        object.__setattr__(self, "confusions", tuple(confs))

    @property
    def num_classes(self) -> int:
        return len(self.taxonomy)

    @property
    def annotator_ids(self) -> List[str]:
        return [f"ann{j:03d}" for j in range(len(self.confusions))]

    @classmethod
    def from_accuracies(cls, accuracies: Sequence[Optional[float]], **kw) -> "SimConfig":
        tax = kw.get("taxonomy") or ClassTaxonomy()
        confs = tuple(accuracy_confusion(a, len(tax)) for a in accuracies)
        return cls(confusions=confs, **kw)


def _substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *keys])


def _place_boxes(n: int, cfg: SimConfig, rng: np.random.Generator) -> List[BBox]:
    boxes: List[BBox] = []
    for _ in range(n):
        for _ in range(PLACEMENT_TRIES):
            w = rng.uniform(cfg.min_size, cfg.max_size)
            h = w * rng.uniform(0.6, 1.4)
            h = min(h, cfg.height)
            w = min(w, cfg.width)
            x = rng.uniform(0, cfg.width - w)
            y = rng.uniform(0, cfg.height - h)
            cand = BBox(x, y, w, h)
            if all(iou(cand, b) <= MAX_OVERLAP for b in boxes):
                boxes.append(cand)
                break
        else:
            raise InfeasibleGeometry(f"could not place box {len(boxes) + 1} of {n} in the frame")
    return boxes


def generate_truth(config: SimConfig) -> Dataset:
    """Random ground truth; box ``ann_id`` values double as pre-annotation ids."""
    c = config.num_classes
    probs = np.full(c, 1.0 / c) if config.class_probs is None else np.asarray(config.class_probs)
    images, boxes = [], []
    ann_id = 1
    for idx in range(config.n_images):
        rng = _substream(config.seed, _TRUTH_STREAM, idx)
        image_id = idx + 1
        images.append(ImageRecord(image_id, config.width, config.height))
        n = int(rng.poisson(config.mean_boxes))
        geoms = _place_boxes(n, config, rng)
        labels = rng.choice(c, size=n, p=probs)
        for g, lab in zip(geoms, labels):
            boxes.append(Annotation(image_id, g, int(lab), ann_id=ann_id))
            ann_id += 1
    return Dataset(config.taxonomy, images, boxes)


@dataclass
class Campaign:
    events: List[AnnotationEvent]
    gold_images: FrozenSet[int]
    assignment: Dict[str, List[int]]  # annotator -> images in viewing order
    true_confusions: Dict[str, np.ndarray]

    def true_profiles(self, class_probs: Optional[Sequence[float]] = None) -> Dict[str, AnnotatorProfile]:
        return {a: profile_from_confusion(a, m, class_probs) for a, m in self.true_confusions.items()}


def profile_from_confusion(annotator_id: str, confusion: np.ndarray, class_probs=None) -> AnnotatorProfile:
    """Exact sensitivity/specificity implied by a confusion matrix and class priors."""
    m = np.asarray(confusion, dtype=float)
    c = m.shape[0]
    p = np.full(c, 1.0 / c) if class_probs is None else np.asarray(class_probs, dtype=float)
    sens = np.diag(m).copy()
    spec = []
    for k in range(c):
        others = np.arange(c) != k
        mass = p[others].sum()
        fp = float((p[others] * m[others, k]).sum() / mass) if mass > 0 else 0.0
        spec.append(1.0 - fp)
    return AnnotatorProfile(annotator_id, tuple(np.clip(sens, 0, 1)), tuple(np.clip(spec, 0, 1)))


def _assign(config: SimConfig, image_ids: List[int]) -> Dict[str, List[int]]:
    n_a = len(config.confusions)
    r = config.annotators_per_image
    if r > n_a:
        raise ValueError(f"{n_a} annotators cannot give {r} distinct annotations per image")
    names = config.annotator_ids
    rng = _substream(config.seed, _ASSIGN_STREAM)
    order = [image_ids[i] for i in rng.permutation(len(image_ids))]
    assignment: Dict[str, List[int]] = {a: [] for a in names}
    slot = 0
    for img in order:
        for _ in range(r):
            assignment[names[slot % n_a]].append(img)
            slot += 1
    # each annotator sees gold and regular images interleaved in random order
    for j, a in enumerate(names):
        seq = assignment[a]
        perm = _substream(config.seed, _ASSIGN_STREAM, j + 1).permutation(len(seq))
        assignment[a] = [seq[i] for i in perm]
    return assignment


def _jitter(b: BBox, cfg: SimConfig, rng: np.random.Generator) -> BBox:
    x = b.x + rng.normal(0, cfg.jitter_sigma) if cfg.jitter_sigma else b.x
    y = b.y + rng.normal(0, cfg.jitter_sigma) if cfg.jitter_sigma else b.y
    w = b.w * math.exp(rng.normal(0, cfg.size_jitter)) if cfg.size_jitter else b.w
    h = b.h * math.exp(rng.normal(0, cfg.size_jitter)) if cfg.size_jitter else b.h
    w = min(w, cfg.width)
    h = min(h, cfg.height)
    x = min(max(x, 0.0), cfg.width - w)
    y = min(max(y, 0.0), cfg.height - h)
    return BBox(x, y, w, h)


def _respond(truth_boxes, image_id, ann_idx, annotator, cfg: SimConfig) -> List[AnnotationEvent]:
    rng = _substream(cfg.seed, _RESPONSE_STREAM, image_id, ann_idx)
    conf = cfg.confusions[ann_idx]
    c = cfg.num_classes
    out = []
    for t in truth_boxes:
        box_id = str(t.ann_id)
        if rng.random() < cfg.miss_prob:
            out.append(AnnotationEvent(annotator, image_id, box_id, Action.DELETE))
            continue
        label = int(rng.choice(c, p=conf[t.label]))
        geom = _jitter(t.bbox, cfg, rng)
        if geom != t.bbox:
            action = Action.ADJUST
        elif label != t.label:
            action = Action.RELABEL
        else:
            action = Action.CONFIRM
        out.append(AnnotationEvent(annotator, image_id, box_id, action, label, geom))
    if rng.random() < cfg.add_prob:
        w = rng.uniform(cfg.min_size, cfg.max_size)
        h = min(w * rng.uniform(0.6, 1.4), cfg.height)
        g = BBox(rng.uniform(0, cfg.width - w), rng.uniform(0, cfg.height - h), w, h)
        out.append(AnnotationEvent(annotator, image_id, f"{annotator}-add-{image_id}", Action.ADD, int(rng.integers(c)), g))
    return out


def simulate_campaign(truth: Dataset, config: SimConfig) -> Campaign:
    """Annotator events over ``truth``, whose boxes act as the pre-annotations.

    Events are ordered by annotator, then by each annotator's viewing order.
    The gold set holds round(N * gold_per_level / level_size) images and is
    recorded only in the returned :class:`Campaign`.
    """
    image_ids = [im.image_id for im in truth.images]
    n_gold = int(round(len(image_ids) * config.gold_per_level / config.level_size)) if config.level_size else 0
    rng = _substream(config.seed, _ASSIGN_STREAM, 0)
    gold = frozenset(image_ids[i] for i in rng.permutation(len(image_ids))[:n_gold])
    assignment = _assign(config, image_ids)
    by_image = truth.boxes_by_image()
    names = config.annotator_ids
    events: List[AnnotationEvent] = []
    for j, a in enumerate(names):
        for img in assignment[a]:
            events.extend(_respond(by_image[img], img, j, a, config))
    return Campaign(
        events=events,
        gold_images=gold,
        assignment=assignment,
        true_confusions={a: config.confusions[j] for j, a in enumerate(names)},
    )


def gold_dataset(truth: Dataset, campaign: Campaign) -> Dataset:
    """The gold subset of ``truth``, with images flagged ``is_gold``."""
    images = [replace(im, is_gold=True) for im in truth.images if im.image_id in campaign.gold_images]
    return Dataset(truth.taxonomy, images, [b for b in truth.boxes if b.image_id in campaign.gold_images])


def mark_gold(truth: Dataset, gold_images) -> Dataset:
    images = [replace(im, is_gold=im.image_id in gold_images) for im in truth.images]
    return Dataset(truth.taxonomy, images, list(truth.boxes))
