"""
Image scoring and selection for annotation campaigns.

Disagreement compares per-class box counts from several detectors on one
image; difficulty mixes box count, box size, overlap and the normalised
disagreement. Both work only on annotation metadata.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import BBox, ImageRecord, ScoreCard, ScoringConfig
from .evaluation import iou
from .ingest import Dataset


def disagreement_score(counts, image_id=None) -> ScoreCard:
    """Disagreement of ``counts`` (models x classes) for one image.

    Per class: population standard deviation of the counts and the number of
    model pairs whose counts differ. The image score adds the summed standard
    deviations to the largest per-class pairwise count.
    """
    c = np.asarray(counts, dtype=float)
    if c.ndim != 2 or c.shape[0] < 2:
        raise ValueError("disagreement needs counts from at least two models")
    if c.shape[1] < 1:
        raise ValueError("disagreement needs at least one class")
    spread = float(np.std(c, axis=0, ddof=0).sum())
    m = c.shape[0]
    pairwise = tuple(
        int(sum(c[a, k] != c[b, k] for a, b in itertools.combinations(range(m), 2))) for k in range(c.shape[1])
    )
    worst = max(pairwise)
    return ScoreCard(
        image_id=image_id,
        count_disagreement=spread,
        max_pairwise_disagreement=worst,
        total_disagreement=spread + worst,
        pairwise_disagreement=pairwise,
    )


def normalize_disagreement(scores: Sequence[float]) -> List[float]:
    """Min-max rescale to [0, 100]; with no spread every score maps to 0."""
    if len(scores) == 0:
        raise ValueError("cannot normalise an empty list of scores")
    arr = np.asarray(scores, dtype=float)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return [0.0] * len(arr)
    return list(np.clip((arr - lo) / (hi - lo) * 100.0, 0.0, 100.0))


def mean_pairwise_iou(boxes: Sequence[BBox]) -> float:
    n = len(boxes)
    if n < 2:
        return 0.0
    total = sum(iou(a, b) for a, b in itertools.combinations(boxes, 2))
    return total / (n * (n - 1) / 2)


def difficulty_score(
    boxes: Sequence[Tuple[BBox, int]],
    image: ImageRecord,
    disagreement_norm: float,
    config: ScoringConfig,
    card: Optional[ScoreCard] = None,
) -> ScoreCard:
    """Full score card for one image.

    ``boxes`` are (BBox, label) pairs. An image without boxes has mean box size
    0, so its size term is 1. The base difficulty is
    count + (1 - size) + disagreement/100 + overlap; diversity and density are
    added only when enabled in ``config``.
    """
    frame = image.width * image.height
    if frame <= 0:
        raise ValueError(f"image {image.image_id} has zero area")
    n = len(boxes)
    areas = [b.area for b, _ in boxes]
    count_term = min(1.0, n / config.m_bb_max)
    size = sum(areas) / n / frame if n else 0.0
    size = min(1.0, size)
    density = min(1.0, sum(areas) / frame)
    diversity = min(1.0, len({lab for _, lab in boxes}) / config.m_max_classes)
    overlap = mean_pairwise_iou([b for b, _ in boxes])
    d_term = disagreement_norm / 100.0
    delta = count_term + (1.0 - size) + d_term + overlap
    if config.include_diversity:
        delta += diversity
    if config.include_density:
        delta += density
    base = card if card is not None else ScoreCard(image_id=image.image_id)
    return replace(
        base,
        image_id=image.image_id,
        disagreement_norm=disagreement_norm,
        count_term=count_term,
        size_term=size,
        density=density,
        diversity=diversity,
        iou_overlap=overlap,
        disagreement_term=d_term,
        difficulty=delta,
    )


def class_counts(predictions: Sequence[Dataset], image_id, num_classes: int) -> np.ndarray:
    """(models x classes) box counts of one image."""
    out = np.zeros((len(predictions), num_classes), dtype=int)
    for m, ds in enumerate(predictions):
        for b in ds.boxes:
            if b.image_id == image_id:
                out[m, b.label] += 1
    return out


def score_dataset(
    predictions: Sequence[Dataset],
    config: Optional[ScoringConfig] = None,
    reference: int = 0,
    min_score: Optional[float] = None,
) -> List[ScoreCard]:
    """Score every image of ``predictions[reference]`` against all models.

    Difficulty geometry uses the reference model's boxes. When
    ``config`` is None, the box-count normaliser is the largest reference box
    count in the dataset.
    """
    if len(predictions) < 2:
        raise ValueError("scoring needs predictions from at least two models")
    c = len(predictions[0].taxonomy)
    per_model = []
    for ds in predictions:
        boxes = ds.boxes
        if min_score is not None:
            boxes = [b for b in boxes if b.score is None or b.score >= min_score]
        by_img: Dict[object, list] = {}
        for b in boxes:
            by_img.setdefault(b.image_id, []).append(b)
        per_model.append(by_img)
    images = predictions[reference].images
    ref = per_model[reference]
    if config is None:
        most = max((len(ref.get(im.image_id, ())) for im in images), default=0)
        config = ScoringConfig(m_bb_max=max(1, most), m_max_classes=c)

    partial = []
    for im in images:
        counts = np.zeros((len(predictions), c), dtype=int)
        for m, by_img in enumerate(per_model):
            for b in by_img.get(im.image_id, ()):
                counts[m, b.label] += 1
        partial.append(disagreement_score(counts, im.image_id))
    if not partial:
        return []
    norm = normalize_disagreement([p.total_disagreement for p in partial])
    return [
        difficulty_score([(b.bbox, b.label) for b in ref.get(im.image_id, ())], im, dn, config, p)
        for im, p, dn in zip(images, partial, norm)
    ]


def _id_key(image_id):
    return (str(type(image_id)), image_id)


def select_images(
    scorecards: Sequence[ScoreCard],
    k: int,
    strategy: str = "top-disagreement",
    bands: int = 3,
) -> list:
    """Choose ``k`` images.

    ``top-disagreement`` returns the k highest normalised disagreements (ties by
    image id). ``difficulty-banded`` takes the same k images and reorders them
    into ``bands`` equal-size bands of ascending difficulty, emitted band by
    band, easiest first.
    """
    if k < 0 or k > len(scorecards):
        raise ValueError(f"cannot select {k} of {len(scorecards)} images")
    if k == 0:
        return []
    ranked = sorted(scorecards, key=lambda s: (-s.disagreement_norm, _id_key(s.image_id)))[:k]
    if strategy == "top-disagreement":
        return [s.image_id for s in ranked]
    if strategy != "difficulty-banded":
        raise ValueError(f"unknown selection strategy {strategy!r}")
    if bands < 1:
        raise ValueError("need at least one band")
    by_difficulty = sorted(ranked, key=lambda s: (s.difficulty, _id_key(s.image_id)))
    out = []
    for chunk in np.array_split(np.arange(len(by_difficulty)), min(bands, len(by_difficulty))):
        out.extend(by_difficulty[i].image_id for i in chunk)
    return out


def dominant_class(labels: Sequence[int]) -> int:
    """Most frequent label (lowest index on ties); -1 for an image with no boxes."""
    if not labels:
        return -1
    counts = Counter(labels)
    top = max(counts.values())
    return min(k for k, v in counts.items() if v == top)


def stratified_split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Image-level split stratified on each image's dominant class.

    The global train size is round(fraction * N). Each stratum first gets
    floor(fraction * n_s) train images; the remaining slots go to the strata
    with the largest fractional remainders, so no stratum is off by a full image.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if len(dataset.images) < 2:
        raise ValueError("splitting needs at least two images")
    labels: Dict[object, list] = {im.image_id: [] for im in dataset.images}
    for b in dataset.boxes:
        labels[b.image_id].append(b.label)
    strata: Dict[int, list] = {}
    for im in sorted(dataset.images, key=lambda im: _id_key(im.image_id)):
        strata.setdefault(dominant_class(labels[im.image_id]), []).append(im.image_id)

    keys = sorted(strata)
    ideal = {s: train_fraction * len(strata[s]) for s in keys}
    quota = {s: int(np.floor(ideal[s])) for s in keys}
    target = int(np.floor(train_fraction * len(dataset.images) + 0.5))
    spare = target - sum(quota.values())
    for s in sorted(keys, key=lambda s: (-(ideal[s] - quota[s]), s))[:spare]:
        quota[s] += 1

    rng = np.random.default_rng(seed)
    train_ids = set()
    for s in keys:
        ids = strata[s]
        perm = rng.permutation(len(ids))
        train_ids.update(ids[i] for i in perm[: quota[s]])
    train = [im.image_id for im in dataset.images if im.image_id in train_ids]
    val = [im.image_id for im in dataset.images if im.image_id not in train_ids]
    return dataset.subset(train), dataset.subset(val)
