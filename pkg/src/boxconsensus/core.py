"""
Domain types shared across the package.

Every type here is an immutable value object. Geometry is kept in continuous
pixel coordinates (x, y = top-left corner; w, h = extent); nothing is rounded
until a file is written.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Tuple

import numpy as np

UVH_CLASSES: Tuple[str, ...] = (
    "Cycle",
    "2-Wheeler",
    "Bus",
    "M. Bus",
    "Truck",
    "LCV",
    "T. Traveller",
    "Van",
    "Sedan",
    "Hatchback",
    "SUV",
    "MUV",
    "3-Wheeler",
    "Other",
)

# alternative spellings seen for the same vehicle classes
_ALIASES = {
    "bicycle": "Cycle",
    "motorcycle": "2-Wheeler",
    "twowheeler": "2-Wheeler",
    "minibus": "M. Bus",
    "lightcommercialvehicle": "LCV",
    "tempotraveller": "T. Traveller",
    "autorickshaw": "3-Wheeler",
    "threewheeler": "3-Wheeler",
    "others": "Other",
}

PROB_TOL = 1e-9


def _norm_name(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch.isalnum())


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered class names with a dense 0..C-1 index."""

    names: Tuple[str, ...] = UVH_CLASSES
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValueError("taxonomy needs at least one class")
        keys = [_norm_name(n) for n in names]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate class names in taxonomy: {names}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(keys)})

    def __len__(self) -> int:
        return len(self.names)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        """Case- and punctuation-insensitive lookup; raises KeyError if absent."""
        key = _norm_name(name)
        if key in self._index:
            return self._index[key]
        alias = _ALIASES.get(key)
        if alias is not None and _norm_name(alias) in self._index:
            return self._index[_norm_name(alias)]
        raise KeyError(name)

    def name(self, index: int) -> str:
        if not 0 <= index < len(self.names):
            raise IndexError(f"class index {index} out of range for {len(self.names)} classes")
        return self.names[index]

    def __contains__(self, name: str) -> bool:
        try:
            self.index(name)
        except KeyError:
            return False
        return True

    @classmethod
    def from_file(cls, path) -> "ClassTaxonomy":
        with open(path, encoding="utf-8") as fh:
            names = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
        return cls(tuple(names))


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"non-positive box dimensions: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def as_list(self):
        return [self.x, self.y, self.w, self.h]

    def within(self, width: float, height: float) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: float
    height: float
    is_gold: bool = False
    file_name: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id}: non-positive size {self.width}x{self.height}")


class Action(str, enum.Enum):
    CONFIRM = "confirm"
    ADJUST = "adjust"
    ADD = "add"
    DELETE = "delete"
    RELABEL = "relabel"


@dataclass(frozen=True)
class AnnotationEvent:
    """One annotator's final action on one box.

    ``bbox`` and ``label`` are None for deletions.
    """

    annotator_id: str
    image_id: int
    box_id: str
    action: Action
    label: Optional[int] = None
    bbox: Optional[BBox] = None

    def __post_init__(self):
        action = Action(self.action)
        object.__setattr__(self, "action", action)
        if action is Action.DELETE:
            if self.bbox is not None:
                raise ValueError("delete events carry no geometry")
        else:
            if self.bbox is None or self.label is None:
                raise ValueError(f"{action.value} event needs both a bbox and a label")

    @property
    def is_delete(self) -> bool:
        return self.action is Action.DELETE


@dataclass(frozen=True)
class Annotation:
    """A labelled box of a dataset (ground truth, consensus or prediction)."""

    image_id: int
    bbox: BBox
    label: int
    ann_id: Optional[int] = field(default=None, compare=False)
    score: Optional[float] = field(default=None, compare=False)


@dataclass(frozen=True)
class AnnotatorProfile:
    """Per-class reliability of one annotator.

    ``gold_trials[k]`` is (correct, total) over gold boxes whose true class is k;
    ``negative_trials[k]`` is (correct rejections, total) over gold boxes whose
    true class is not k.
    """

    annotator_id: str
    sensitivity: Tuple[float, ...]
    specificity: Tuple[float, ...]
    gold_trials: Tuple[Tuple[int, int], ...] = ()
    negative_trials: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        sens = tuple(float(v) for v in self.sensitivity)
        spec = tuple(float(v) for v in self.specificity)
        if len(sens) != len(spec):
            raise ValueError("sensitivity and specificity lengths differ")
        if any(not 0.0 <= v <= 1.0 for v in sens + spec):
            raise ValueError(f"rates outside [0, 1] for annotator {self.annotator_id}")
        object.__setattr__(self, "sensitivity", sens)
        object.__setattr__(self, "specificity", spec)
        object.__setattr__(self, "gold_trials", tuple(tuple(t) for t in self.gold_trials))
        object.__setattr__(self, "negative_trials", tuple(tuple(t) for t in self.negative_trials))

    @property
    def num_classes(self) -> int:
        return len(self.sensitivity)


class ClusterOrigin(str, enum.Enum):
    PRE_ANNOTATED = "pre-annotated"
    ADDED = "annotator-added"


@dataclass(frozen=True)
class BoxCluster:
    """All submissions judged to be the same physical object in one image."""

    cluster_id: str
    image_id: int
    members: Tuple[AnnotationEvent, ...]
    origin: ClusterOrigin

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "origin", ClusterOrigin(self.origin))
        if any(e.image_id != self.image_id for e in members):
            raise ValueError(f"cluster {self.cluster_id} mixes images")
        annotators = [e.annotator_id for e in members]
        if len(set(annotators)) != len(annotators):
            raise ValueError(f"cluster {self.cluster_id} has two members from one annotator")

    @property
    def labeled(self) -> Tuple[AnnotationEvent, ...]:
        return tuple(e for e in self.members if not e.is_delete)

    @property
    def deletes(self) -> int:
        return sum(1 for e in self.members if e.is_delete)

    @property
    def annotators(self) -> Tuple[str, ...]:
        return tuple(e.annotator_id for e in self.members)


@dataclass(frozen=True)
class ConsensusBox:
    """Consensus output for one cluster. Duck-types as an :class:`Annotation`."""

    image_id: int
    bbox: BBox
    label: int
    posterior: Tuple[float, ...]
    support: int
    retained: bool = True
    cluster_id: str = ""

    def __post_init__(self):
        post = tuple(float(p) for p in self.posterior)
        object.__setattr__(self, "posterior", post)
        if abs(sum(post) - 1.0) > PROB_TOL:
            raise ValueError(f"posterior sums to {sum(post)!r}")
        if self.support < 1:
            raise ValueError("consensus box needs support >= 1")

    @property
    def ann_id(self):
        return None

    @property
    def score(self) -> float:
        return self.posterior[self.label]


def _as_prob_vector(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if np.any(arr < 0) or np.any(arr > 1):
        raise ValueError(f"{what}: entries outside [0, 1]")
    if abs(arr.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"{what}: sums to {arr.sum()!r}, not 1")
    return arr


@dataclass(frozen=True, eq=False)
class ReliabilityModel:
    """Class priors plus one row-stochastic confusion matrix per annotator.

    ``confusion[a][k, l]`` is the probability that annotator ``a`` reports class
    ``l`` for an object of true class ``k``.
    """

    priors: np.ndarray
    confusion: Mapping[str, np.ndarray]

    def __post_init__(self):
        priors = _as_prob_vector(self.priors, "class priors")
        priors.setflags(write=False)
        c = priors.shape[0]
        conf = {}
        for a, mat in self.confusion.items():
            m = np.array(mat, dtype=float)
            if m.shape != (c, c):
                raise ValueError(f"confusion for {a} has shape {m.shape}, expected {(c, c)}")
            for k in range(c):
                _as_prob_vector(m[k], f"confusion row {k} of annotator {a}")
            m.setflags(write=False)
            conf[a] = m
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "confusion", conf)

    @property
    def num_classes(self) -> int:
        return self.priors.shape[0]


@dataclass(frozen=True)
class ScoringConfig:
    m_bb_max: float = 100.0
    m_max_classes: float = float(len(UVH_CLASSES))
    include_diversity: bool = False
    include_density: bool = False

    def __post_init__(self):
        if self.m_bb_max < 1 or self.m_max_classes < 1:
            raise ValueError("scoring normalizers must be >= 1")


@dataclass(frozen=True)
class ScoreCard:
    """Per-image disagreement and difficulty components.

    ``total_disagreement`` is the image-level score (sum of the count spread and
    the worst per-class pairwise disagreement); ``pairwise_disagreement`` holds the
    per-class pairwise counts, which share a symbol with it in the original notation.
    """

    image_id: Optional[int]
    count_disagreement: float = 0.0  # N_dci
    max_pairwise_disagreement: int = 0  # M_mdi
    total_disagreement: float = 0.0  # D_i
    pairwise_disagreement: Tuple[int, ...] = ()
    disagreement_norm: float = 0.0  # [0, 100]
    count_term: float = 0.0  # C~
    size_term: float = 0.0  # mean relative box area
    density: float = 0.0
    diversity: float = 0.0  # K~
    iou_overlap: float = 0.0
    disagreement_term: float = 0.0  # D~
    difficulty: float = 0.0

    CSV_FIELDS = (
        "image_id",
        "count_disagreement",
        "max_pairwise_disagreement",
        "total_disagreement",
        "disagreement_norm",
        "count_term",
        "size_term",
        "density",
        "diversity",
        "iou_overlap",
        "disagreement_term",
        "difficulty",
    )

    def as_row(self) -> dict:
        return {f: getattr(self, f) for f in self.CSV_FIELDS}


def check_distribution(values: Iterable[float], tol: float = PROB_TOL) -> bool:
    vals = list(values)
    return all(0.0 <= v <= 1.0 for v in vals) and abs(sum(vals) - 1.0) <= tol
