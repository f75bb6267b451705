"""
Consensus class labels for box clusters.

Two aggregators are provided: majority voting with seeded random tie-breaks,
and a STAPLE-style EM that treats each annotator as a C x C confusion matrix
(true class -> reported class). STAPLE runs per image on an annotation matrix
``M`` of shape (annotators, boxes) where ``-1`` marks an annotator who gave no
label for that box; such entries contribute no factor to the posterior.
"""

from __future__ import annotations

import logging
import zlib
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .core import (
    AnnotationEvent,
    AnnotatorProfile,
    BoxCluster,
    ClassTaxonomy,
    ConsensusBox,
    ImageRecord,
    ReliabilityModel,
)
from .correspondence import average_geometry, resolve_retention
from .ingest import Dataset

log = logging.getLogger(__name__)

ABSENT = -1

DEFAULT_SENSITIVITY = 0.8
DEFAULT_SPECIFICITY = 0.95
LAPLACE_ALPHA = 1.0
CONFUSION_SMOOTHING = 0.01  # additive pseudo-count per confusion cell in the M-step
CONFUSION_FLOOR = 1e-6  # lower bound on initial confusion entries

MV_STREAM = 0x4D56  # tags the per-image random streams used for tie-breaks


# majority voting


def majority_vote(cluster, rng: np.random.Generator) -> int:
    """Most frequent label among the cluster's labelled members.

    ``cluster`` may be a :class:`BoxCluster` or a plain sequence of labels.
    Ties are broken uniformly at random among the tied labels, which are
    ordered ascending first so the draw depends only on the label multiset
    and the generator state.
    """
    labels = [e.label for e in cluster.labeled] if isinstance(cluster, BoxCluster) else list(cluster)
    if not labels:
        raise ValueError("majority vote over an empty cluster")
    counts = Counter(labels)
    top = max(counts.values())
    tied = sorted(k for k, v in counts.items() if v == top)
    if len(tied) == 1:
        return tied[0]
    return int(tied[rng.integers(len(tied))])


def image_rng(seed: int, image_id, stream: int = MV_STREAM) -> np.random.Generator:
    """Independent generator for one image, so results do not depend on processing order."""
    key = image_id if isinstance(image_id, int) and image_id >= 0 else zlib.crc32(str(image_id).encode())
    return np.random.default_rng([int(seed), stream, key])


# reliability from gold images


def default_profile(annotator_id: str, num_classes: int) -> AnnotatorProfile:
    return AnnotatorProfile(
        annotator_id,
        (DEFAULT_SENSITIVITY,) * num_classes,
        (DEFAULT_SPECIFICITY,) * num_classes,
        ((0, 0),) * num_classes,
        ((0, 0),) * num_classes,
    )


def _rate(hits: int, total: int, alpha: float, default: float) -> float:
    if total == 0:
        return default
    return (hits + alpha) / (total + 2 * alpha)


def _profile_from_counts(annotator_id, correct, total, rejections, negatives, alpha) -> AnnotatorProfile:
    c = len(correct)
    return AnnotatorProfile(
        annotator_id,
        tuple(_rate(int(correct[k]), int(total[k]), alpha, DEFAULT_SENSITIVITY) for k in range(c)),
        tuple(_rate(int(rejections[k]), int(negatives[k]), alpha, DEFAULT_SPECIFICITY) for k in range(c)),
        tuple((int(correct[k]), int(total[k])) for k in range(c)),
        tuple((int(rejections[k]), int(negatives[k])) for k in range(c)),
    )


class _GoldTally:
    def __init__(self, c: int):
        self.correct = np.zeros(c, dtype=int)
        self.total = np.zeros(c, dtype=int)
        self.rejections = np.zeros(c, dtype=int)
        self.negatives = np.zeros(c, dtype=int)

    def add(self, true: int, reported: int):
        self.total[true] += 1
        self.correct[true] += reported == true
        # every class other than the true one had a chance to be falsely reported
        self.negatives += 1
        self.negatives[true] -= 1
        self.rejections += 1
        self.rejections[true] -= 1
        if reported != true:
            self.rejections[reported] -= 1

    def profile(self, annotator_id, alpha) -> AnnotatorProfile:
        return _profile_from_counts(annotator_id, self.correct, self.total, self.rejections, self.negatives, alpha)


def _gold_lookup(gold: Dataset) -> Tuple[set, Dict[Tuple[int, str], int]]:
    flagged = {im.image_id for im in gold.images if im.is_gold}
    gold_ids = flagged or {im.image_id for im in gold.images}
    truth = {}
    for b in gold.boxes:
        if b.image_id in gold_ids and b.ann_id is not None:
            truth[(b.image_id, str(b.ann_id))] = b.label
    return gold_ids, truth


def _gold_pairs(events: Sequence[AnnotationEvent], gold: Dataset):
    gold_ids, truth = _gold_lookup(gold)
    for ev in events:
        if ev.image_id not in gold_ids or ev.is_delete:
            continue
        true = truth.get((ev.image_id, ev.box_id))
        if true is not None:
            yield ev, true


def estimate_reliability(
    events: Sequence[AnnotationEvent], gold: Dataset, alpha: float = LAPLACE_ALPHA
) -> Dict[str, AnnotatorProfile]:
    """Per-annotator, per-class sensitivity and specificity from gold images.

    An event counts when it labels a gold box, matched by persistent box id to
    the gold annotation id. Deletions and added boxes carry no label evidence and
    are skipped. Rates are Laplace-smoothed, (hits + alpha) / (trials + 2 alpha);
    a class with no trials falls back to the default rates. Annotators with no
    gold evidence are absent from the result (see :func:`profile_for`).
    """
    c = len(gold.taxonomy)
    tallies: Dict[str, _GoldTally] = {}
    for ev, true in _gold_pairs(events, gold):
        tallies.setdefault(ev.annotator_id, _GoldTally(c)).add(true, ev.label)
    return {a: t.profile(a, alpha) for a, t in sorted(tallies.items())}


def running_profiles(
    events: Sequence[AnnotationEvent], gold: Dataset, alpha: float = LAPLACE_ALPHA
) -> Dict[Tuple[str, int], AnnotatorProfile]:
    """Profile of each annotator as it stood when they reached each image.

    The viewing order of an annotator is the order in which their images first
    appear in ``events``. Only gold images seen strictly earlier contribute.
    """
    c = len(gold.taxonomy)
    gold_ids, truth = _gold_lookup(gold)
    sequence: Dict[str, List[int]] = {}
    per_image: Dict[Tuple[str, int], List[AnnotationEvent]] = {}
    for ev in events:
        key = (ev.annotator_id, ev.image_id)
        if key not in per_image:
            per_image[key] = []
            sequence.setdefault(ev.annotator_id, []).append(ev.image_id)
        per_image[key].append(ev)
    out = {}
    for a, images in sequence.items():
        tally = _GoldTally(c)
        for img in images:
            out[(a, img)] = tally.profile(a, alpha)
            if img in gold_ids:
                for ev in per_image[(a, img)]:
                    true = truth.get((img, ev.box_id))
                    if true is not None and not ev.is_delete:
                        tally.add(true, ev.label)
    return out


def profile_for(profiles: Mapping[str, AnnotatorProfile], annotator_id: str, num_classes: int) -> AnnotatorProfile:
    p = profiles.get(annotator_id)
    return p if p is not None else default_profile(annotator_id, num_classes)


# STAPLE


def confusion_from_rates(sensitivity: Sequence[float], specificity: Sequence[float], floor: float = CONFUSION_FLOOR) -> np.ndarray:
    """Initial confusion matrix from per-class sensitivity/specificity.

    Row k keeps ``sensitivity[k]`` on the diagonal. The remaining mass goes to
    the other classes in proportion to their false-positive rates
    ``1 - specificity[l]`` (uniformly when all specificities are equal).
    Entries are floored at ``floor`` and rows renormalised.
    """
    sens = np.asarray(sensitivity, dtype=float)
    fp = 1.0 - np.asarray(specificity, dtype=float)
    c = sens.shape[0]
    theta = np.zeros((c, c))
    for k in range(c):
        w = fp.copy()
        w[k] = 0.0
        if w.sum() <= 0:
            w = np.ones(c)
            w[k] = 0.0
        theta[k] = (1.0 - sens[k]) * w / w.sum()
        theta[k, k] = sens[k]
    theta = np.maximum(theta, floor)
    return theta / theta.sum(axis=1, keepdims=True)


def _gather_log_theta(log_theta: np.ndarray, M: np.ndarray) -> np.ndarray:
    """log theta_j(M[j, i], k) for every (j, i, k); zero where M is absent."""
    present = M != ABSENT
    idx = np.where(present, M, 0)
    n_a = M.shape[0]
    # log_theta[j, :, idx[j, i]] -> (n_a, n_b, C)
    g = log_theta[np.arange(n_a)[:, None], :, idx]
    return np.where(present[:, :, None], g, 0.0)


def e_step(priors: np.ndarray, theta: np.ndarray, M: np.ndarray) -> Tuple[np.ndarray, float]:
    """Posterior over true classes for every box, and the observed-data log-likelihood.

    log W[i, k] = log pi_k + sum_j log theta_j(M[j, i], k), rows normalised in log space.
    """
    with np.errstate(divide="ignore"):
        log_pi = np.log(priors)
        log_theta = np.log(theta)
    log_w = log_pi[None, :] + _gather_log_theta(log_theta, M).sum(axis=0)
    norm = logsumexp(log_w, axis=1)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("a box has zero probability under every class")
    return np.exp(log_w - norm[:, None]), float(norm.sum())


def log_likelihood(priors: np.ndarray, theta: np.ndarray, M: np.ndarray) -> float:
    """sum_i log sum_k pi_k prod_j theta_j(M[j, i], k)."""
    return e_step(priors, theta, M)[1]


def m_step(
    W: np.ndarray, M: np.ndarray, beta: float = CONFUSION_SMOOTHING, previous: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Priors and confusion matrices from posteriors ``W``.

    theta_j(k, l) is proportional to the posterior mass of class k over boxes
    annotator j labelled l, plus ``beta``. With ``beta == 0`` (plain maximum
    likelihood) a row with no mass at all keeps its ``previous`` value.
    """
    n_b, c = W.shape
    priors = W.sum(axis=0) / n_b
    onehot = np.zeros(M.shape + (c,))
    j_idx, i_idx = np.nonzero(M != ABSENT)
    onehot[j_idx, i_idx, M[j_idx, i_idx]] = 1.0
    counts = np.einsum("ik,jil->jkl", W, onehot) + beta
    totals = counts.sum(axis=2, keepdims=True)
    empty = totals[..., 0] <= 0
    if np.any(empty):
        fill = previous if previous is not None else np.full(counts.shape, 1.0 / c)
        counts[empty] = fill[empty]
        totals[empty] = 1.0
    return priors, counts / totals


@dataclass
class StapleResult:
    labels: np.ndarray
    posteriors: np.ndarray
    priors: np.ndarray
    theta: np.ndarray  # (annotators, C, C)
    iterations: int
    converged: bool
    loglik: List[float] = field(default_factory=list)  # one entry per parameter state visited
    ml_fallbacks: int = 0

    def reliability(self, annotator_ids: Sequence[str]) -> ReliabilityModel:
        return ReliabilityModel(self.priors, {a: self.theta[j] for j, a in enumerate(annotator_ids)})


def staple_consensus(
    M,
    S,
    T,
    C: int,
    max_iter: int = 100,
    eps: float = 1e-6,
    beta: float = CONFUSION_SMOOTHING,
    theta0: Optional[np.ndarray] = None,
) -> StapleResult:
    """EM estimate of true labels for the boxes of one image.

    ``M`` is (annotators, boxes) with class indices or -1 for absent;
    ``S``/``T`` are (annotators, C) sensitivities/specificities used to build the
    initial confusion matrices (ignored when ``theta0`` is given). Priors start
    uniform. Each iteration re-estimates priors and confusion matrices from the
    current posteriors (weighted counts plus ``beta`` per cell) and recomputes
    the posteriors; it stops once the largest confusion change falls below
    ``eps``. An iteration whose smoothed update would lower the observed-data
    likelihood uses the unsmoothed update instead, so ``loglik`` never decreases.

    With ``max_iter=0`` the labels are the posterior argmax under the supplied
    reliabilities, with no local refit. On images with few boxes the refit can
    overrule a strict majority, since a handful of boxes cannot pin down a full
    confusion matrix per annotator.
    """
    M = np.asarray(M, dtype=int)
    if C < 2:
        raise ValueError("STAPLE needs at least two classes")
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ValueError("annotation matrix needs at least one annotator and one box")
    if np.any((M != ABSENT) & ((M < 0) | (M >= C))):
        raise ValueError("annotation matrix holds labels outside 0..C-1")
    empty = np.nonzero(np.all(M == ABSENT, axis=0))[0]
    if empty.size:
        raise ValueError(f"boxes {empty.tolist()} have no annotator label")

    if theta0 is None:
        S = np.asarray(S, dtype=float)
        T = np.asarray(T, dtype=float)
        theta = np.stack([confusion_from_rates(S[j], T[j]) for j in range(M.shape[0])])
    else:
        theta = np.array(theta0, dtype=float)
    priors = np.full(C, 1.0 / C)

    W, ll = e_step(priors, theta, M)
    trace = [ll]
    converged = False
    fallbacks = 0
    t = 0
    for t in range(1, max_iter + 1):
        new_priors, new_theta = m_step(W, M, beta, theta)
        new_W, new_ll = e_step(new_priors, new_theta, M)
        if beta > 0 and new_ll < ll:
            # smoothing is a MAP step and may lower the likelihood; the exact ML step cannot
            new_priors, new_theta = m_step(W, M, 0.0, theta)
            new_W, new_ll = e_step(new_priors, new_theta, M)
            fallbacks += 1
        delta = np.max(np.abs(new_theta - theta))
        priors, theta, W, ll = new_priors, new_theta, new_W, new_ll
        trace.append(ll)
        if delta < eps:
            converged = True
            break
    return StapleResult(
        labels=W.argmax(axis=1),
        posteriors=W,
        priors=priors,
        theta=theta,
        iterations=t,
        converged=converged,
        loglik=trace,
        ml_fallbacks=fallbacks,
    )


# dataset assembly


@dataclass
class ConsensusParams:
    method: str = "mv"
    seed: int = 0
    eps: float = 1e-6
    max_iter: int = 100
    beta: float = CONFUSION_SMOOTHING


def consensus_for_image(
    image_id,
    clusters: Sequence[BoxCluster],
    viewers: int,
    num_classes: int,
    params: ConsensusParams,
    profiles: Optional[Mapping[str, AnnotatorProfile]] = None,
) -> List[ConsensusBox]:
    """Consensus boxes for the retained clusters of one image.

    ``profiles`` maps annotator id to the profile that applies on this image.
    """
    kept = [c for c in clusters if c.labeled and resolve_retention(c, viewers)]
    if not kept:
        return []
    geometry = [average_geometry(c) for c in kept]

    if params.method == "mv":
        rng = image_rng(params.seed, image_id)
        out = []
        for c, g in zip(kept, geometry):
            labels = [e.label for e in c.labeled]
            votes = np.bincount(labels, minlength=num_classes) / len(labels)
            out.append(ConsensusBox(image_id, g, majority_vote(labels, rng), tuple(votes), len(labels), True, c.cluster_id))
        return out
    if params.method != "staple":
        raise ValueError(f"unknown consensus method {params.method!r}")

    annotators = sorted({e.annotator_id for c in kept for e in c.labeled})
    row = {a: j for j, a in enumerate(annotators)}
    M = np.full((len(annotators), len(kept)), ABSENT, dtype=int)
    for i, c in enumerate(kept):
        for e in c.labeled:
            M[row[e.annotator_id], i] = e.label
    profiles = profiles or {}
    prof = [profile_for(profiles, a, num_classes) for a in annotators]
    res = staple_consensus(
        M,
        [p.sensitivity for p in prof],
        [p.specificity for p in prof],
        num_classes,
        max_iter=params.max_iter,
        eps=params.eps,
        beta=params.beta,
    )
    out = []
    for i, (c, g) in enumerate(zip(kept, geometry)):
        post = res.posteriors[i] / res.posteriors[i].sum()
        out.append(ConsensusBox(image_id, g, int(res.labels[i]), tuple(post), len(c.labeled), True, c.cluster_id))
    return out


def _image_task(args):
    return consensus_for_image(*args)


def build_consensus_dataset(
    clusters: Mapping[int, Sequence[BoxCluster]],
    images: Sequence[ImageRecord],
    taxonomy: ClassTaxonomy,
    method: str = "mv",
    profiles: Optional[Mapping[str, AnnotatorProfile]] = None,
    seed: int = 0,
    viewers: Optional[Mapping[int, int]] = None,
    running: Optional[Mapping[Tuple[str, int], AnnotatorProfile]] = None,
    eps: float = 1e-6,
    max_iter: int = 100,
    jobs: int = 1,
) -> Dataset:
    """Consensus :class:`Dataset` whose boxes are :class:`ConsensusBox` records.

    ``viewers`` gives the number of annotators shown each image (defaults to
    the distinct annotators appearing in its clusters). With ``running`` given,
    STAPLE uses each annotator's profile as of that image instead of ``profiles``.
    Output order follows ``images``; randomness is drawn per image from ``seed``,
    so the result is the same for any ``jobs``.
    """
    params = ConsensusParams(method=method, seed=seed, eps=eps, max_iter=max_iter)
    c = len(taxonomy)
    tasks = []
    for im in images:
        cl = list(clusters.get(im.image_id, ()))
        if not cl:
            continue
        n_view = viewers.get(im.image_id) if viewers else None
        if n_view is None:
            n_view = len({a for x in cl for a in x.annotators})
        if method == "staple" and running is not None:
            names = {e.annotator_id for x in cl for e in x.labeled}
            prof = {a: running[(a, im.image_id)] for a in names if (a, im.image_id) in running}
        else:
            prof = profiles
        tasks.append((im.image_id, cl, n_view, c, params, prof))

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_image_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_image_task(t) for t in tasks]
    boxes = [b for r in results for b in r]
    return Dataset(taxonomy, list(images), boxes)


def label_accuracy(consensus: Dataset, truth: Dataset) -> Dict[str, Tuple[int, int]]:
    """(correct, total) per class name, over truth boxes whose cluster survived.

    Consensus boxes are joined to truth boxes by pre-annotation id
    (cluster id == str(truth ann_id)). Key ``"all"`` holds the totals.
    """
    truth_label = {(b.image_id, str(b.ann_id)): b.label for b in truth.boxes if b.ann_id is not None}
    names = truth.taxonomy.names
    correct = Counter()
    total = Counter()
    for b in consensus.boxes:
        t = truth_label.get((b.image_id, b.cluster_id))
        if t is None:
            continue
        total[t] += 1
        correct[t] += b.label == t
    out = {names[k]: (correct[k], total[k]) for k in range(len(names))}
    out["all"] = (sum(correct.values()), sum(total.values()))
    return out
