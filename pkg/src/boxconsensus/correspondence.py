"""Grouping per-annotator box events into clusters that denote one physical object."""

from __future__ import annotations

import re
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .core import Action, AnnotationEvent, BBox, BoxCluster, ClusterOrigin
from .evaluation import iou

DEFAULT_IOU = 0.60


def natural_key(s: str):
    return [(0, int(tok), "") if tok.isdigit() else (1, 0, tok) for tok in re.findall(r"\d+|\D+", s)]


def events_by_image(events: Iterable[AnnotationEvent]) -> "OrderedDict[int, List[AnnotationEvent]]":
    out: "OrderedDict[int, List[AnnotationEvent]]" = OrderedDict()
    for ev in events:
        out.setdefault(ev.image_id, []).append(ev)
    return out


def viewers_of(events: Iterable[AnnotationEvent]) -> int:
    return len({ev.annotator_id for ev in events})


def latest_per_box(events: Sequence[AnnotationEvent]) -> List[AnnotationEvent]:
    """Keep one event per (annotator, box_id); a later event replaces an earlier one."""
    last: Dict[Tuple[str, str], AnnotationEvent] = {}
    for ev in events:
        last.pop((ev.annotator_id, ev.box_id), None)
        last[(ev.annotator_id, ev.box_id)] = ev
    return list(last.values())


def _match_added(added: List[AnnotationEvent], iou_threshold: float) -> List[List[AnnotationEvent]]:
    # greedy: strongest overlaps first, merging only clusters with disjoint annotators
    n = len(added)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if added[i].annotator_id == added[j].annotator_id:
                continue
            v = iou(added[i].bbox, added[j].bbox)
            if v > 0 and v >= iou_threshold:
                pairs.append((-v, i, j))
    pairs.sort()
    owner = list(range(n))
    groups = {i: [i] for i in range(n)}
    annot = {i: {added[i].annotator_id} for i in range(n)}
    for _, i, j in pairs:
        a, b = owner[i], owner[j]
        if a == b or annot[a] & annot[b]:
            continue
        if b < a:
            a, b = b, a
        for m in groups[b]:
            owner[m] = a
        groups[a].extend(groups.pop(b))
        annot[a] |= annot.pop(b)
    return [[added[m] for m in sorted(groups[g])] for g in sorted(groups)]


def group_events(
    events: Sequence[AnnotationEvent],
    iou_threshold: float = DEFAULT_IOU,
    preannotation_ids: Optional[Set[str]] = None,
) -> List[BoxCluster]:
    """Cluster one image's events.

    Events on a persistent box id form one cluster. Added boxes are matched
    across annotators greedily by descending IoU (pairs need IoU > 0 and
    >= ``iou_threshold``), at most one box per annotator per cluster.
    Candidates are visited in (annotator_id, box_id) order so the result does
    not depend on log order. Pre-annotated clusters come first, sorted by box id.

    When ``preannotation_ids`` is not given, every box id touched by a
    non-add event is taken to be a pre-annotation.
    """
    if not events:
        return []
    image_ids = {ev.image_id for ev in events}
    if len(image_ids) != 1:
        raise ValueError(f"group_events expects one image, got {sorted(image_ids)}")
    image_id = image_ids.pop()
    events = latest_per_box(events)

    added = [ev for ev in events if ev.action is Action.ADD]
    if preannotation_ids is None:
        pre_ids = {ev.box_id for ev in events if ev.action is not Action.ADD}
    else:
        pre_ids = set(preannotation_ids)
    for ev in events:
        if ev.action is Action.ADD and ev.box_id in pre_ids:
            raise ValueError(f"image {image_id}: added box reuses pre-annotation id {ev.box_id!r}")
        if ev.action is not Action.ADD and ev.box_id not in pre_ids:
            raise ValueError(
                f"image {image_id}: {ev.action.value} of box {ev.box_id!r} matches no pre-annotation"
            )

    by_id: Dict[str, List[AnnotationEvent]] = {}
    for ev in events:
        if ev.action is not Action.ADD:
            by_id.setdefault(ev.box_id, []).append(ev)
    clusters = [
        BoxCluster(box_id, image_id, tuple(sorted(members, key=lambda e: e.annotator_id)), ClusterOrigin.PRE_ANNOTATED)
        for box_id, members in sorted(by_id.items(), key=lambda kv: natural_key(kv[0]))
    ]

    added.sort(key=lambda e: (e.annotator_id, natural_key(e.box_id)))
    for group in _match_added(added, iou_threshold):
        head = group[0]
        clusters.append(
            BoxCluster(f"added:{head.annotator_id}:{head.box_id}", image_id, tuple(group), ClusterOrigin.ADDED)
        )
    return clusters


def average_geometry(cluster: BoxCluster) -> BBox:
    """Coordinate-wise mean of (x, y, w, h) over the cluster's non-delete members."""
    boxes = [ev.bbox for ev in cluster.labeled]
    if not boxes:
        raise ValueError(f"cluster {cluster.cluster_id} has only delete events")
    n = len(boxes)
    return BBox(
        sum(b.x for b in boxes) / n,
        sum(b.y for b in boxes) / n,
        sum(b.w for b in boxes) / n,
        sum(b.h for b in boxes) / n,
    )


def resolve_retention(cluster: BoxCluster, viewers: int) -> bool:
    """A box is dropped only when a strict majority of the image's viewers deleted it.

    An even split (e.g. 2 deletes among 4 viewers) keeps the box.
    """
    if viewers <= 0:
        raise ValueError("retention needs at least one viewer")
    if viewers < len(cluster.members):
        raise ValueError(f"cluster {cluster.cluster_id} has more members than viewers ({viewers})")
    return 2 * cluster.deletes <= viewers


def find_near_duplicates(clusters: Sequence[BoxCluster], iou_threshold: float = DEFAULT_IOU):
    """Added clusters overlapping a pre-annotated cluster at >= ``iou_threshold``.

    They are kept as separate objects; this only reports them.
    Returns (added cluster id, pre-annotated cluster id, IoU) triples.
    """
    pre = [(c.cluster_id, average_geometry(c)) for c in clusters if c.origin is ClusterOrigin.PRE_ANNOTATED and c.labeled]
    out = []
    for c in clusters:
        if c.origin is not ClusterOrigin.ADDED:
            continue
        g = average_geometry(c)
        for pid, pg in pre:
            v = iou(g, pg)
            if v >= iou_threshold:
                out.append((c.cluster_id, pid, v))
    return out
