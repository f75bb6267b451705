import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxconsensus.core import Annotation, BBox, ClassTaxonomy
from boxconsensus.evaluation import (
    COCO_VEHICLES,
    IOU_THRESHOLDS,
    average_precision,
    class_ap_table,
    consolidate_boxes,
    consolidate_to_coco,
    iou,
    iou_matrix,
    map_metrics,
    match_detections,
    write_map_report,
)
from oracles import brute_ap, brute_map, exact_iou, random_instance

TAX3 = ClassTaxonomy(("a", "b", "c"))


def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 1, 1)) == 0.0
    assert iou(a, BBox(2, 0, 2, 2)) == 0.0  # touching edges
    assert abs(iou(a, BBox(1, 1, 2, 2)) - 1 / 7) <= 1e-12


coord = st.floats(-1e3, 1e3, allow_nan=False)
size = st.floats(1e-2, 1e3, allow_nan=False)
box_st = st.builds(BBox, coord, coord, size, size)


@given(box_st, box_st, st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_iou_symmetric_bounded_translation_invariant(a, b, dx, dy):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a.translated(dx, dy), b.translated(dx, dy)) == pytest.approx(v, abs=1e-9)


@given(st.tuples(*[st.integers(-20, 20)] * 2, *[st.integers(1, 20)] * 2),
       st.tuples(*[st.integers(-20, 20)] * 2, *[st.integers(1, 20)] * 2))
def test_iou_matches_exact_rational(a, b):
    a, b = BBox(*a), BBox(*b)
    assert iou(a, b) == float(exact_iou(a, b))
    assert iou_matrix([a], [b])[0, 0] == float(exact_iou(a, b))


def test_match_examples():
    g = [(BBox(0, 0, 10, 10), 1)]
    assert match_detections([(BBox(0, 0, 10, 10), 1, 0.9)], g, 0.5).det_tp == [True]
    res = match_detections([(BBox(0, 0, 10, 10), 1, 0.3), (BBox(0, 0, 10, 10), 1, 0.8)], g, 0.5)
    assert res.det_tp == [False, True]
    assert res.gt_matched == [True]
    # IoU 0.6: 60 / 100
    shifted = BBox(0, 0, 10, 6)
    assert iou(shifted, g[0][0]) == pytest.approx(0.6)
    assert match_detections([(shifted, 1, 0.9)], g, 0.75).det_tp == [False]
    assert match_detections([(BBox(0, 0, 10, 10), 2, 0.9)], g, 0.5).det_tp == [False]


def test_match_iou_tie_goes_to_lower_gt_index():
    gts = [(BBox(0, 0, 10, 10), 0), (BBox(0, 0, 10, 10), 0)]
    res = match_detections([(BBox(0, 0, 10, 10), 0, 0.5)], gts, 0.5)
    assert res.det_gt == [0]


def test_ap_examples():
    assert average_precision([0.9], [True], 1) == 1.0
    assert average_precision([0.9, 0.8], [False, True], 1) == 0.5
    assert average_precision([], [], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision([0.5], [True], 0)


def test_ap_envelope():
    # precision 1, 1/2, 2/3 at recalls 1/3, 1/3, 2/3; third gt never found
    ap = average_precision([0.9, 0.8, 0.7], [True, False, True], 3)
    assert ap == pytest.approx(1 / 3 * 1 + 1 / 3 * 2 / 3)


@given(st.lists(st.tuples(st.floats(0.01, 1), st.booleans()), max_size=25), st.integers(1, 30), st.floats(0.1, 50))
def test_ap_rank_only_and_bounded(items, n_gt, scale):
    conf = [c for c, _ in items]
    tp = [t for _, t in items]
    n_gt = max(n_gt, sum(tp))
    ap = average_precision(conf, tp, n_gt)
    assert 0.0 <= ap <= 1.0
    assert average_precision([c * scale for c in conf], tp, n_gt) == pytest.approx(ap, abs=1e-12)


def test_map_perfect_and_threshold_steps():
    gts = [Annotation(1, BBox(0, 0, 10, 10), 0), Annotation(2, BBox(5, 5, 20, 20), 1)]
    perfect = [Annotation(g.image_id, g.bbox, g.label, score=0.9) for g in gts]
    rep = map_metrics(perfect, gts, TAX3)
    assert rep.map50 == rep.map75 == rep.map5095 == 1.0
    # IoU exactly 0.6 against every gt
    sixty = [Annotation(1, BBox(0, 0, 10, 6), 0, score=0.9), Annotation(2, BBox(5, 5, 20, 12), 1, score=0.9)]
    rep = map_metrics(sixty, gts, TAX3)
    table = class_ap_table(sixty, gts, 3)
    assert [table[0][t] for t in IOU_THRESHOLDS] == [1, 1, 1] + [0] * 7
    assert rep.map5095 == pytest.approx(0.3)
    assert set(rep.per_class) == {"a", "b"}


def test_map_errors():
    with pytest.raises(ValueError):
        map_metrics([], [], TAX3)
    with pytest.raises(ValueError):
        map_metrics([Annotation(1, BBox(0, 0, 1, 1), 7, score=1)], [Annotation(1, BBox(0, 0, 1, 1), 0)], TAX3)


def _tuples(dets, gts):
    return [(d.image_id, d.bbox, d.label, d.score) for d in dets], [(g.image_id, g.bbox, g.label) for g in gts]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_map_equals_reference(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    rep = map_metrics(dets, gts, TAX3)
    d, g = _tuples(dets, gts)
    ref = brute_map(d, g, 3, IOU_THRESHOLDS)
    assert rep.map50 == pytest.approx(ref[0], abs=1e-9)
    assert rep.map75 == pytest.approx(ref[5], abs=1e-9)
    assert rep.map5095 == pytest.approx(sum(ref) / 10, abs=1e-9)
    assert rep.map50 >= rep.map75
    table = class_ap_table(dets, gts, 3)
    for c, row in table.items():
        for t, v in row.items():
            assert v == pytest.approx(brute_ap(d, g, c, t), abs=1e-9)


def test_consolidation():
    tax = ClassTaxonomy()
    car, bus, truck = (COCO_VEHICLES.index(n) for n in ("Car", "Bus", "Truck"))
    for name in ("Hatchback", "Sedan", "SUV", "MUV", "Van"):
        assert consolidate_to_coco(tax.index(name)) == car
    assert consolidate_to_coco(tax.index("Bus")) == bus
    assert consolidate_to_coco(tax.index("M. Bus")) == bus
    assert consolidate_to_coco(tax.index("Truck")) == truck
    for name in ("Cycle", "2-Wheeler", "3-Wheeler", "LCV", "T. Traveller", "Other"):
        assert consolidate_to_coco(tax.index(name)) is None
    with pytest.raises(IndexError):
        consolidate_to_coco(14)
    boxes = [Annotation(1, BBox(0, 0, 1, 1), tax.index("Sedan")), Annotation(1, BBox(0, 0, 1, 1), tax.index("Cycle"))]
    assert [b.label for b in consolidate_boxes(boxes)] == [car]


def test_report_csv(tmp_path):
    gts = [Annotation(1, BBox(0, 0, 10, 10), 0)]
    rep = map_metrics([Annotation(1, BBox(0, 0, 10, 10), 0, score=1.0)], gts, TAX3)
    p = tmp_path / "r.csv"
    write_map_report(rep, p)
    assert p.read_text().splitlines() == [
        "class,n_gt,AP50,AP75,AP50_95",
        "a,1,1.000000,1.000000,1.000000",
        "all,1,1.000000,1.000000,1.000000",
    ]
