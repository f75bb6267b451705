import math

import numpy as np
import pytest

from boxconsensus.consensus import build_consensus_dataset, label_accuracy
from boxconsensus.core import Action, ClassTaxonomy
from boxconsensus.correspondence import events_by_image, group_events
from boxconsensus.evaluation import iou
from boxconsensus.ingest import write_event_log
from boxconsensus.simulator import (
    InfeasibleGeometry,
    SimConfig,
    accuracy_confusion,
    generate_truth,
    gold_dataset,
    profile_from_confusion,
    simulate_campaign,
)


def test_accuracy_confusion():
    m = accuracy_confusion(0.9, 4)
    np.testing.assert_allclose(m.sum(axis=1), 1)
    assert m[0, 0] == 0.9 and m[0, 1] == pytest.approx(0.1 / 3)
    np.testing.assert_allclose(accuracy_confusion(None, 5), 0.2)
    with pytest.raises(ValueError):
        accuracy_confusion(1.5, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(miss_prob=1.2)
    with pytest.raises(ValueError):
        SimConfig(confusions=(np.full((14, 14), 0.1),))
    with pytest.raises(ValueError):
        SimConfig(class_probs=(1.0,))
    with pytest.raises(ValueError):
        SimConfig(gold_per_level=16)
    assert len(SimConfig(annotators_per_image=4).confusions) == 4


def test_zero_images():
    ds = generate_truth(SimConfig(n_images=0))
    assert ds.images == [] and ds.boxes == []


def test_truth_is_deterministic():
    cfg = SimConfig(n_images=20, seed=5)
    assert generate_truth(cfg) == generate_truth(cfg)
    assert generate_truth(cfg) != generate_truth(SimConfig(n_images=20, seed=6))


def test_truth_box_count_distribution():
    ds = generate_truth(SimConfig(n_images=1000, seed=1))
    # Poisson(13) per image: sd of the total is sqrt(13000)
    assert abs(len(ds.boxes) - 13000) <= 3 * math.sqrt(13000)


def test_truth_geometry():
    cfg = SimConfig(n_images=30, seed=2)
    ds = generate_truth(cfg)
    for boxes in ds.boxes_by_image().values():
        for b in boxes:
            assert b.bbox.within(cfg.width, cfg.height)
        for i, a in enumerate(boxes):
            for b in boxes[i + 1:]:
                assert iou(a.bbox, b.bbox) <= 0.3
    assert len({b.ann_id for b in ds.boxes}) == len(ds.boxes)


def test_infeasible_geometry():
    cfg = SimConfig(n_images=1, mean_boxes=400, width=200, height=200, min_size=150, max_size=190, seed=0)
    with pytest.raises(InfeasibleGeometry):
        generate_truth(cfg)


def test_prefix_stability():
    # per-image substreams: the first images do not depend on how many follow
    small = generate_truth(SimConfig(n_images=5, seed=9))
    big = generate_truth(SimConfig(n_images=50, seed=9))
    assert [(b.image_id, b.bbox, b.label) for b in small.boxes] == [(b.image_id, b.bbox, b.label) for b in big.boxes[: len(small.boxes)]]


def test_assignment_contract():
    cfg = SimConfig.from_accuracies([1.0] * 7, n_images=45, annotators_per_image=5, seed=3)
    truth = generate_truth(cfg)
    camp = simulate_campaign(truth, cfg)
    for a, seq in camp.assignment.items():
        assert len(seq) == len(set(seq))
    per_image = {}
    for ev in camp.events:
        per_image.setdefault(ev.image_id, set()).add(ev.annotator_id)
    for im in truth.images:
        if truth.boxes_by_image()[im.image_id]:
            assert len(per_image[im.image_id]) == 5
    assert sum(len(s) for s in camp.assignment.values()) == 45 * 5
    assert len(camp.gold_images) == 15
    assert not any(im.is_gold for im in truth.images)


def test_pool_too_small():
    cfg = SimConfig.from_accuracies([1.0] * 3, n_images=4, annotators_per_image=5)
    with pytest.raises(ValueError):
        simulate_campaign(generate_truth(cfg), cfg)


def test_gold_interleaved_in_viewing_order():
    cfg = SimConfig.from_accuracies([1.0] * 5, n_images=60, annotators_per_image=5, seed=4)
    camp = simulate_campaign(generate_truth(cfg), cfg)
    flags = [img in camp.gold_images for img in camp.assignment["ann000"]]
    first_regular = flags.index(False)
    assert any(flags[first_regular:])


def test_noiseless_events_reproduce_truth():
    cfg = SimConfig.from_accuracies([1.0] * 5, n_images=25, seed=6)
    truth = generate_truth(cfg)
    camp = simulate_campaign(truth, cfg)
    assert {e.action for e in camp.events} == {Action.CONFIRM}
    by_img = events_by_image(camp.events)
    clusters = {img: group_events(evs) for img, evs in by_img.items()}
    mv = build_consensus_dataset(clusters, truth.images, cfg.taxonomy, "mv")
    got = sorted((b.image_id, b.label, *b.bbox.as_list()) for b in mv.boxes)
    want = sorted((b.image_id, b.label, *b.bbox.as_list()) for b in truth.boxes)
    assert [g[:2] for g in got] == [w[:2] for w in want]
    np.testing.assert_allclose([g[2:] for g in got], [w[2:] for w in want], rtol=0, atol=1e-9)


def test_event_log_bytes_fixed_by_seed(tmp_path):
    cfg = SimConfig.from_accuracies([0.9, None, 0.7], n_images=15, annotators_per_image=3, jitter_sigma=3,
                                    size_jitter=0.1, miss_prob=0.1, add_prob=0.2, seed=12)
    paths = []
    for name in ("a", "b"):
        camp = simulate_campaign(generate_truth(cfg), cfg)
        paths.append(tmp_path / f"{name}.jsonl")
        write_event_log(camp.events, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_uniform_guessers_reach_chance():
    tax = ClassTaxonomy(("a", "b", "c", "d"))
    cfg = SimConfig.from_accuracies([None] * 5, n_images=150, taxonomy=tax, seed=13)
    truth = generate_truth(cfg)
    camp = simulate_campaign(truth, cfg)
    by_img = events_by_image(camp.events)
    clusters = {img: group_events(evs) for img, evs in by_img.items()}
    mv = build_consensus_dataset(clusters, truth.images, tax, "mv", seed=1)
    correct, n = label_accuracy(mv, truth)["all"]
    sd = math.sqrt(0.25 * 0.75 / n)
    assert abs(correct / n - 0.25) <= 3 * sd


def test_jitter_and_misses():
    cfg = SimConfig.from_accuracies([1.0] * 5, n_images=40, jitter_sigma=5, size_jitter=0.05, miss_prob=0.2, add_prob=0.5, seed=14)
    truth = generate_truth(cfg)
    camp = simulate_campaign(truth, cfg)
    actions = [e.action for e in camp.events]
    pre = [a for a in actions if a is not Action.ADD]
    assert abs(pre.count(Action.DELETE) / len(pre) - 0.2) < 0.03
    assert 0 < actions.count(Action.ADD)
    for e in camp.events:
        if e.bbox is not None:
            assert e.bbox.within(cfg.width, cfg.height)


def test_true_profiles():
    p = profile_from_confusion("x", accuracy_confusion(0.9, 3))
    assert p.sensitivity == pytest.approx((0.9, 0.9, 0.9))
    assert p.specificity == pytest.approx((0.95, 0.95, 0.95))
    cfg = SimConfig.from_accuracies([0.9, 0.8], n_images=3, annotators_per_image=2)
    camp = simulate_campaign(generate_truth(cfg), cfg)
    assert camp.true_profiles()["ann001"].sensitivity[0] == pytest.approx(0.8)


def test_gold_dataset_flags():
    cfg = SimConfig.from_accuracies([1.0] * 5, n_images=30, seed=1)
    truth = generate_truth(cfg)
    camp = simulate_campaign(truth, cfg)
    gold = gold_dataset(truth, camp)
    assert {im.image_id for im in gold.images} == camp.gold_images
    assert all(im.is_gold for im in gold.images)
