"""Command-line entry point: ``boxconsensus <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .config import load_scoring_config, load_sim_config
from .consensus import build_consensus_dataset, estimate_reliability, label_accuracy, running_profiles
from .core import ClassTaxonomy, ImageRecord, ScoreCard
from .correspondence import events_by_image, find_near_duplicates, group_events
from .curation import score_dataset, stratified_split
from .evaluation import COCO_VEHICLES, consolidate_boxes, map_metrics, write_map_report
from .ingest import (
    Dataset,
    FormatError,
    parse_coco,
    parse_detections,
    parse_event_log,
    validate_dataset,
    write_coco,
    write_event_log,
    write_report,
)
from .simulator import generate_truth, gold_dataset, mark_gold, simulate_campaign

log = logging.getLogger("boxconsensus")

DEFAULT_WIDTH, DEFAULT_HEIGHT = 1920.0, 1080.0


def _taxonomy(args) -> ClassTaxonomy:
    return ClassTaxonomy.from_file(args.taxonomy) if getattr(args, "taxonomy", None) else ClassTaxonomy()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def _write_csv(path, fields: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in fields})


# ingest


def cmd_ingest(args) -> int:
    tax = _taxonomy(args)
    if args.coco:
        ds = parse_coco(args.coco, tax)
        report = validate_dataset(ds)
        print(f"{args.coco}: {report.num_images} images, {report.num_boxes} boxes, "
              f"{len(report.out_of_bounds)} outside their image")
        if args.report:
            write_report(report, args.report)
    else:
        events = parse_event_log(args.events, tax)
        by_image = events_by_image(events)
        counts = {}
        for ev in events:
            counts[ev.action.value] = counts.get(ev.action.value, 0) + 1
        print(f"{args.events}: {len(events)} events on {len(by_image)} images "
              f"from {len({e.annotator_id for e in events})} annotators")
        if args.report:
            Path(args.report).write_text(json.dumps({"events": len(events), "images": len(by_image), "actions": counts}, indent=2, sort_keys=True) + "\n")
    return 0


# consensus


def _images_for(events_by_img, images_path, tax) -> List[ImageRecord]:
    if images_path:
        known = parse_coco(images_path, tax).image_map()
    else:
        known = {}
    out = []
    for img in sorted(events_by_img):
        out.append(known.get(img) or ImageRecord(img, DEFAULT_WIDTH, DEFAULT_HEIGHT))
    return out


def run_consensus(events, gold: Optional[Dataset], tax, method, seed, eps, max_iter, iou, jobs,
                  images: Sequence[ImageRecord], profile_mode="campaign"):
    by_img = events_by_image(events)
    clusters = {img: group_events(evs, iou) for img, evs in by_img.items()}
    viewers = {img: len({e.annotator_id for e in evs}) for img, evs in by_img.items()}
    profiles, running = None, None
    if method == "staple" and gold is not None:
        if profile_mode == "running":
            running = running_profiles(events, gold)
        else:
            profiles = estimate_reliability(events, gold)
    ds = build_consensus_dataset(
        clusters, images, tax, method, profiles=profiles, seed=seed, viewers=viewers,
        running=running, eps=eps, max_iter=max_iter, jobs=jobs,
    )
    return ds, clusters


def cmd_consensus(args) -> int:
    tax = _taxonomy(args)
    events = parse_event_log(args.events, tax)
    gold = parse_coco(args.gold, tax) if args.gold else None
    images = _images_for(events_by_image(events), args.images, tax)
    ds, clusters = run_consensus(events, gold, tax, args.method, args.seed, args.eps, args.max_iter,
                                 args.iou, args.jobs, images, args.profiles)
    write_coco(ds, args.out)
    dupes = [d for cl in clusters.values() for d in find_near_duplicates(cl, args.iou)]
    print(f"{len(ds.boxes)} consensus boxes over {len(ds.images)} images ({args.method}); "
          f"{len(dupes)} added boxes overlap a pre-annotation")
    return 0


# score / split / eval


def cmd_score(args) -> int:
    tax = _taxonomy(args)
    images = parse_coco(args.images, tax).images if args.images else None
    preds = []
    for p in args.predictions:
        raw = json.loads(Path(p).read_text(encoding="utf-8"))
        if isinstance(raw, dict):
            preds.append(parse_coco(p, tax))
        else:
            if images is None:
                raise FormatError(f"{p}: a results array needs --images for image sizes")
            preds.append(Dataset(tax, list(images), parse_detections(p, tax, images)))
    config = None
    if args.config:
        ref = preds[0]
        counts = {}
        for b in ref.boxes:
            if args.min_score is None or b.score is None or b.score >= args.min_score:
                counts[b.image_id] = counts.get(b.image_id, 0) + 1
        config = load_scoring_config(
            args.config, m_bb_max=float(max(1, max(counts.values(), default=1))), m_max_classes=float(len(tax))
        )
    cards = score_dataset(preds, config, min_score=args.min_score)
    _write_csv(args.out, ScoreCard.CSV_FIELDS, [c.as_row() for c in cards])
    print(f"scored {len(cards)} images from {len(preds)} models")
    return 0


def cmd_split(args) -> int:
    tax = _taxonomy(args)
    ds = parse_coco(args.coco, tax)
    train, val = stratified_split(ds, args.fraction, args.seed)
    write_coco(train, args.out_train)
    write_coco(val, args.out_val)
    print(f"train: {len(train.images)} images, val: {len(val.images)} images")
    return 0


def evaluate(gt: Dataset, dets, consolidate: bool):
    gts = list(gt.boxes)
    tax = gt.taxonomy
    if consolidate:
        gts = consolidate_boxes(gts, tax)
        dets = consolidate_boxes(dets, tax)
        tax = COCO_VEHICLES
    return map_metrics(dets, gts, tax)


def cmd_eval(args) -> int:
    tax = _taxonomy(args)
    gt = parse_coco(args.gt, tax)
    dets = parse_detections(args.dets, tax, gt.images)
    report = evaluate(gt, dets, args.consolidate_coco)
    write_map_report(report, args.out)
    print(f"mAP50={report.map50:.4f} mAP75={report.map75:.4f} mAP50:95={report.map5095:.4f}")
    return 0


# simulate / pipeline


def _profiles_rows(profiles, tax):
    for a, p in sorted(profiles.items()):
        for k, name in enumerate(tax.names):
            yield {"annotator_id": a, "class": name, "sensitivity": p.sensitivity[k], "specificity": p.specificity[k]}


def _simulate(config_path, seed, tax):
    cfg = load_sim_config(config_path, tax)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    truth = generate_truth(cfg)
    camp = simulate_campaign(truth, cfg)
    return cfg, truth, camp


def cmd_simulate(args) -> int:
    tax = _taxonomy(args)
    cfg, truth, camp = _simulate(args.config, args.seed, tax)
    write_event_log(camp.events, args.out_events)
    write_coco(mark_gold(truth, camp.gold_images), args.out_truth)
    if args.out_gold:
        write_coco(gold_dataset(truth, camp), args.out_gold)
    if args.out_profiles:
        _write_csv(args.out_profiles, ("annotator_id", "class", "sensitivity", "specificity"),
                   _profiles_rows(camp.true_profiles(cfg.class_probs), cfg.taxonomy))
    print(f"{len(truth.images)} images, {len(truth.boxes)} true boxes, {len(camp.events)} events, "
          f"{len(camp.gold_images)} gold images")
    return 0


ACCURACY_FIELDS = ("class", "n_truth", "mv_correct", "mv_accuracy", "staple_correct", "staple_accuracy")


def accuracy_rows(mv, st):
    rows = []
    for name in mv:
        (mc, n), (sc, _) = mv[name], st[name]
        rows.append({
            "class": name,
            "n_truth": n,
            "mv_correct": mc,
            "mv_accuracy": mc / n if n else float("nan"),
            "staple_correct": sc,
            "staple_accuracy": sc / n if n else float("nan"),
        })
    return rows


def cmd_pipeline(args) -> int:
    tax = _taxonomy(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg, truth, camp = _simulate(args.config, args.seed, tax)
    seed = cfg.seed
    tax = cfg.taxonomy
    truth = mark_gold(truth, camp.gold_images)
    gold = gold_dataset(truth, camp)
    write_event_log(camp.events, out / "events.jsonl")
    write_coco(truth, out / "truth.json")

    results = {}
    for method in ("mv", "staple"):
        ds, _ = run_consensus(camp.events, gold, tax, method, seed, args.eps, args.max_iter, args.iou,
                              args.jobs, truth.images, args.profiles)
        write_coco(ds, out / f"consensus_{method}.json")
        results[method] = ds
        if truth.boxes:
            write_map_report(evaluate(truth, ds.boxes, False), out / f"eval_{method}.csv")

    rows = accuracy_rows(label_accuracy(results["mv"], truth), label_accuracy(results["staple"], truth))
    _write_csv(out / "report.csv", ACCURACY_FIELDS, rows)
    overall = rows[-1]
    print(f"label accuracy over {overall['n_truth']} boxes: MV {overall['mv_accuracy']:.4f}, "
          f"STAPLE {overall['staple_accuracy']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxconsensus", description="Consensus, curation and evaluation for crowd-annotated boxes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def taxonomy_arg(sp):
        sp.add_argument("--taxonomy", help="class-name file, one per line (default: the 14 UVH classes)")

    sp = sub.add_parser("ingest", help="parse and validate a COCO file or an event log")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--coco")
    src.add_argument("--events")
    taxonomy_arg(sp)
    sp.add_argument("--report", help="write a JSON summary here")
    sp.set_defaults(func=cmd_ingest)

    def consensus_args(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--eps", type=float, default=1e-6)
        sp.add_argument("--max-iter", type=int, default=100)
        sp.add_argument("--iou", type=float, default=0.60, help="IoU for matching added boxes")
        sp.add_argument("--profiles", choices=("campaign", "running"), default="campaign",
                        help="STAPLE reliability: end-of-campaign gold accuracy or accuracy so far")
        sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("consensus", help="consensus labels and boxes from an event log")
    sp.add_argument("--events", required=True)
    sp.add_argument("--gold", help="COCO file with gold truth (images flagged is_gold, or all of them)")
    sp.add_argument("--method", choices=("mv", "staple"), default="mv")
    sp.add_argument("--images", help="COCO file giving image sizes")
    sp.add_argument("--out", required=True)
    consensus_args(sp)
    taxonomy_arg(sp)
    sp.set_defaults(func=cmd_consensus)

    sp = sub.add_parser("score", help="per-image disagreement and difficulty from several models")
    sp.add_argument("--predictions", nargs="+", required=True)
    sp.add_argument("--images", help="COCO file with image sizes (needed for results arrays)")
    sp.add_argument("--config", help="key=value scoring config")
    sp.add_argument("--min-score", type=float, default=None)
    sp.add_argument("--out", required=True)
    taxonomy_arg(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("split", help="stratified train/validation split")
    sp.add_argument("--coco", required=True)
    sp.add_argument("--fraction", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-train", required=True)
    sp.add_argument("--out-val", required=True)
    taxonomy_arg(sp)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("eval", help="mAP of detections against ground truth")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--dets", required=True)
    sp.add_argument("--consolidate-coco", action="store_true", help="evaluate on COCO Car/Bus/Truck only")
    sp.add_argument("--out", required=True)
    taxonomy_arg(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("simulate", help="synthetic annotation campaign")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    sp.add_argument("--out-events", required=True)
    sp.add_argument("--out-truth", required=True)
    sp.add_argument("--out-gold")
    sp.add_argument("--out-profiles")
    taxonomy_arg(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("pipeline", help="simulate, run MV and STAPLE, compare against truth")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", required=True)
    consensus_args(sp)
    taxonomy_arg(sp)
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", 0) is None and args.command == "consensus":
        args.seed = 0
    try:
        return args.func(args)
    except (FormatError, ValueError, KeyError, OSError) as exc:
        print(f"boxconsensus {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
