"""``segot`` command line: gen, match, vote, train, eval, map, yaw.

Exit status is 0 on success, 1 on invalid input or usage, 2 on I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from segot.baselines import vote_match
from segot.errors import SegotError, ValidationError
from segot.evaluation import BIN_LABELS, PairResult, evaluate_dataset, geodesic_rotation_deg, write_curve_csv
from segot.features import aggregate_sum, head_forward
from segot.mapping import (FusionConfig, build_map_pairwise, eval_instance_ap, export_map, gt_instances,
                           load_sequence, save_sequence)
from segot.matcher import DEFAULT_ALPHA, DEFAULT_ITERATIONS, DEFAULT_TAU, MatcherConfig, match_segments
from segot.nav import DEFAULT_GAIN, DEFAULT_TEMPERATURE, NavConfig, NavSegment, yaw
from segot.synth import BoxWorldConfig, SceneConfig, gen_pair, gen_sequence
from segot.tensor_io import load_pair, save_pair, write_json
from segot.training import TrainConfig, config_to_json, load_checkpoint, save_checkpoint, train_head, write_trace

log = logging.getLogger("segot")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _pmap(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed JSON: {exc}") from exc


def _matcher(args) -> MatcherConfig:
    return MatcherConfig(tau=args.tau, iterations=args.iters, mutual_check=args.mutual)


# ---------------------------------------------------------------------------
# subcommands


def _gen_one(task):
    config, seed, out = task
    sp = gen_pair(config, seed)
    save_pair(out, sp.pair.name, sp.pair)
    return sp.pair.name


def cmd_gen(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sequence:
        frames, _ = gen_sequence(BoxWorldConfig(seed=args.seed), 0)
        path = save_sequence(out, frames)
        print(path)
        return
    config = SceneConfig(layout=args.layout, noise=args.noise, drop=args.drop, seed=args.seed,
                         height=args.size, width=args.size)
    names = _pmap(_gen_one, [(config, k, out) for k in range(args.pairs)], args.jobs)
    print(f"wrote {len(names)} pairs to {out}")


def _descriptors(pair, side, head):
    masks = getattr(pair, f"masks_{side}")
    if head is None:
        return aggregate_sum(getattr(pair, f"features_{side}"), masks)
    patches = getattr(pair, f"patches_{side}")
    if patches is None:
        raise ValidationError(f"pair {pair.name} has no patches_{side} for the head")
    return aggregate_sum(head_forward(patches, head), masks)


def match_pair(pair, config: MatcherConfig, alpha, head=None) -> dict:
    """Match JSON for one pair, with the slot-indexed plan block used for R@k."""
    da, db = _descriptors(pair, "a", head), _descriptors(pair, "b", head)
    plan, result = match_segments(da, db, config, alpha)
    block = np.zeros((da.count, db.count))
    ia, ib = np.flatnonzero(da.valid), np.flatnonzero(db.valid)
    block[np.ix_(ia, ib)] = plan.P[: len(ia), : len(ib)]
    doc = result.to_json(plan)
    doc["score_matrix"] = block.tolist()
    return doc


def _head_and_alpha(args):
    if args.head is None:
        return None, args.alpha
    params, alpha, _ = load_checkpoint(args.head)
    return params, alpha if args.alpha is None else args.alpha


def cmd_match(args):
    pair = load_pair(args.pair)
    head, alpha = _head_and_alpha(args)
    doc = match_pair(pair, _matcher(args), DEFAULT_ALPHA if alpha is None else alpha, head)
    write_json(args.out, doc)


def cmd_vote(args):
    pair = load_pair(args.pair)
    kp = _read_json(args.keypoints)
    if not isinstance(kp, list):
        raise ValidationError("keypoints file must hold a JSON list of [[x0,y0],[x1,y1]]")
    V, assignment = vote_match(pair.masks_a, pair.masks_b, kp)
    write_json(args.out, {"assignment": assignment.tolist(), "votes": V.tolist()})


def cmd_train(args):
    out = Path(args.out)
    config = TrainConfig(steps=args.steps, batch_size=args.batch, seed=args.seed)
    result = train_head(config)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, result.alpha, seed=args.seed, steps=args.steps)
    write_trace(out / "trace.csv", result.trace)
    write_json(out / "config.json", config_to_json(config))
    if result.trace:
        print(f"loss {result.trace[0]['loss']:.4f} -> {result.trace[-1]['loss']:.4f}")


def _load_result(task):
    manifest, pred_dir = task
    pair = load_pair(manifest)
    pred_path = Path(pred_dir) / f"{pair.name}.json"
    if not pred_path.exists():
        raise FileNotFoundError(f"no prediction {pred_path} for pair {pair.name}")
    pred = _read_json(pred_path)
    if pair.gt is None:
        raise ValidationError(f"pair {pair.name} has no ground truth")
    angle = None
    if pair.pose_a is not None and pair.pose_b is not None:
        angle = geodesic_rotation_deg(pair.pose_a.rotation, pair.pose_b.rotation)
    m1, m2 = pair.masks_a.count, pair.masks_b.count
    scores = np.asarray(pred.get("score_matrix", np.zeros((m1, m2))), dtype=np.float64).reshape(m1, m2)
    if len(pred["assignment"]) != m1:
        raise ValidationError(f"prediction for {pair.name} has {len(pred['assignment'])} rows, pair has {m1}")
    return PairResult(pred["assignment"], pred["scores"], scores, pair.gt, angle, pair.name)


def cmd_eval(args):
    manifests = sorted(Path(args.pairs).glob("*.json"))
    if not manifests:
        raise ValidationError(f"no pair manifests in {args.pairs}")
    results = _pmap(_load_result, [(m, args.pred) for m in manifests], args.jobs)
    report = evaluate_dataset(results)
    out = Path(args.out)
    write_json(out, report.to_json())
    for label in BIN_LABELS:
        if report.bins[label].pairs:
            write_curve_csv(out.with_name(f"{out.stem}_{label}.csv"), report.bins[label])


def cmd_predict(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    head, alpha = _head_and_alpha(args)
    for manifest in sorted(Path(args.pairs).glob("*.json")):
        pair = load_pair(manifest)
        write_json(out / f"{pair.name}.json",
                   match_pair(pair, _matcher(args), DEFAULT_ALPHA if alpha is None else alpha, head))


def cmd_map(args):
    frames = load_sequence(args.sequence)
    config = FusionConfig(voxel=args.voxel, iou_threshold=args.iou, iou_voxel=args.iou_voxel)
    alpha = DEFAULT_ALPHA if args.alpha is None else args.alpha
    imap = build_map_pairwise(frames, config, _matcher(args), alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_map(out, imap)
    report = {"objects": len(imap.objects), "links": len(imap.links), "rejected_links": len(imap.rejected)}
    if all(f.object_ids for f in frames):
        gt = gt_instances(frames, config.voxel)
        ap, ap50 = eval_instance_ap([o.points for o in imap.objects], list(gt.values()), config.iou_voxel)
        report |= {"gt_objects": len(gt), "ap": ap, "ap50": ap50}
    write_json(out / "report.json", report)
    print(json.dumps(report))


def cmd_yaw(args):
    doc = _read_json(args.segments)
    if not isinstance(doc, list):
        raise ValidationError("segments file must hold a JSON list of {x, p}")
    try:
        segments = [NavSegment(float(s["x"]), float(s["p"])) for s in doc]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad segment entry: {exc}") from exc
    psi = yaw(segments, NavConfig(width=args.width, tau=args.tau, gain=args.gain))
    print(repr(psi))


# ---------------------------------------------------------------------------


def _matcher_flags(p, alpha_default=None):
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--iters", type=int, default=DEFAULT_ITERATIONS)
    p.add_argument("--alpha", type=float, default=alpha_default, help="dustbin logit (default 1.0 or checkpoint)")
    p.add_argument("--mutual", action="store_true", help="keep only mutual argmax matches")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segot", description="Segment matching with optimal transport.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="synthetic pairs or a box-world sequence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--sequence", action="store_true", help="emit a 6-frame box-world sequence instead")
    p.add_argument("--layout", choices=("voronoi", "rectangles"), default="voronoi")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--drop", type=float, default=0.2)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("match", help="match one pair")
    p.add_argument("--pair", required=True)
    p.add_argument("--head", help="checkpoint directory; descriptors then come from patches")
    _matcher_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("predict", help="match every pair in a directory")
    p.add_argument("--pairs", required=True)
    p.add_argument("--head")
    _matcher_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("vote", help="keypoint voting baseline")
    p.add_argument("--pair", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_vote)

    p = sub.add_parser("train", help="desk-scale head training")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="per-bin AUPRC and recall@k")
    p.add_argument("--pairs", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("map", help="instance map from a frame sequence")
    p.add_argument("--sequence", required=True)
    _matcher_flags(p)
    p.add_argument("--voxel", type=float, default=0.01)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--iou-voxel", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_map)

    p = sub.add_parser("yaw", help="steering command from segments")
    p.add_argument("--segments", required=True)
    p.add_argument("--width", type=float, required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_TEMPERATURE)
    p.add_argument("--gain", type=float, default=DEFAULT_GAIN)
    p.set_defaults(fn=cmd_yaw)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"segot: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    try:
        args.fn(args)
    except (ValidationError, ValueError) as exc:
        print(f"segot: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"segot: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SegotError as exc:
        print(f"segot: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
