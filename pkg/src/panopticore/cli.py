"""Command-line interface.

Subcommands: ``targets`` (ground truth -> training targets), ``fuse``
(prediction grids -> panoptic map), ``eval`` (PQ / mIoU / AP), ``bench``
(stage timings on synthetic inputs), and ``selftest`` (property suite).

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 property failure.
All reports are JSON with sorted keys, so identical inputs produce identical
bytes regardless of thread count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics, postprocess, selftest, targets, tensor_io
from .core import DatasetSpec, validate
from .synth import bench_inputs

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_PROPERTY = 3

TARGET_FILES = {
    "heatmap": "heatmap.pdlt",
    "offsets": "offsets.pdlt",
    "weights": "weights.pdlt",
    "semantic": "semantic.pdlt",
    "thing_mask": "thing_mask.pdlt",
}


def _emit(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _load_spec(path: str) -> DatasetSpec:
    return tensor_io.read_spec(path)


def _require_valid(array: np.ndarray, spec: DatasetSpec, kind: str) -> None:
    violations = validate(array, spec, kind)
    if violations:
        raise ValueError(f"invalid {kind} input: " + "; ".join(violations[:5]))


def _instances_payload(result: postprocess.PanopticResult) -> list[dict]:
    payload = []
    for record in result.instances:
        row = {
            "instance_index": record.instance_index,
            "category": record.category,
            "area": record.area,
            "score": record.score,
        }
        if record.center is not None:
            row["center"] = [record.center.row, record.center.col]
        payload.append(row)
    return payload


# ---------------------------------------------------------------------------
# targets


def cmd_targets(args) -> int:
    spec = _load_spec(args.spec)
    panoptic = tensor_io.read_tensor(args.panoptic).astype(np.int64)
    _require_valid(panoptic, spec, "panoptic")
    params = targets.TargetParams(
        sigma=args.sigma,
        truncation_radius=args.truncation_radius,
        small_instance_area=args.small_instance_area,
        small_instance_weight=args.small_instance_weight,
    )
    bundle = targets.encode_targets(panoptic, spec, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensor_io.write_tensor(bundle.heatmap, out / TARGET_FILES["heatmap"])
    tensor_io.write_tensor(bundle.offsets, out / TARGET_FILES["offsets"])
    tensor_io.write_tensor(bundle.semantic_weights, out / TARGET_FILES["weights"])
    tensor_io.write_tensor(
        bundle.semantic_labels.astype(np.uint16), out / TARGET_FILES["semantic"]
    )
    tensor_io.write_tensor(
        bundle.thing_mask.astype(np.uint16), out / TARGET_FILES["thing_mask"]
    )
    ids, counts = np.unique(panoptic, return_counts=True)
    areas = dict(zip(ids.tolist(), counts.tolist()))
    for pid, center in bundle.centers:
        print(
            f"instance {pid} center=({center.row:.3f},{center.col:.3f}) "
            f"area={areas[pid]}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# fuse


def _postproc_params(args) -> postprocess.PostprocParams:
    return postprocess.PostprocParams(
        nms_kernel=args.nms_kernel,
        center_threshold=args.center_threshold,
        top_k=args.top_k,
        stuff_area_threshold=args.stuff_area_threshold,
        score_mode=args.score_mode,
    )


def cmd_fuse(args) -> int:
    spec = _load_spec(args.spec)
    semantic = tensor_io.read_tensor(args.semantic)
    heatmap = tensor_io.read_tensor(args.heatmap)
    offsets = tensor_io.read_tensor(args.offsets)
    if semantic.ndim == 2:
        semantic = semantic.astype(np.int64)
        _require_valid(semantic, spec, "semantic")
    result = postprocess.panoptic_inference(
        semantic, heatmap, offsets, spec, _postproc_params(args)
    )
    panoptic = result.panoptic
    if panoptic.min() < 0 or panoptic.max() > np.iinfo(np.uint32).max:
        raise ValueError("panoptic ids exceed the uint32 container range")
    tensor_io.write_tensor(panoptic.astype(np.uint32), args.out)
    report = {
        "dims": list(panoptic.shape),
        "num_instances": len(result.instances),
        "instances": _instances_payload(result),
    }
    _emit(report, args.report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _pq_payload(report: metrics.PqReport) -> dict:
    def agg(a):
        return {
            "pq": a.pq,
            "sq": a.sq,
            "rq": a.rq,
            "num_categories": a.num_categories,
        }

    return {
        "all": agg(report.all),
        "things": agg(report.things),
        "stuff": agg(report.stuff),
        "per_category": {
            str(cid): {
                "pq": row.pq,
                "sq": row.sq,
                "rq": row.rq,
                "tp": row.tp,
                "fp": row.fp,
                "fn": row.fn,
                "iou_sum": row.iou_sum,
            }
            for cid, row in report.per_category.items()
        },
    }


def _miou_payload(report: metrics.IoUReport) -> dict:
    return {
        "mean_iou": report.mean,
        "per_category": {str(c): v for c, v in report.per_category.items()},
    }


def _ap_payload(report: metrics.ApReport) -> dict:
    return {
        "mean_ap": report.mean_ap,
        "per_threshold": {f"{t:.2f}": v for t, v in report.per_threshold.items()},
        "per_category": {str(c): v for c, v in report.per_category.items()},
    }


def _semantic_view(panoptic: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    """Category part of a panoptic map (VOID maps to the ignore label)."""
    return panoptic // spec.label_divisor


def _detections_from_panoptic(
    panoptic: np.ndarray, spec: DatasetSpec, scores: dict[int, float]
) -> list[tuple[np.ndarray, int, float]]:
    """Thing segments as scored detections; unscored instances get 1.0."""
    out = []
    for pid in np.unique(panoptic):
        category, instance = int(pid) // spec.label_divisor, int(pid) % spec.label_divisor
        if instance >= 1 and category in spec.thing_ids:
            out.append((panoptic == pid, category, scores.get(instance, 1.0)))
    return out


def _gt_masks_from_panoptic(
    panoptic: np.ndarray, spec: DatasetSpec
) -> list[tuple[np.ndarray, int, bool]]:
    """Thing segments as AP ground truth; instance part 0 marks crowd."""
    out = []
    for pid in np.unique(panoptic):
        category, instance = int(pid) // spec.label_divisor, int(pid) % spec.label_divisor
        if category in spec.thing_ids:
            out.append((panoptic == pid, category, instance == 0))
    return out


def _eval_one(pred_path, gt_path, scores_path, spec, modes, max_dets=200):
    pred = tensor_io.read_tensor(pred_path).astype(np.int64)
    gt = tensor_io.read_tensor(gt_path).astype(np.int64)
    row: dict = {"pred": str(pred_path), "gt": str(gt_path)}
    outputs: dict = {}
    if "pq" in modes:
        outputs["pq"] = metrics.panoptic_quality(pred, gt, spec)
        row["pq"] = _pq_payload(outputs["pq"])
    if "miou" in modes:
        outputs["miou"] = metrics.mean_iou(
            _semantic_view(pred, spec), _semantic_view(gt, spec), spec
        )
        row["miou"] = _miou_payload(outputs["miou"])
    if "ap" in modes:
        scores: dict[int, float] = {}
        if scores_path:
            doc = json.loads(Path(scores_path).read_text())
            scores = {
                int(r["instance_index"]): float(r["score"]) for r in doc["instances"]
            }
        preds = _detections_from_panoptic(pred, spec, scores)
        gts = _gt_masks_from_panoptic(gt, spec)
        outputs["ap"] = metrics.match_detections(preds, gts, max_dets=max_dets)
        row["ap"] = _ap_payload(metrics.ap_report_from_matches([outputs["ap"]]))
    return row, outputs


def cmd_eval(args) -> int:
    spec = _load_spec(args.spec)
    preds = args.pred
    gts = args.gt
    if len(preds) != len(gts):
        raise ValueError(
            f"pred list has {len(preds)} entries but gt list has {len(gts)}"
        )
    scores = args.pred_scores or [None] * len(preds)
    if len(scores) != len(preds):
        raise ValueError(
            f"pred-scores list has {len(scores)} entries but pred list has {len(preds)}"
        )
    modes = ("pq", "miou", "ap") if args.mode == "all" else (args.mode,)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        rows = list(
            pool.map(
                lambda triple: _eval_one(triple[0], triple[1], triple[2], spec, modes),
                zip(preds, gts, scores),
            )
        )

    report: dict = {"mode": args.mode, "images": [r for r, _ in rows]}
    aggregate: dict = {}
    if "pq" in modes:
        aggregate["pq"] = _pq_payload(
            metrics.combine_pq([o["pq"] for _, o in rows], spec)
        )
    if "miou" in modes:
        aggregate["miou"] = _miou_payload(
            metrics.combine_miou([o["miou"] for _, o in rows], spec)
        )
    if "ap" in modes:
        aggregate["ap"] = _ap_payload(
            metrics.ap_report_from_matches([o["ap"] for _, o in rows])
        )
    report["aggregate"] = aggregate
    _emit(report, args.report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    semantic, heatmap, offsets, spec = bench_inputs(
        args.height, args.width, args.centers, seed=args.seed
    )
    params = postprocess.PostprocParams()
    stages: dict[str, list[float]] = {
        "nms": [],
        "extract": [],
        "thing_mask": [],
        "grouping": [],
        "merge": [],
        "stuff_filter": [],
        "end_to_end": [],
    }
    digest = None
    for _ in range(args.repetitions):
        t0 = time.perf_counter()
        suppressed = postprocess.keypoint_nms(heatmap, params.nms_kernel)
        t1 = time.perf_counter()
        centers = postprocess.extract_centers(
            suppressed, params.center_threshold, params.top_k
        )
        t2 = time.perf_counter()
        mask = postprocess.thing_mask_from_semantic(semantic, spec)
        t3 = time.perf_counter()
        instance_ids = postprocess.group_pixels(centers, offsets, mask)
        t4 = time.perf_counter()
        merged = postprocess.merge_panoptic(semantic, instance_ids, spec)
        t5 = time.perf_counter()
        postprocess.filter_small_stuff(merged, spec, threshold=2048)
        t6 = time.perf_counter()
        result = postprocess.panoptic_inference(semantic, heatmap, offsets, spec, params)
        t7 = time.perf_counter()
        stages["nms"].append(t1 - t0)
        stages["extract"].append(t2 - t1)
        stages["thing_mask"].append(t3 - t2)
        stages["grouping"].append(t4 - t3)
        stages["merge"].append(t5 - t4)
        stages["stuff_filter"].append(t6 - t5)
        stages["end_to_end"].append(t7 - t6)
        digest = hashlib.sha256(result.panoptic.astype(np.int64).tobytes()).hexdigest()
    report = {
        "dims": [args.height, args.width],
        "centers": args.centers,
        "repetitions": args.repetitions,
        "threads": args.threads,
        "panoptic_sha256": digest,
        "stages_ms": {
            name: {
                "median": statistics.median(times) * 1000.0,
                "runs": [t * 1000.0 for t in times],
            }
            for name, times in stages.items()
        },
    }
    _emit(report, args.report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest


def cmd_selftest(args) -> int:
    results = selftest.run_selftest()
    failed = [r for r in results if not r.passed]
    for r in results:
        if r.passed:
            print(f"PASS {r.name}")
        else:
            print(f"FAIL {r.name}: {r.detail}")
    if failed:
        print(f"selftest: {len(failed)} of {len(results)} properties failed "
              f"(first: {failed[0].name})")
        return EXIT_PROPERTY
    print(f"selftest: all {len(results)} properties passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panopticore",
        description="Panoptic segmentation targets, fusion, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("targets", help="encode training targets from ground truth")
    p.add_argument("--panoptic", required=True, help="ground-truth panoptic tensor")
    p.add_argument("--spec", required=True, help="dataset spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sigma", type=float, default=8.0)
    p.add_argument("--truncation-radius", type=float, default=3.0)
    p.add_argument("--small-instance-area", type=int, default=4096)
    p.add_argument("--small-instance-weight", type=float, default=3.0)
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("fuse", help="fuse prediction grids into a panoptic map")
    p.add_argument("--semantic", required=True, help="labels (2-D) or probabilities (3-D)")
    p.add_argument("--heatmap", required=True)
    p.add_argument("--offsets", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True, help="output panoptic tensor path")
    p.add_argument("--nms-kernel", type=int, default=7)
    p.add_argument("--center-threshold", type=float, default=0.1)
    p.add_argument("--top-k", type=int, default=200)
    p.add_argument("--stuff-area-threshold", type=int, default=None)
    p.add_argument("--score-mode", choices=postprocess.SCORE_MODES, default="product")
    p.add_argument("--report", default=None, help="instance report path (default stdout)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--mode", choices=("pq", "miou", "ap", "all"), default="all")
    p.add_argument("--pred-scores", nargs="+", default=None,
                   help="per-image instance reports from fuse (for AP scores)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time pipeline stages on synthetic input")
    p.add_argument("--height", type=int, default=1025)
    p.add_argument("--width", type=int, default=2049)
    p.add_argument("--centers", type=int, default=200)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="run the property suite")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tensor_io.SpecFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (tensor_io.TensorIoError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
