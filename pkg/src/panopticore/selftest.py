"""Self-contained property suite behind the ``selftest`` subcommand.

The oracles here are deliberately naive re-statements of each operation's
definition (per-pixel scans, finite differences, sort-and-average) so they
stay independent of the optimized implementations they check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses, metrics, postprocess, targets
from .core import DatasetSpec, Dims, InstanceCenter
from .synth import Scene, make_spec, random_scene

__all__ = [
    "PropertyResult",
    "run_selftest",
    "nms_oracle",
    "group_oracle",
    "exact_inputs",
    "round_trip_pq",
    "random_valid_map",
    "relative_error",
]


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# Independent oracles


def nms_oracle(heatmap: np.ndarray, kernel: int) -> np.ndarray:
    """Window-max scan straight from the definition (clipped borders)."""
    radius = kernel // 2
    padded = np.pad(heatmap.astype(np.float64), radius, constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel))
    window_max = windows.max(axis=(2, 3))
    return np.where(heatmap.astype(np.float64) == window_max, heatmap, 0).astype(
        heatmap.dtype
    )


def group_oracle(
    centers: list[InstanceCenter], offsets: np.ndarray, thing_mask: np.ndarray
) -> np.ndarray:
    """Per-pixel loop over every center; ties to the lowest index."""
    height, width = thing_mask.shape
    out = np.zeros((height, width), dtype=np.int32)
    if not centers:
        return out
    for r in range(height):
        for c in range(width):
            if not thing_mask[r, c]:
                continue
            lr = r + float(offsets[r, c, 0])
            lc = c + float(offsets[r, c, 1])
            best, best_k = math.inf, 0
            for k, center in enumerate(centers):
                d = (lr - center.row) ** 2 + (lc - center.col) ** 2
                if d < best:
                    best, best_k = d, k
            out[r, c] = best_k + 1
    return out


def topk_ce_oracle(per_pixel_losses: np.ndarray, fraction: float) -> float:
    """Sort-and-average restatement of the bootstrapped reduction."""
    k = max(1, int(np.ceil(fraction * per_pixel_losses.size)))
    ordered = np.sort(per_pixel_losses)[::-1]
    return float(ordered[:k].mean(dtype=np.float64))


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-9:
        return 0.0
    return abs(analytic - numeric) / scale


# ---------------------------------------------------------------------------
# Round-trip oracle


def rounded(value: float) -> int:
    return int(math.floor(value + 0.5))


def exact_inputs(scene: Scene, params: targets.TargetParams = targets.TargetParams()):
    """Exact targets for the reconstruction round trip.

    The heatmap is rendered from centers rounded to pixel positions so each
    instance owns exactly one unit-height peak; offsets stay exact.
    """
    bundle = targets.encode_targets(scene.panoptic, scene.spec, params)
    rounded_centers = [
        InstanceCenter(row=rounded(c.row), col=rounded(c.col), score=1.0)
        for _, c in bundle.centers
    ]
    heatmap = targets.encode_center_heatmap(
        rounded_centers, Dims.of(scene.panoptic), params
    )
    return bundle.semantic_labels, heatmap, bundle.offsets


def round_trip_pq(
    scene: Scene, params: postprocess.PostprocParams = postprocess.PostprocParams()
) -> metrics.PqReport:
    """Encode exact targets, run the full pipeline, score against the gt."""
    semantic, heatmap, offsets = exact_inputs(scene)
    result = postprocess.panoptic_inference(
        semantic, heatmap, offsets, scene.spec, params
    )
    return metrics.panoptic_quality(result.panoptic, scene.panoptic, scene.spec)


def partitions_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """True when two label maps are identical up to a relabeling bijection."""
    pairs = np.unique(np.stack([a.reshape(-1), b.reshape(-1)], axis=1), axis=0)
    return len(pairs) == np.unique(a).size == np.unique(b).size


# ---------------------------------------------------------------------------
# Random valid maps (for metric stress properties)


def random_valid_map(
    rng: np.random.Generator, spec: DatasetSpec, height: int = 16, width: int = 16
) -> np.ndarray:
    """A random well-formed panoptic map: stuff, things, crowd, and VOID."""
    ids = []
    for cid in spec.stuff_ids:
        ids.append(cid * spec.label_divisor)
    for cid in spec.thing_ids:
        for inst in range(rng.integers(0, 4)):
            ids.append(cid * spec.label_divisor + inst)  # inst 0 = crowd
    ids.append(spec.void_id)
    choices = np.array(ids, dtype=np.int64)
    blocks = rng.integers(0, len(choices), size=(height // 4 + 1, width // 4 + 1))
    grown = np.kron(blocks, np.ones((4, 4), dtype=np.int64))[:height, :width]
    return choices[grown]


# ---------------------------------------------------------------------------
# Properties


def _check_round_trip(seed: int) -> str:
    scene = random_scene(seed)
    report = round_trip_pq(scene)
    if report.all.pq != 1.0:
        return f"seed {seed}: PQ {report.all.pq} != 1.0"
    return ""


def _check_nms(seed: int = 0, cases: int = 100) -> str:
    rng = np.random.default_rng(seed)
    for i in range(cases):
        heatmap = rng.random((16, 16)).astype(np.float32)
        for kernel in (1, 3, 5, 7):
            got = postprocess.keypoint_nms(heatmap, kernel)
            want = nms_oracle(heatmap, kernel)
            if not np.array_equal(got, want):
                return f"case {i} kernel {kernel}: mismatch with window-max scan"
    return ""


def _check_grouping(seed: int = 0, cases: int = 200) -> str:
    rng = np.random.default_rng(seed)
    for i in range(cases):
        height, width = 16, 16
        mask = rng.random((height, width)) < 0.6
        offsets = rng.normal(0, 4, size=(height, width, 2)).astype(np.float32)
        n = int(rng.integers(0, 6))
        centers = [
            InstanceCenter(
                row=float(rng.uniform(0, height)), col=float(rng.uniform(0, width))
            )
            for _ in range(n)
        ]
        got = postprocess.group_pixels(centers, offsets, mask)
        want = group_oracle(centers, offsets, mask)
        if not np.array_equal(got, want):
            return f"case {i}: mismatch with per-pixel argmin loop"
    return ""


def _fd_mse(seed: int, step: float = 1e-4, tol: float = 1e-4) -> str:
    rng = np.random.default_rng(seed)
    pred = rng.random((8, 8))
    target = rng.random((8, 8))
    grad = losses.mse_heatmap_loss(pred, target).gradient
    for idx in np.ndindex(pred.shape):
        plus, minus = pred.copy(), pred.copy()
        plus[idx] += step
        minus[idx] -= step
        fd = (
            losses.mse_heatmap_loss(plus, target, with_gradient=False).value
            - losses.mse_heatmap_loss(minus, target, with_gradient=False).value
        ) / (2 * step)
        if relative_error(grad[idx], fd) > tol:
            return f"mse grad at {idx}: analytic {grad[idx]} vs fd {fd}"
    return ""


def _fd_l1(seed: int, step: float = 1e-4, tol: float = 1e-4) -> str:
    rng = np.random.default_rng(seed)
    pred = rng.normal(0, 2, size=(8, 8, 2))
    target = rng.normal(0, 2, size=(8, 8, 2))
    mask = rng.random((8, 8)) < 0.7
    grad = losses.l1_offset_loss(pred, target, mask).gradient
    for idx in np.ndindex(pred.shape):
        if abs(pred[idx] - target[idx]) < max(1e-6, 2 * step):
            continue  # sign boundary: not differentiable
        plus, minus = pred.copy(), pred.copy()
        plus[idx] += step
        minus[idx] -= step
        fd = (
            losses.l1_offset_loss(plus, target, mask, with_gradient=False).value
            - losses.l1_offset_loss(minus, target, mask, with_gradient=False).value
        ) / (2 * step)
        if relative_error(grad[idx], fd) > tol:
            return f"l1 grad at {idx}: analytic {grad[idx]} vs fd {fd}"
    return ""


def _ce_pixel_losses(logits, labels, weights, ignore_label):
    flat_logits = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    flat_labels = labels.reshape(-1)
    flat_weights = weights.reshape(-1)
    out = np.full(flat_labels.shape, -np.inf)
    for p in range(flat_labels.size):
        if flat_labels[p] == ignore_label:
            continue
        z = flat_logits[p]
        log_prob = z[flat_labels[p]] - (z.max() + np.log(np.exp(z - z.max()).sum()))
        out[p] = -flat_weights[p] * log_prob
    return out


def _fd_ce(
    seed: int, fraction: float = 0.5, step: float = 1e-4, tol: float = 1e-4
) -> str:
    rng = np.random.default_rng(seed)
    num_classes = 5
    ignore = 99
    logits = rng.normal(0, 2, size=(8, 8, num_classes))
    labels = rng.integers(0, num_classes, size=(8, 8))
    labels[rng.random((8, 8)) < 0.1] = ignore
    if (labels == ignore).all():
        labels[0, 0] = 0
    weights = rng.uniform(0.2, 2.0, size=(8, 8))

    grad = losses.weighted_bootstrapped_ce(
        logits, labels, weights, ignore, fraction
    ).gradient

    pixel = _ce_pixel_losses(logits, labels, weights, ignore)
    valid = pixel[pixel > -np.inf]
    k = max(1, int(np.ceil(fraction * valid.size)))
    ordered = np.sort(valid)[::-1]
    boundary_in = ordered[k - 1]
    boundary_out = ordered[k] if k < valid.size else -np.inf

    flat_pixel = pixel.reshape(8, 8)
    for r, c in np.ndindex(8, 8):
        if labels[r, c] == ignore:
            continue
        # Skip pixels whose selection status could flip under the probe.
        margin = 10 * weights[r, c] * step
        if (
            abs(flat_pixel[r, c] - boundary_in) < margin
            or abs(flat_pixel[r, c] - boundary_out) < margin
        ):
            continue
        for ch in range(num_classes):
            plus, minus = logits.copy(), logits.copy()
            plus[r, c, ch] += step
            minus[r, c, ch] -= step
            fd = (
                losses.weighted_bootstrapped_ce(
                    plus, labels, weights, ignore, fraction, with_gradient=False
                ).value
                - losses.weighted_bootstrapped_ce(
                    minus, labels, weights, ignore, fraction, with_gradient=False
                ).value
            ) / (2 * step)
            if relative_error(grad[r, c, ch], fd) > tol:
                return (
                    f"ce grad at {(r, c, ch)}: analytic {grad[r, c, ch]} vs fd {fd}"
                )
    return ""


def _check_gradients(seeds=(0, 1, 2)) -> str:
    for seed in seeds:
        for check in (_fd_mse, _fd_l1, _fd_ce):
            message = check(seed)
            if message:
                return message
    return ""


def _check_pq_formula() -> str:
    spec = make_spec(num_stuff=1, num_things=1)
    thing = sorted(spec.thing_ids)[0]
    stuff = sorted(spec.stuff_ids)[0]
    gt = np.full((20, 20), stuff * spec.label_divisor, dtype=np.int64)
    pred = gt.copy()
    gt[0:10, 0:20] = thing * spec.label_divisor + 1  # area 200
    pred[0:8, 0:20] = thing * spec.label_divisor + 1  # overlap 160, IoU 0.8
    gt[15:19, 0:10] = thing * spec.label_divisor + 2  # unmatched -> FN
    report = metrics.panoptic_quality(pred, gt, spec)
    expected = 0.8 / 1.5
    row = report.per_category[thing]
    if abs(row.pq - expected) > 1e-9:
        return f"PQ {row.pq} != {expected}"
    if row.tp != 1 or row.fn != 1:
        return f"counts tp={row.tp} fn={row.fn}, expected 1/1"
    return ""


def _check_pq_identity(seed: int = 0, pairs: int = 100) -> str:
    spec = make_spec(num_stuff=3, num_things=3)
    rng = np.random.default_rng(seed)
    for i in range(pairs):
        pred = random_valid_map(rng, spec)
        gt = random_valid_map(rng, spec)
        report = metrics.panoptic_quality(pred, gt, spec)  # asserts uniqueness
        for cid, row in report.per_category.items():
            if row.tp > 0 and row.pq != row.sq * row.rq:
                return f"pair {i} category {cid}: pq != sq*rq"
    return ""


def _check_score_modes(seed: int = 0, scenes: int = 5) -> str:
    for i in range(scenes):
        scene = random_scene(seed * 1000 + i, max_size=128)
        semantic, heatmap, offsets = exact_inputs(scene)
        outputs = {}
        for mode in postprocess.SCORE_MODES:
            params = postprocess.PostprocParams(score_mode=mode)
            outputs[mode] = postprocess.panoptic_inference(
                semantic, heatmap, offsets, scene.spec, params
            )
        reference = outputs["product"].panoptic
        for mode, result in outputs.items():
            if result.panoptic.tobytes() != reference.tobytes():
                return f"scene {i}: panoptic map differs under score mode {mode}"
        pqs = {
            mode: metrics.panoptic_quality(r.panoptic, scene.panoptic, scene.spec).all.pq
            for mode, r in outputs.items()
        }
        if len(set(pqs.values())) != 1:
            return f"scene {i}: PQ varies across score modes: {pqs}"
    return ""


PROPERTIES = (
    ("round_trip", lambda: _first_failure(_check_round_trip, range(5))),
    ("nms_bruteforce", _check_nms),
    ("grouping_bruteforce", _check_grouping),
    ("loss_gradients", _check_gradients),
    ("pq_formula", _check_pq_formula),
    ("pq_identity_and_uniqueness", _check_pq_identity),
    ("score_mode_invariance", _check_score_modes),
)


def _first_failure(check, seeds) -> str:
    for seed in seeds:
        message = check(seed)
        if message:
            return message
    return ""


def run_selftest() -> list[PropertyResult]:
    """Run every property; a result with ``passed=False`` carries a detail."""
    results = []
    for name, prop in PROPERTIES:
        try:
            detail = prop()
        except Exception as e:  # property raised instead of reporting
            detail = f"{type(e).__name__}: {e}"
        results.append(PropertyResult(name=name, passed=not detail, detail=detail))
    return results
