"""End-to-end inference: predict codes, recover, decode, score.

Per-patch work is independent, so it can fan out over a thread pool; the
reduction is always in patch order, which keeps results identical for
any thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from .decoding import decode, decode_line
from .encoding import DenseCode
from .evaluation import EvalConfig, evaluate
from .recovery import recover_all_lines
from .regressor import forward, geometry_scale


def ordered_parallel_map(fn, items, threads=1):
    """Map preserving item order; thread count never changes the result."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _to_image_frame(obj, scale):
    if scale == 1.0:
        return obj
    x, y = obj.position
    return replace(obj, position=(x / scale, y / scale))


def detect_record(model, D, geometry, recovery_cfg, decode_cfg, record,
                  with_candidates=False):
    """Detections for one dataset record, in image coordinates (optionally
    also the raw per-line candidates, for overlays).

    The geometry may live in a downscaled frame; recovered positions are
    mapped back to the image frame before being returned."""
    s = geometry_scale(geometry, record.points.shape)
    x_hat, _count = forward(model, record.image)
    dense = DenseCode(per_line=x_hat.reshape(geometry.num_lines, D.m),
                      geometry=geometry, matrix=D)
    a_hat = recover_all_lines(dense, D, recovery_cfg)
    detections = [_to_image_frame(d, s) for d in decode(a_hat, decode_cfg)]
    if not with_candidates:
        return detections
    candidates = []
    for l in range(geometry.num_lines):
        candidates.extend(_to_image_frame(c, s)
                          for c in decode_line(a_hat.per_line[l], geometry, l, decode_cfg))
    return detections, candidates


def detect_records(model, D, geometry, recovery_cfg, decode_cfg, records, threads=1):
    """patch_id -> detections for every record, in input order."""
    dets = ordered_parallel_map(
        lambda rec: detect_record(model, D, geometry, recovery_cfg, decode_cfg, rec),
        records, threads)
    return {rec.patch_id: d for rec, d in zip(records, dets)}


def score_records(detections_by_patch, records, rho, matching="greedy"):
    truth = {rec.patch_id: [tuple(p) for p in rec.points.points] for rec in records}
    return evaluate(detections_by_patch, truth, EvalConfig(rho=rho, matching=matching))


def f1_on_records(model, D, geometry, recovery_cfg, decode_cfg, records, rho,
                  threads=1, matching="greedy"):
    dets = detect_records(model, D, geometry, recovery_cfg, decode_cfg, records, threads)
    return score_records(dets, records, rho, matching=matching)
