"""Score detections against ground-truth centroids.

A detection is a true positive when it is matched one-to-one with a
ground-truth point strictly closer than rho (set rho to the radius of
the smallest object so hits land inside it). Matching is greedy by
ascending pair distance with coordinate tie-breaks, which makes the
result independent of input ordering; an optimal (maximum-cardinality)
matcher is available behind a flag for adversarial geometries.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class EvalConfig:
    rho: float
    matching: str = "greedy"

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.matching not in ("greedy", "optimal"):
            raise ConfigError(f"unknown matching {self.matching!r}")


@dataclass
class MatchResult:
    pairs: list            # (detection_index, truth_index)
    false_positives: list  # unmatched detection indices
    false_negatives: list  # unmatched truth indices


def _positions(items):
    out = []
    for it in items:
        pos = it.position if hasattr(it, "position") else it
        out.append((float(pos[0]), float(pos[1])))
    return out


def match(detections, ground_truth, rho, matching="greedy"):
    """One-to-one assignment of detections to truths at distance < rho."""
    if rho <= 0:
        raise ConfigError("rho must be positive")
    det = _positions(detections)
    tru = _positions(ground_truth)
    cands = []
    for di, d in enumerate(det):
        for ti, t in enumerate(tru):
            dist = float(np.hypot(d[0] - t[0], d[1] - t[1]))
            if dist < rho:
                cands.append((dist, d[0], d[1], t[0], t[1], di, ti))
    if matching == "greedy":
        cands.sort()
        used_d, used_t = set(), set()
        pairs = []
        for (_, _, _, _, _, di, ti) in cands:
            if di in used_d or ti in used_t:
                continue
            pairs.append((di, ti))
            used_d.add(di)
            used_t.add(ti)
    elif matching == "optimal":
        pairs = _max_matching(len(det), len(tru), cands)
        used_d = {di for di, _ in pairs}
        used_t = {ti for _, ti in pairs}
    else:
        raise ConfigError(f"unknown matching {matching!r}")
    fp = [i for i in range(len(det)) if i not in used_d]
    fn = [i for i in range(len(tru)) if i not in used_t]
    return MatchResult(pairs=sorted(pairs), false_positives=fp, false_negatives=fn)


def _max_matching(n_det, n_tru, cands):
    """Maximum-cardinality bipartite matching by augmenting paths."""
    adj = [[] for _ in range(n_det)]
    for (_, _, _, _, _, di, ti) in sorted(cands):
        adj[di].append(ti)
    owner = [-1] * n_tru

    def augment(di, seen):
        for ti in adj[di]:
            if seen[ti]:
                continue
            seen[ti] = True
            if owner[ti] < 0 or augment(owner[ti], seen):
                owner[ti] = di
                return True
        return False

    for di in range(n_det):
        augment(di, [False] * n_tru)
    return [(owner[ti], ti) for ti in range(n_tru) if owner[ti] >= 0]


def f1_score(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_patch: list = field(default_factory=list)  # (patch_id, tp, fp, fn)

    def summary_line(self):
        return (f"P={self.precision:.4f} R={self.recall:.4f} F1={self.f1:.4f} "
                f"TP={self.tp} FP={self.fp} FN={self.fn}")


def report(tp, fp, fn, per_patch=None):
    """Precision, recall and F1 from counts. Empty denominators give 0."""
    if min(tp, fp, fn) < 0:
        raise ConfigError("counts must be non-negative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return EvalReport(tp=tp, fp=fp, fn=fn, precision=p, recall=r,
                      f1=f1_score(p, r), per_patch=per_patch or [])


def evaluate(detections_by_patch, truth_by_patch, cfg):
    """Match per patch, then pool counts into one report.

    Both arguments map patch_id -> sequence of points (or objects with a
    .position). Patch ids are the union of both maps.
    """
    per_patch = []
    tp = fp = fn = 0
    for pid in sorted(set(detections_by_patch) | set(truth_by_patch)):
        res = match(detections_by_patch.get(pid, []), truth_by_patch.get(pid, []),
                    cfg.rho, matching=cfg.matching)
        t, f_, n_ = len(res.pairs), len(res.false_positives), len(res.false_negatives)
        per_patch.append((pid, t, f_, n_))
        tp, fp, fn = tp + t, fp + f_, fn + n_
    return report(tp, fp, fn, per_patch=per_patch)
