"""Turn recovered sparse codes back into detected 2D points.

Each nonzero (bin index, distance value) pair on a line back-projects to
a candidate point; values at or below the pruning threshold are treated
as recovery noise and dropped — safe because genuine encodings always
carry at least the line margin. The L per-line candidate clouds are then
merged by flat-kernel mean shift and each cluster is reported as the
arithmetic mean of its members.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class DecodeConfig:
    """prune_threshold in pixels (recovered values at or below it are
    noise), mean-shift bandwidth in pixels, and the minimum number of
    per-line votes a cluster needs to count as a detection.

    coalesce merges runs of adjacent nonzero bins into one candidate
    (summed value, magnitude-weighted index) before pruning. Exact codes
    place one bin per point, so this is a near no-op for them, but
    regressed codes smear a point's mass over neighbouring bins and the
    sum restores the true distance value."""

    prune_threshold: float = 15.0
    bandwidth: float = 40.0
    min_support: int = 1
    coalesce: bool = False

    def __post_init__(self):
        if self.prune_threshold <= 0 or self.bandwidth <= 0 or self.min_support <= 0:
            raise ConfigError("decode parameters must be positive")


def default_min_support(num_lines):
    """A true point gets about one vote per line; noise gets far fewer."""
    return math.ceil(num_lines / 3)


@dataclass(frozen=True)
class CandidatePoint:
    position: tuple
    source_line: int
    magnitude: float


@dataclass(frozen=True)
class Detection:
    """position is the arithmetic mean of the member candidates."""

    position: tuple
    support_count: int
    members: tuple = field(repr=False, default=())


def _runs(mask):
    """(start, stop) index pairs of maximal True runs."""
    out = []
    i, n = 0, len(mask)
    while i < n:
        if not mask[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and mask[j + 1]:
            j += 1
        out.append((i, j + 1))
        i = j + 1
    return out


def _split_at_valleys(profile):
    """Sub-ranges of one run, cut at interior local minima so two nearby
    points whose spreads touch stay separate events. A valley only splits
    when it dips below half of the smaller neighbouring peak, so noise
    dimples on one point's profile do not fragment its mass."""
    n = len(profile)
    peaks = [i for i in range(n)
             if (i == 0 or profile[i] >= profile[i - 1])
             and (i == n - 1 or profile[i] > profile[i + 1])]
    if len(peaks) <= 1:
        return [(0, n)]
    cuts = []
    for a, b in zip(peaks, peaks[1:]):
        valley = a + int(np.argmin(profile[a:b + 1]))
        if profile[valley] < 0.5 * min(profile[a], profile[b]):
            cuts.append(valley)
    bounds = [0] + cuts + [n]
    return [(bounds[k], bounds[k + 1]) for k in range(len(bounds) - 1)
            if bounds[k] < bounds[k + 1]]


def decode_line(line_code, geom, l, cfg):
    """Candidates from one line: every entry with |value| above the prune
    threshold maps to anchor + index * direction + value * normal.

    With cfg.coalesce, each maximal run of adjacent nonzero bins becomes
    a single (summed value, weighted index) event before thresholding."""
    line_code = np.asarray(line_code, dtype=np.float64).reshape(-1)
    if line_code.shape[0] != geom.code_len:
        raise DimensionError(
            f"line code has length {line_code.shape[0]}, geometry wants {geom.code_len}")
    anchor, direction, normal = geom.line(l)
    if cfg.coalesce:
        events = []
        for lo, hi in _runs(line_code != 0.0):
            for a, b in _split_at_valleys(np.abs(line_code[lo:hi])):
                seg = line_code[lo + a:lo + b]
                weights = np.abs(seg)
                t = float((np.arange(lo + a, lo + b) * weights).sum() / weights.sum())
                events.append((t, float(seg.sum())))
    else:
        events = [(float(i), float(line_code[i])) for i in np.flatnonzero(line_code)]
    out = []
    for t, v in events:
        if abs(v) > cfg.prune_threshold:
            pos = anchor + t * direction + v * normal
            out.append(CandidatePoint(position=(float(pos[0]), float(pos[1])),
                                      source_line=int(l), magnitude=v))
    return out


def mean_shift(candidates, bandwidth, max_iters=300, shift_tol=1e-3):
    """Flat-kernel mean shift over candidate positions.

    Every candidate is shifted to the mean of the candidates within
    `bandwidth` of it until the shift is below shift_tol; converged modes
    closer than bandwidth/2 are merged. Each input is assigned to its
    converged mode and the returned Detection positions are the plain
    means of the assigned members.
    """
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    cands = list(candidates)
    if not cands:
        return []
    pts = np.array([c.position for c in cands])
    modes = pts.copy()
    bw2 = bandwidth * bandwidth
    active = np.arange(len(cands))
    for _ in range(max_iters):
        d2 = ((modes[active, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        within = d2 <= bw2
        counts = within.sum(axis=1)
        new = (within[:, :, None] * pts[None, :, :]).sum(axis=1) / counts[:, None]
        shift = np.sqrt(((new - modes[active]) ** 2).sum(axis=1))
        modes[active] = new
        still = shift >= shift_tol
        if not still.any():
            break
        active = active[still]

    # merge modes closer than bandwidth/2, sweeping in a fixed spatial order
    order = np.lexsort((modes[:, 1], modes[:, 0]))
    merge_r2 = (bandwidth / 2.0) ** 2
    labels = np.full(len(cands), -1, dtype=int)
    centers = []
    for i in order:
        for ci, c in enumerate(centers):
            if ((modes[i] - c) ** 2).sum() <= merge_r2:
                labels[i] = ci
                break
        else:
            centers.append(modes[i])
            labels[i] = len(centers) - 1

    detections = []
    for ci in range(len(centers)):
        members = tuple(cands[j] for j in np.flatnonzero(labels == ci))
        mean = pts[labels == ci].mean(axis=0)
        detections.append(Detection(position=(float(mean[0]), float(mean[1])),
                                    support_count=len(members), members=members))
    return detections


def decode(a, cfg):
    """Full decoding of a SparseCode: per-line back-projection, pruning,
    clustering, then the min_support filter. Detections come back sorted
    by support count (descending), ties by position."""
    geom = a.geometry
    candidates = []
    for l in range(geom.num_lines):
        candidates.extend(decode_line(a.per_line[l], geom, l, cfg))
    # canonical order: clustering output must not depend on line order
    candidates.sort(key=lambda c: (c.position[0], c.position[1], c.source_line))
    detections = [d for d in mean_shift(candidates, cfg.bandwidth)
                  if d.support_count >= cfg.min_support]
    detections.sort(key=lambda d: (-d.support_count, d.position[0], d.position[1]))
    return detections
