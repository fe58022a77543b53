"""Synthetic point-object imagery with exact centroid annotations.

Patches contain bright Gaussian blobs (the targets) on a textured, noisy
background, plus lookalike clutter: dimmer bumps and elongated smears
that a detector must learn to ignore. Cell centers keep at least two
blob radii between each other and one radius from the borders, so every
annotation is an unambiguous, isolated peak.

On disk a dataset is a directory of binary PGM images plus two CSV
files: manifest.csv (patch_id, split, image_file) and annotations.csv
(patch_id, x, y with full-precision coordinates). UTF-8, LF endings.
"""

import os
from dataclasses import dataclass

import numpy as np

from .encoding import PatchShape, PointSet
from .errors import ConfigError, DatasetFormatError
from .rng import CounterRng


@dataclass(frozen=True)
class SynthConfig:
    shape: PatchShape
    cells_min: int = 3
    cells_max: int = 6
    blob_radius: float = 6.0
    intensity_lo: float = 110.0
    intensity_hi: float = 190.0
    clutter_min: int = 0
    clutter_max: int = 4
    clutter_contrast: float = 0.4
    noise_sigma: float = 5.0
    background: float = 45.0
    seed: int = 0

    def __post_init__(self):
        if self.blob_radius >= min(self.shape.h, self.shape.w) / 4:
            raise ConfigError("blob radius must be under a quarter of the patch side")
        if not (0 <= self.cells_min <= self.cells_max):
            raise ConfigError("need 0 <= cells_min <= cells_max")
        if not (0 <= self.clutter_min <= self.clutter_max):
            raise ConfigError("need 0 <= clutter_min <= clutter_max")
        if self.intensity_lo > self.intensity_hi or self.intensity_lo <= 0:
            raise ConfigError("bad blob intensity range")
        if self.noise_sigma < 0 or not (0 <= self.clutter_contrast <= 1):
            raise ConfigError("bad noise/clutter settings")


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    patch_id: int
    image: np.ndarray
    points: PointSet
    split: str

    def __eq__(self, other):
        return (isinstance(other, DatasetRecord)
                and self.patch_id == other.patch_id
                and self.split == other.split
                and np.array_equal(self.image, other.image)
                and self.points.shape == other.points.shape
                and np.array_equal(self.points.points, other.points.points))


def _place(r, cfg, count, avoid, min_gap):
    """Rejection-sample `count` centers >= blob_radius from borders and
    >= min_gap from everything in `avoid` and each other."""
    h, w, br = cfg.shape.h, cfg.shape.w, cfg.blob_radius
    placed = []
    for _ in range(count):
        for _attempt in range(500):
            x = br + r.uniform() * (w - 2 * br)
            y = br + r.uniform() * (h - 2 * br)
            ok = all((x - px) ** 2 + (y - py) ** 2 >= min_gap ** 2
                     for px, py in avoid + placed)
            if ok:
                placed.append((x, y))
                break
        else:
            raise ConfigError(
                f"cannot place {count} points with spacing {min_gap} in "
                f"{w}x{h}; reduce counts or radius")
    return placed


def _add_bump(img, cx, cy, amp, sx, sy, angle=0.0, cut=3.0):
    """Add a (possibly rotated anisotropic) Gaussian bump in-place,
    touching only its bounding box."""
    h, w = img.shape
    reach = cut * max(sx, sy)
    x0, x1 = max(0, int(cx - reach)), min(w, int(cx + reach) + 1)
    y0, y1 = max(0, int(cy - reach)), min(h, int(cy + reach) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    r2 = (u / sx) ** 2 + (v / sy) ** 2
    img[y0:y1, x0:x1] += amp * np.exp(-0.5 * r2) * (r2 <= cut * cut)


def render_patch(cfg, patch_id, split="train"):
    """One deterministic record: the stream is derived from (seed, patch_id)
    so patches can be produced in any order or in parallel."""
    r = CounterRng(cfg.seed).derive(patch_id)
    h, w = cfg.shape.h, cfg.shape.w
    img = np.full((h, w), cfg.background, dtype=np.float64)
    # gentle illumination gradient so the background is not flat
    gx, gy = (r.uniform() - 0.5) * 0.2, (r.uniform() - 0.5) * 0.2
    img += gx * (np.arange(w)[None, :] - w / 2) + gy * (np.arange(h)[:, None] - h / 2)

    count = r.integers(cfg.cells_min, cfg.cells_max + 1)
    centers = _place(r, cfg, count, [], 2 * cfg.blob_radius)
    sigma = cfg.blob_radius / 2.0
    for (cx, cy) in centers:
        amp = cfg.intensity_lo + r.uniform() * (cfg.intensity_hi - cfg.intensity_lo)
        _add_bump(img, cx, cy, amp, sigma, sigma)

    n_clutter = r.integers(cfg.clutter_min, cfg.clutter_max + 1)
    if n_clutter:
        spots = _place(r, cfg, n_clutter, centers, 2 * cfg.blob_radius)
        for (cx, cy) in spots:
            amp = cfg.clutter_contrast * (
                cfg.intensity_lo + r.uniform() * (cfg.intensity_hi - cfg.intensity_lo))
            if r.uniform() < 0.5:
                _add_bump(img, cx, cy, amp, sigma, sigma)
            else:
                ang = r.uniform() * np.pi
                _add_bump(img, cx, cy, amp, 2.0 * sigma, 0.5 * sigma, angle=ang)

    if cfg.noise_sigma > 0:
        img += cfg.noise_sigma * r.normal((h, w))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    pts = PointSet(points=np.array(centers).reshape(-1, 2), shape=cfg.shape)
    return DatasetRecord(patch_id=int(patch_id), image=img, points=pts, split=split)


def generate(cfg, count, split="train", id_offset=0):
    """`count` records tagged with one split, ids id_offset..id_offset+count-1."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    return [render_patch(cfg, id_offset + i, split) for i in range(count)]


def make_dataset(cfg, n_train, n_val=0, n_test=0):
    """Train/val/test records with globally unique patch ids."""
    records = []
    offset = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        if n > 0:
            records.extend(generate(cfg, n, split=split, id_offset=offset))
        offset += n
    return records


def write_pgm(path, img):
    """Binary PGM (P5), maxval 255."""
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise DatasetFormatError(f"{path}: not a binary PGM", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise DatasetFormatError(f"{path}: truncated PGM header", offset=pos)
        try:
            fields.append(int(blob[start:pos]))
        except ValueError:
            raise DatasetFormatError(f"{path}: bad PGM header token", offset=start) from None
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetFormatError(f"{path}: PGM maxval {maxval}, expected 255", offset=pos)
    pos += 1  # single whitespace byte after maxval
    if len(blob) - pos != w * h:
        raise DatasetFormatError(
            f"{path}: PGM payload is {len(blob) - pos} bytes, expected {w * h}",
            offset=min(len(blob), pos + w * h))
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def save_dataset(records, path):
    """Write manifest.csv, annotations.csv and images/*.pgm under `path`."""
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    with open(os.path.join(path, "manifest.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("patch_id,split,image_file\n")
        for rec in records:
            fh.write(f"{rec.patch_id},{rec.split},images/{rec.patch_id:06d}.pgm\n")
    with open(os.path.join(path, "annotations.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("patch_id,x,y\n")
        for rec in records:
            for (x, y) in rec.points.points:
                fh.write(f"{rec.patch_id},{float(x)!r},{float(y)!r}\n")
    for rec in records:
        write_pgm(os.path.join(path, "images", f"{rec.patch_id:06d}.pgm"), rec.image)


def _read_csv(path, expected_header):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as ex:
        raise DatasetFormatError(f"cannot read {path}: {ex}") from None
    if not lines or lines[0] != expected_header:
        raise DatasetFormatError(f"{path}: bad header, expected {expected_header!r}", line=1)
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(expected_header.split(",")):
            raise DatasetFormatError(f"{path}: wrong field count", line=i)
        rows.append((i, parts))
    return rows


def load_dataset(path):
    """Read a dataset directory back into records, validating as it goes.
    Nothing is returned on failure — a malformed file raises instead."""
    manifest = _read_csv(os.path.join(path, "manifest.csv"), "patch_id,split,image_file")
    ann_rows = _read_csv(os.path.join(path, "annotations.csv"), "patch_id,x,y")
    per_patch = {}
    for line_no, (pid, x, y) in ann_rows:
        try:
            per_patch.setdefault(int(pid), []).append((float(x), float(y)))
        except ValueError:
            raise DatasetFormatError("annotations.csv: bad number", line=line_no) from None
    records = []
    for line_no, (pid, split, image_file) in manifest:
        try:
            pid = int(pid)
        except ValueError:
            raise DatasetFormatError("manifest.csv: bad patch_id", line=line_no) from None
        img = read_pgm(os.path.join(path, image_file))
        shape = PatchShape(h=img.shape[0], w=img.shape[1])
        pts = np.array(per_patch.get(pid, []), dtype=np.float64).reshape(-1, 2)
        if len(pts):
            x, y = pts[:, 0], pts[:, 1]
            if (x < 0).any() or (x >= shape.w).any() or (y < 0).any() or (y >= shape.h).any():
                raise DatasetFormatError(
                    f"annotation out of image bounds for patch_id {pid}")
        records.append(DatasetRecord(patch_id=pid, image=img,
                                     points=PointSet(points=pts, shape=shape),
                                     split=split))
    return records


def split_records(records, split):
    return [r for r in records if r.split == split]
