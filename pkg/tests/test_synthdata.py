import numpy as np
import pytest

from csdetect.encoding import PatchShape
from csdetect.errors import ConfigError, DatasetFormatError
from csdetect.synthdata import (DatasetRecord, SynthConfig, generate,
                                load_dataset, make_dataset, read_pgm,
                                render_patch, save_dataset, write_pgm)


def small_cfg(**kw):
    base = dict(shape=PatchShape(64, 64), cells_min=1, cells_max=3,
                blob_radius=5.0, clutter_min=1, clutter_max=2, seed=9)
    base.update(kw)
    return SynthConfig(**base)


def test_generation_is_deterministic():
    a = generate(small_cfg(), 8)
    b = generate(small_cfg(), 8)
    assert a == b


def test_render_order_independent():
    cfg = small_cfg()
    assert render_patch(cfg, 5) == generate(cfg, 8)[5]


def test_blank_patches_when_no_cells():
    recs = generate(small_cfg(cells_min=0, cells_max=0, clutter_min=0,
                              clutter_max=0), 3)
    for rec in recs:
        assert len(rec.points) == 0


def test_counts_within_configured_range():
    recs = generate(small_cfg(cells_min=3, cells_max=6, shape=PatchShape(128, 128)), 120)
    counts = [len(r.points) for r in recs]
    assert min(counts) >= 3 and max(counts) <= 6
    assert 3.0 <= np.mean(counts) <= 6.0


def test_spacing_and_border_invariants():
    cfg = small_cfg(cells_min=2, cells_max=4, shape=PatchShape(96, 96))
    for rec in generate(cfg, 300):
        pts = rec.points.points
        assert (pts[:, 0] >= cfg.blob_radius).all()
        assert (pts[:, 0] <= 96 - cfg.blob_radius).all()
        assert (pts[:, 1] >= cfg.blob_radius).all()
        assert (pts[:, 1] <= 96 - cfg.blob_radius).all()
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                assert np.hypot(*(pts[i] - pts[j])) >= 2 * cfg.blob_radius


def test_blob_peaks_exceed_background():
    cfg = small_cfg(noise_sigma=0.0, clutter_min=0, clutter_max=0)
    for rec in generate(cfg, 10):
        img = rec.image.astype(float)
        for (x, y) in rec.points.points:
            assert img[int(round(y)), int(round(x))] >= cfg.background + cfg.intensity_lo / 2


def test_intensities_are_bytes():
    rec = generate(small_cfg(), 1)[0]
    assert rec.image.dtype == np.uint8


def test_infeasible_packing_raises():
    cfg = small_cfg(cells_min=25, cells_max=25, blob_radius=10.0,
                    shape=PatchShape(80, 80))
    with pytest.raises(ConfigError):
        generate(cfg, 1)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(blob_radius=20.0)  # not under a quarter of the side
    with pytest.raises(ConfigError):
        small_cfg(cells_min=4, cells_max=2)
    with pytest.raises(ConfigError):
        small_cfg(clutter_contrast=1.5)


def test_pgm_roundtrip(tmp_path):
    img = (np.arange(20 * 30) % 256).astype(np.uint8).reshape(20, 30)
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    assert np.array_equal(read_pgm(path), img)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n30 20\n255\n")


def test_pgm_errors_carry_offsets(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P6\n2 2\n255\n....")
    with pytest.raises(DatasetFormatError):
        read_pgm(p)
    q = tmp_path / "trunc.pgm"
    q.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
    with pytest.raises(DatasetFormatError) as exc:
        read_pgm(q)
    assert exc.value.offset is not None


def test_dataset_roundtrip(tmp_path):
    records = make_dataset(small_cfg(), 5, 2, 3)
    save_dataset(records, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back == records
    assert [r.split for r in back] == ["train"] * 5 + ["val"] * 2 + ["test"] * 3


def test_save_is_byte_deterministic(tmp_path):
    records = make_dataset(small_cfg(), 4)
    save_dataset(records, tmp_path / "a")
    save_dataset(records, tmp_path / "b")
    for name in ("manifest.csv", "annotations.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_rejects_truncated_manifest(tmp_path):
    records = make_dataset(small_cfg(), 3)
    save_dataset(records, tmp_path / "ds")
    man = tmp_path / "ds" / "manifest.csv"
    man.write_text("patch_id,split\n0,train\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "ds")


def test_load_rejects_out_of_bounds_annotation(tmp_path):
    records = make_dataset(small_cfg(), 2)
    save_dataset(records, tmp_path / "ds")
    ann = tmp_path / "ds" / "annotations.csv"
    ann.write_text("patch_id,x,y\n1,500.0,10.0\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError) as exc:
        load_dataset(tmp_path / "ds")
    assert "patch_id 1" in str(exc.value)


def test_record_equality_semantics():
    a, b = generate(small_cfg(), 2)
    assert a == a
    assert a != b
    assert a != DatasetRecord(patch_id=a.patch_id, image=a.image,
                              points=a.points, split="test")
