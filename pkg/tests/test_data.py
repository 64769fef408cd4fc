"""PGM codec, tiling round trips, dataset ingestion, synthetic fixtures."""

import numpy as np
import pytest

import binadapt as ba
from binadapt.data import (
    GT_INK_THRESHOLD,
    PgmError,
    load_dataset,
    load_eval_masks,
    synthetic_domain_pairs,
    to_grayscale,
    write_synthetic_dirs,
)


# ---------------------------------------------------------------------------
# PGM

def test_minimal_p5_file():
    page = ba.read_pgm(b"P5\n1 1\n255\n\x00")
    assert page.pixels.shape == (1, 1)
    assert page.pixels[0, 0] == 0.0


def test_p5_roundtrip_payload_is_byte_identical():
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 256, size=30 * 17, dtype=np.uint8).tobytes()
    blob = b"P5\n# a comment\n30 17\n255\n" + raw
    page = ba.read_pgm(blob)
    again = ba.write_pgm(page)
    assert again.endswith(raw)
    assert ba.read_pgm(again).pixels.tobytes() == page.pixels.tobytes()


def test_p2_ascii_decoding():
    page = ba.read_pgm(b"P2\n2 2\n255\n0 255\n255 0\n")
    np.testing.assert_array_equal(page.pixels, [[0.0, 1.0], [1.0, 0.0]])


def test_pgm_errors_carry_byte_offsets():
    with pytest.raises(PgmError, match="magic"):
        ba.read_pgm(b"P6\n1 1\n255\n\x00")
    with pytest.raises(PgmError, match="maxval 65535"):
        ba.read_pgm(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(PgmError, match="truncated"):
        ba.read_pgm(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(PgmError, match="byte"):
        ba.read_pgm(b"P2\n2 2\n255\n0 255 999 0\n")
    with pytest.raises(PgmError, match="end of file"):
        ba.read_pgm(b"P5\n4")


def test_write_pgm_rejects_color():
    with pytest.raises(PgmError, match="grayscale"):
        ba.write_pgm(ba.Page(np.zeros((2, 2, 3))))


def test_to_grayscale_bt601():
    page = ba.Page(np.tile([[[1.0, 0.0, 0.0]]], (2, 2, 1)))
    gray = to_grayscale(page)
    assert gray.channels == 1
    np.testing.assert_allclose(gray.pixels, 0.299)


# ---------------------------------------------------------------------------
# tiling

def test_split_exact_tiling():
    page = np.zeros((512, 512))
    grid = ba.split_patches(page, 256, 256)
    assert grid.grid == (2, 2) and len(grid.patches) == 4
    assert grid.pad == (0, 0)


def test_split_with_padding():
    grid = ba.split_patches(np.zeros((300, 300)), 256, 256)
    assert len(grid.patches) == 4
    assert grid.pad == (212, 212)


def test_split_single_patch_page():
    grid = ba.split_patches(np.zeros((10, 10)), 32, 32)
    assert len(grid.patches) == 1
    assert grid.pad == (22, 22)


def test_assemble_inverts_split_bitwise():
    rng = np.random.default_rng(5)
    for _ in range(40):
        h = int(rng.integers(1, 90))
        w = int(rng.integers(1, 90))
        page = rng.random((h, w))
        grid = ba.split_patches(page, int(rng.integers(1, 40)), int(rng.integers(1, 40)))
        back = ba.assemble(grid)
        assert back.tobytes() == page.tobytes()


def test_assemble_single_patch_grid():
    page = np.arange(12.0).reshape(3, 4)
    grid = ba.split_patches(page, 8, 8)
    assert ba.assemble(grid).tobytes() == page.tobytes()


def test_assemble_places_patches_row_major():
    grid = ba.split_patches(np.zeros((4, 4)), 2, 2)
    grid.patches = [np.full((2, 2), v) for v in (1.0, 2.0, 3.0, 4.0)]
    out = ba.assemble(grid)
    assert out[0, 0] == 1.0 and out[0, 3] == 2.0 and out[3, 0] == 3.0 and out[3, 3] == 4.0


def test_assemble_missing_patch_errors():
    grid = ba.split_patches(np.zeros((4, 4)), 2, 2)
    grid.patches[2] = None
    with pytest.raises(ValueError, match="missing patch"):
        ba.assemble(grid)


# ---------------------------------------------------------------------------
# dataset ingestion

def _write_pages(root, n, size=(12, 10), gt=True, gt_skip=()):
    rng = np.random.default_rng(1)
    (root / "images").mkdir(parents=True)
    if gt:
        (root / "gt").mkdir()
    for i in range(n):
        stem = f"p{i:02d}"
        (root / "images" / f"{stem}.pgm").write_bytes(ba.write_pgm(rng.random(size)))
        if gt and stem not in gt_skip:
            mask = (rng.random(size) > 0.5).astype(float)
            (root / "gt" / f"{stem}.pgm").write_bytes(ba.write_pgm(mask))


def test_load_dataset_split_arithmetic(tmp_path):
    _write_pages(tmp_path, 10)
    ds = load_dataset(tmp_path, "source", validation_fraction=0.2, seed=0)
    assert len(ds.train()) == 8 and len(ds.validation()) == 2
    assert all(r.gt is not None for r in ds.records)


def test_load_dataset_target_ignores_gt(tmp_path):
    _write_pages(tmp_path, 4)
    ds = load_dataset(tmp_path, "target", seed=0)
    assert all(r.gt is None for r in ds.records)


def test_load_dataset_target_without_gt_directory(tmp_path):
    _write_pages(tmp_path, 3, gt=False)
    ds = load_dataset(tmp_path, "target", seed=0)
    assert len(ds.records) == 3
    assert all(r.gt is None for r in ds.records)
    assert load_eval_masks(tmp_path) == {}


def test_load_dataset_split_is_deterministic(tmp_path):
    _write_pages(tmp_path, 9)
    a = load_dataset(tmp_path, "source", 0.3, seed=7)
    b = load_dataset(tmp_path, "source", 0.3, seed=7)
    assert [(r.stem, r.split) for r in a.records] == [(r.stem, r.split) for r in b.records]
    c = load_dataset(tmp_path, "source", 0.3, seed=8)
    assert [(r.stem, r.split) for r in a.records] != [(r.stem, r.split) for r in c.records]


def test_load_dataset_missing_gt_lists_stems(tmp_path):
    _write_pages(tmp_path, 3, gt_skip=("p01",))
    with pytest.raises(FileNotFoundError, match="p01"):
        load_dataset(tmp_path, "source", seed=0)


def test_load_dataset_dimension_mismatch(tmp_path):
    _write_pages(tmp_path, 1)
    (tmp_path / "gt" / "p00.pgm").write_bytes(ba.write_pgm(np.zeros((3, 3))))
    with pytest.raises(ValueError, match="size"):
        load_dataset(tmp_path, "source", seed=0)


def test_gt_binarized_at_128(tmp_path):
    (tmp_path / "images").mkdir(parents=True)
    (tmp_path / "gt").mkdir()
    (tmp_path / "images" / "a.pgm").write_bytes(b"P5\n2 1\n255\n\x00\x00")
    (tmp_path / "gt" / "a.pgm").write_bytes(bytes([0x50, 0x35, 0x0A]) + b"2 1\n255\n" + bytes([127, 128]))
    ds = load_dataset(tmp_path, "source", validation_fraction=0.0, seed=0)
    np.testing.assert_array_equal(ds.records[0].gt.mask, [[0, 1]])
    assert GT_INK_THRESHOLD == 128


# ---------------------------------------------------------------------------
# synthetic fixtures

def test_synthetic_mask_foreground_fraction():
    for kind in ("source", "target_near", "target_far"):
        for _, _, mask in synthetic_domain_pairs(0, kind):
            assert 0.02 <= mask.mean() <= 0.30


def test_synthetic_determinism():
    a = synthetic_domain_pairs(3, "target_far")
    b = synthetic_domain_pairs(3, "target_far")
    for (sa, pa, ma), (sb, pb, mb) in zip(a, b):
        assert sa == sb and pa.tobytes() == pb.tobytes() and ma.tobytes() == mb.tobytes()


def test_synthetic_mean_intensity_contrast():
    src = synthetic_domain_pairs(0, "source")
    far = synthetic_domain_pairs(0, "target_far")
    src_mean = np.mean([p.mean() for _, p, _ in src])
    far_mean = np.mean([p.mean() for _, p, _ in far])
    assert abs(src_mean - far_mean) > 0.3


def test_make_synthetic_domains_roles_and_sizes():
    src, near, far = ba.make_synthetic_domains(0)
    assert src.role == "source" and near.role == far.role == "target"
    assert len(src.records) >= 8
    assert all(r.page.pixels.shape >= (128, 128) for r in src.records)
    assert all(r.gt is not None for r in src.records)
    assert all(r.gt is None for r in near.records + far.records)
    assert len(src.train()) >= 1 and len(src.validation()) >= 1


def test_write_synthetic_dirs_loadable(tmp_path):
    dirs = write_synthetic_dirs(0, tmp_path, n_pages=3, page_size=(40, 40))
    assert [d.name for d in dirs] == ["source", "target_near", "target_far"]
    src = load_dataset(tmp_path / "source", "source", 0.34, seed=0)
    assert len(src.records) == 3
    masks = load_eval_masks(tmp_path / "target_far")
    assert set(masks) == {"page00", "page01", "page02"}
    # round-tripped gt equals the generator's mask
    pairs = synthetic_domain_pairs(0, "target_far", n_pages=3, page_size=(40, 40))
    for stem, _, mask in pairs:
        np.testing.assert_array_equal(masks[stem].mask, mask)
