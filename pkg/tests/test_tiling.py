import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from gmb.tiling import (
    DIHEDRAL_COMPOSE,
    DIHEDRAL_INVERSE,
    RasterPyramid,
    ResolutionError,
    ThresholdParams,
    TissueMask,
    dihedral_transform,
    extract_patch_grid,
    grid_origins,
    load_pyramid,
    mask_to_frame,
    resample_lanczos,
    segment_tissue_threshold,
    tissue_mask_for,
)


# -- Lanczos ------------------------------------------------------------------


def _lanczos3(x):
    x = np.asarray(x, dtype=float)
    out = np.sinc(x) * np.sinc(x / 3.0)
    return np.where(np.abs(x) < 3.0, out, 0.0)


def _resample_axis(a, out_len, axis):
    """Direct Lanczos-3 convolution along one axis with the filter stretched by the scale factor."""
    n = a.shape[axis]
    scale = n / out_len
    support = 3.0 * scale
    a = np.moveaxis(a, axis, 0)
    out = np.empty((out_len,) + a.shape[1:])
    for i in range(out_len):
        center = (i + 0.5) * scale
        lo, hi = max(int(center - support + 0.5), 0), min(int(center + support + 0.5), n)
        j = np.arange(lo, hi)
        w = _lanczos3((j + 0.5 - center) / scale)
        w /= w.sum()
        out[i] = np.tensordot(w, a[lo:hi], axes=1)
    return np.moveaxis(out, 0, axis)


def lanczos_oracle(img, out_h, out_w):
    x = _resample_axis(img.astype(float), out_w, 1)
    x = np.clip(np.rint(x), 0, 255)
    return np.clip(np.rint(_resample_axis(x, out_h, 0)), 0, 255)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2.0, 4.0, 8.0]))
def test_lanczos_matches_direct_convolution(seed, factor):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(32, 48, 3), dtype=np.uint8)
    got = resample_lanczos(img, 1.0, factor)
    want = lanczos_oracle(img, int(32 / factor), int(48 / factor))
    assert got.shape == want.shape
    # PIL works in fixed point; allow one grey level per pass
    assert np.abs(got.astype(int) - want).max() <= 2


def test_lanczos_identity_and_constant():
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    assert np.array_equal(resample_lanczos(img, 0.5, 0.5), img)
    flat = np.full((16, 16, 3), 77, np.uint8)
    assert np.array_equal(resample_lanczos(flat, 1.0, 2.0), np.full((8, 8, 3), 77))


def test_lanczos_refuses_upsampling():
    with pytest.raises(ResolutionError):
        resample_lanczos(np.zeros((4, 4, 3), np.uint8), 2.0, 1.0)


def test_checkerboard_halves_to_mean():
    # at 2x the lanczos taps at offsets +-0.25, +-0.75, ... are symmetric pairs over the 2-periodic
    # pattern, so every interior output sits exactly at the mean grey level
    cb = ((np.indices((32, 32)).sum(0) % 2) * 200).astype(np.uint8)
    out = resample_lanczos(np.stack([cb] * 3, -1), 1.0, 2.0)
    assert np.abs(out[4:-4, 4:-4].astype(int) - 100).max() <= 1


# -- pyramid and segmentation ----------------------------------------------------


def _pyramid(h=64, w=64):
    img = np.full((h, w, 3), 245, np.uint8)
    img[:32, :32] = (150, 80, 160)
    return RasterPyramid([(img, 1.0), (resample_lanczos(img, 1.0, 8.0), 8.0)])


def test_closest_finer_level():
    p = _pyramid()
    assert p.closest_finer_level(1.0)[1] == 1.0
    assert p.closest_finer_level(4.0)[1] == 1.0
    assert p.closest_finer_level(8.0)[1] == 8.0
    assert p.closest_finer_level(50.0)[1] == 8.0
    with pytest.raises(ResolutionError):
        p.closest_finer_level(0.5)


def test_pyramid_invariants():
    a = np.zeros((8, 8, 3), np.uint8)
    with pytest.raises(ValueError):
        RasterPyramid([(a, 2.0), (a[:4, :4], 1.0)])
    with pytest.raises(ValueError):
        RasterPyramid([(a[:4, :4], 1.0), (a, 2.0)])
    with pytest.raises(ValueError):
        RasterPyramid([])


def test_load_pyramid(tmp_path):
    img = np.zeros((16, 16, 3), np.uint8)
    Image.fromarray(img).save(tmp_path / "a.png")
    Image.fromarray(img[:2, :2]).save(tmp_path / "b.png")
    (tmp_path / "s.json").write_text(json.dumps({"pixel_size_um": 1.0, "levels": [{"file": "b.png", "pixel_size_um": 8.0}, {"file": "a.png", "pixel_size_um": 1.0}]}))
    p = load_pyramid(tmp_path / "s.json")
    assert [um for _, um in p.levels] == [1.0, 8.0]


def test_segmentation_threshold():
    raster = np.array([[[255, 255, 255], [200, 100, 150], [128, 128, 128], [250, 240, 245]]], np.uint8)
    m = segment_tissue_threshold(raster, ThresholdParams(0.05, 0.95))
    # white: not saturated; pink: tissue; grey: no saturation; near-white pink: too bright
    assert m.mask.tolist() == [[False, True, False, False]]
    assert m.fraction == 0.25


def test_tissue_mask_for_uses_8um():
    m = tissue_mask_for(_pyramid())
    assert m.pixel_size_um == 8.0 and m.mask.shape == (8, 8)
    assert m.mask[:4, :4].all() and not m.mask[4:, 4:].any()


# -- grid ------------------------------------------------------------------------


def brute_grid(mask, edge, overlap, thr):
    stride = edge - overlap
    h, w = mask.shape
    return [
        (x, y)
        for y in range(0, h - edge + 1, stride)
        for x in range(0, w - edge + 1, stride)
        if mask[y : y + edge, x : x + edge].sum() >= thr * edge * edge
    ]


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9), st.data())
def test_grid_matches_brute_force(seed, edge, data):
    rng = np.random.default_rng(seed)
    overlap = data.draw(st.integers(0, edge - 1))
    thr = data.draw(st.sampled_from([0.0, 0.1, 0.5, 1.0]))
    mask = rng.random((rng.integers(1, 30), rng.integers(1, 30))) < rng.random()
    assert grid_origins(mask, edge, overlap, thr) == brute_grid(mask, edge, overlap, thr)


def test_grid_threshold_boundary_and_overlap():
    mask = np.zeros((256, 512), bool)
    mask[:, :26] = True  # 26/256 columns: above 10% of the first window
    assert grid_origins(mask, 256, 0, 0.10) == [(0, 0)]
    mask[:, 25] = False  # 25 columns: just below
    assert grid_origins(mask, 256, 0, 0.10) == []
    full = np.ones((512, 512), bool)
    assert grid_origins(full, 256, 128, 0.1) == [(x, y) for y in (0, 128, 256) for x in (0, 128, 256)]


def test_grid_rejects_bad_overlap():
    with pytest.raises(ValueError):
        grid_origins(np.ones((4, 4), bool), 4, 4, 0.1)


def test_mask_to_frame_nearest():
    m = TissueMask(np.array([[True, False], [False, True]]), 8.0)
    f = mask_to_frame(m, 1.0, (16, 16))
    assert f[:8, :8].all() and not f[:8, 8:].any() and f[8:, 8:].all()


def test_extract_patch_grid_crops_from_target_frame():
    p = _pyramid()
    rec = extract_patch_grid(p, tissue_mask_for(p), edge_px=16, target_um_per_px=2.0, overlap_px=0)
    frame = resample_lanczos(p.levels[0][0], 1.0, 2.0)
    assert rec.pixel_size_um == 2.0 and len(rec) == 1 and rec.origins.tolist() == [[0, 0]]
    assert np.array_equal(rec.patches[0], frame[:16, :16])


def test_extract_patch_grid_empty_when_no_tissue():
    img = np.full((32, 32, 3), 250, np.uint8)
    p = RasterPyramid([(img, 1.0)])
    rec = extract_patch_grid(p, tissue_mask_for(p), edge_px=8)
    assert len(rec) == 0 and rec.patches.shape == (0, 8, 8, 3)


# -- dihedral group --------------------------------------------------------------


def test_dihedral_ops_distinct_and_pixel_map():
    img = np.arange(16).reshape(4, 4)
    assert len({dihedral_transform(img, k).tobytes() for k in range(8)}) == 8
    r = dihedral_transform(img, 1)
    W = 4
    for y, x in itertools.product(range(4), range(4)):
        # a 90 degree counter-clockwise turn sends pixel (x, y) to (y, W-1-x)
        assert r[W - 1 - x, y] == img[y, x]


def test_dihedral_group_tables():
    img = np.random.default_rng(0).integers(0, 256, (5, 5, 3))
    for a, b in itertools.product(range(8), repeat=2):
        assert np.array_equal(dihedral_transform(dihedral_transform(img, a), b), dihedral_transform(img, DIHEDRAL_COMPOSE[a][b]))
    for a in range(8):
        assert np.array_equal(dihedral_transform(dihedral_transform(img, a), DIHEDRAL_INVERSE[a]), img)
    for a, b, c in itertools.product(range(8), repeat=3):
        assert DIHEDRAL_COMPOSE[DIHEDRAL_COMPOSE[a][b]][c] == DIHEDRAL_COMPOSE[a][DIHEDRAL_COMPOSE[b][c]]


def test_dihedral_errors():
    with pytest.raises(ValueError):
        dihedral_transform(np.zeros((2, 2)), 8)
    with pytest.raises(ValueError):
        dihedral_transform(np.zeros((2, 3)), 1)
