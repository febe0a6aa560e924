import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bihl.errors import BihlError
from bihl.hlfeat import feature_image, hl_map, hl_response
from bihl.imgpyr import ImagePlane, downsample

from hl_oracle import naive_hl


def test_constant_image_is_zero():
    assert not hl_map(ImagePlane(np.full((10, 12), 93, np.uint8)), (0, 0)).data.any()


def test_alternating_columns_saturate():
    row = np.tile([0, 255], 8).astype(np.uint8)
    fmap = hl_map(ImagePlane(np.tile(row, (6, 1))), (0, 0))
    # raw 510 / 1.9881 = 256.5 before clamping
    assert np.all(fmap.data == 255)


def test_checker_2x2_cancels():
    fmap = hl_map(ImagePlane(np.array([[0, 255], [255, 0]], np.uint8)), (0, 0))
    assert fmap.data.tolist() == [[0]]


def test_horizontal_edge_is_invisible():
    a = np.zeros((16, 16), np.uint8)
    a[8:] = 200
    assert not hl_map(ImagePlane(a), (0, 0)).data.any()


def test_vertical_edge_is_seen():
    a = np.zeros((8, 16), np.uint8)
    a[:, 7:] = 200
    fmap = hl_map(ImagePlane(a), (0, 0)).data
    # the edge falls inside column pair (6, 7)
    assert np.all(fmap[:, 3] == round(400 / 1.41 / 1.41)) and fmap.sum() == fmap[:, 3].sum()


@pytest.mark.parametrize("h,w", [(2, 2), (3, 5), (17, 9), (64, 64)])
def test_dimensions_floor_half(h, w):
    fmap = hl_map(ImagePlane(np.zeros((h, w), np.uint8)), (0, 0))
    assert (fmap.height, fmap.width) == (h // 2, w // 2)


def test_too_small():
    with pytest.raises(BihlError) as exc:
        hl_map(ImagePlane(np.zeros((1, 8), np.uint8)), (0, 0))
    assert exc.value.code == "too-small"


def test_pyramid_level_tagged(rng):
    img = ImagePlane(rng.integers(0, 256, (64, 96), dtype=np.uint8))
    level = downsample(img, (1, 2))
    fmap = hl_map(level, (1, 2))
    assert np.array_equal(fmap.data, naive_hl(level.data))
    assert tuple(fmap.scale) == (1, 2)
    assert (fmap.height, fmap.width) == (16, 12)


def test_matches_oracle_random(rng):
    for _ in range(50):
        h, w = rng.integers(2, 65, 2)
        a = rng.integers(0, 256, (h, w), dtype=np.uint8)
        assert np.array_equal(hl_response(a), naive_hl(a))


@settings(max_examples=80, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(2, 24), st.integers(2, 24))), st.data())
def test_dc_offset_invariance(a, data):
    offset = data.draw(st.integers(-int(a.min()), 255 - int(a.max())))
    b = (a.astype(np.int64) + offset).astype(np.uint8)
    assert np.array_equal(hl_response(a), hl_response(b))


@settings(max_examples=80, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(2, 20), st.integers(2, 20))))
def test_values_in_byte_range_and_match_oracle(a):
    out = hl_response(a)
    assert out.dtype == np.uint8
    assert np.array_equal(out, naive_hl(a))


def test_feature_image_is_plane(rng):
    fmap = hl_map(ImagePlane(rng.integers(0, 256, (20, 30), dtype=np.uint8)), (0, 0))
    img = feature_image(fmap)
    assert isinstance(img, ImagePlane) and np.array_equal(img.data, fmap.data)
