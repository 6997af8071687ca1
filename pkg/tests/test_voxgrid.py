import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from muscleseg.voxgrid import (CorruptFileError, LandmarkPair, Mask3D, MvolFormatError, Spacing, Volume3D,
                               decode_mvol, dsc, encode_mvol, flip_x, largest_component, mask_volume_ml,
                               read_mvol, write_mvol)
from oracles import flood_fill_components

dims3 = st.tuples(*[st.integers(1, 5)] * 3)
spacings = st.tuples(*[st.floats(0.1, 5.0)] * 3)


@st.composite
def masks(draw, dims=None):
    d = dims or draw(dims3)
    labels = draw(arrays(np.uint8, d, elements=st.integers(0, 2)))
    return Mask3D(labels, draw(spacings))


@st.composite
def mask_pairs(draw):
    d = draw(dims3)
    return draw(masks(d)), draw(masks(d))


def test_spacing_must_be_positive():
    with pytest.raises(ValueError):
        Spacing(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        Spacing(1.0, float("inf"), 1.0)


def test_volume_rejects_non_finite():
    with pytest.raises(ValueError):
        Volume3D(np.array([[[np.nan]]]), (1, 1, 1))


def test_mask_rejects_foreign_labels():
    with pytest.raises(ValueError):
        Mask3D(np.full((2, 2, 2), 3, np.uint8), (1, 1, 1))


def test_landmarks_need_right_before_left():
    with pytest.raises(ValueError):
        LandmarkPair((5, 0, 0), (3, 0, 0))
    with pytest.raises(ValueError):
        LandmarkPair((0, 0, 0), (9, 0, 0)).check_inside((4, 4, 4))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, dims3, elements=st.floats(-1e6, 1e6, width=32)), spacings)
def test_image_roundtrip_bit_identical(vox, sp):
    v = Volume3D(vox, sp)
    blob = encode_mvol(v)
    back = decode_mvol(blob)
    assert back.dims == v.dims and back.spacing == v.spacing
    assert back.voxels.tobytes() == v.voxels.tobytes()
    assert encode_mvol(back) == blob


@settings(max_examples=40, deadline=None)
@given(masks())
def test_mask_roundtrip(m):
    back = decode_mvol(encode_mvol(m))
    assert back.kind == "mask"
    np.testing.assert_array_equal(back.labels, m.labels)


def test_one_voxel_payload_bytes(tmp_path):
    p = tmp_path / "one.mvol"
    write_mvol(Volume3D(np.ones((1, 1, 1), np.float32), (1, 1, 1)), p)
    raw = p.read_bytes()
    assert raw[raw.index(b"\n") + 1:] == bytes([0x00, 0x00, 0x80, 0x3F])
    assert read_mvol(p).voxels[0, 0, 0] == 1.0


def test_payload_is_x_fastest():
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    blob = encode_mvol(Volume3D(arr, (1, 1, 1)))
    payload = np.frombuffer(blob[blob.index(b"\n") + 1:], "<f4")
    assert payload[1] == arr[1, 0, 0] and payload[2] == arr[0, 1, 0]


def test_short_payload_is_corrupt():
    blob = encode_mvol(Volume3D(np.zeros((2, 2, 2), np.float32), (1, 1, 1)))
    with pytest.raises(CorruptFileError):
        decode_mvol(blob[:-4])


def test_bad_magic_is_format_error():
    with pytest.raises(MvolFormatError):
        decode_mvol(b'{"magic":"NOPE"}\n')
    with pytest.raises(MvolFormatError):
        decode_mvol(b"no newline at all")


def test_volume_ml_examples():
    lab = np.zeros((10, 10, 10), np.uint8)
    lab[:] = 1
    assert mask_volume_ml(Mask3D(lab, (1, 1, 1)), 1) == pytest.approx(1.0)
    assert mask_volume_ml(Mask3D(lab, (1, 1, 1)), 2) == 0.0
    small = np.ones((2, 2, 2), np.uint8)
    assert mask_volume_ml(Mask3D(small, (2, 2, 3)), 1) == pytest.approx(0.096)
    with pytest.raises(ValueError):
        mask_volume_ml(Mask3D(small, (1, 1, 1)), 3)


def test_dsc_hand_cases():
    a = np.zeros((5, 1, 1), np.uint8)
    b = np.zeros((5, 1, 1), np.uint8)
    a[[0, 1, 2, 3]] = 1   # TP at 0..2, FN at 3
    b[[0, 1, 2, 4]] = 1   # FP at 4
    assert dsc(a, b, 1) == 0.75
    assert dsc(a, a, 1) == 1.0
    assert dsc(np.zeros_like(a), np.zeros_like(a), 1) == 1.0
    c = np.zeros_like(a)
    c[4] = 1
    d = np.zeros_like(a)
    d[0] = 1
    assert dsc(c, d, 1) == 0.0
    with pytest.raises(ValueError):
        dsc(a, np.zeros((4, 1, 1), np.uint8))


@settings(max_examples=60, deadline=None)
@given(mask_pairs(), st.sampled_from([None, 1, 2]))
def test_dsc_properties(pair, label):
    a, b = pair
    v = dsc(a, b, label)
    assert 0.0 <= v <= 1.0
    assert v == dsc(b, a, label)
    assert v == dsc(flip_x(a), flip_x(b), label)
    assert dsc(a, a, label) == 1.0


@settings(max_examples=40, deadline=None)
@given(masks())
def test_volume_additive_and_flip_invariant(m):
    both = Mask3D((m.labels > 0).astype(np.uint8), m.spacing)
    assert mask_volume_ml(both, 1) == pytest.approx(mask_volume_ml(m, 1) + mask_volume_ml(m, 2))
    for label in (1, 2):
        assert mask_volume_ml(flip_x(m), label) == mask_volume_ml(m, label)
    np.testing.assert_array_equal(flip_x(flip_x(m)).labels, m.labels)


def test_flip_moves_voxel():
    lab = np.zeros((4, 2, 2), np.uint8)
    lab[0, 1, 1] = 2
    f = flip_x(Mask3D(lab, (1, 2, 3)))
    assert f.labels[3, 1, 1] == 2 and f.labels.sum() == 2
    assert f.spacing == Spacing(1, 2, 3)


def test_largest_component_examples():
    lab = np.zeros((12, 6, 6), np.uint8)
    lab[0:10, 0, 0] = 1
    lab[11, 4:, 3:5] = 1
    lab[11, 4, 5] = 1
    assert (lab == 1).sum() == 15
    out = largest_component(Mask3D(lab, (1, 1, 1)), 1).labels
    assert (out == 1).sum() == 10 and out[0:10, 0, 0].all()
    single = Mask3D(lab * 0 + (np.arange(12)[:, None, None] < 3).astype(np.uint8), (1, 1, 1))
    np.testing.assert_array_equal(largest_component(single, 1).labels, single.labels)
    empty = Mask3D(np.zeros((3, 3, 3), np.uint8), (1, 1, 1))
    assert largest_component(empty, 2).labels.sum() == 0


def test_largest_component_tie_break_smallest_index():
    lab = np.zeros((6, 1, 1), np.uint8)
    lab[[0, 1]] = 1
    lab[[4, 5]] = 1
    out = largest_component(Mask3D(lab, (1, 1, 1)), 1).labels
    assert out[:, 0, 0].tolist() == [1, 1, 0, 0, 0, 0]


def test_largest_component_keeps_other_label():
    lab = np.zeros((6, 3, 3), np.uint8)
    lab[0, 0, 0] = 1
    lab[3:5, 0, 0] = 1
    lab[5, 2, 2] = 2
    out = largest_component(Mask3D(lab, (1, 1, 1)), 1).labels
    assert out[5, 2, 2] == 2 and out[0, 0, 0] == 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(*[st.integers(1, 6)] * 3), elements=st.integers(0, 1)))
def test_largest_component_matches_flood_fill(sel):
    comps = flood_fill_components(sel == 1)
    out = largest_component(Mask3D(sel, (1, 1, 1)), 1).labels
    if not comps:
        assert out.sum() == 0
        return
    # oracle tie-break: size desc, then smallest x-fastest linear index
    lin = lambda v: v[0] + sel.shape[0] * (v[1] + sel.shape[1] * v[2])  # noqa: E731
    best = min(comps, key=lambda c: (-len(c), min(lin(v) for v in c)))
    expect = np.zeros_like(sel)
    for v in best:
        expect[v] = 1
    np.testing.assert_array_equal(out, expect)
