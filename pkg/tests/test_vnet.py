import numpy as np
import pytest

from gradcheck import TINY, end_to_end_grad_error
from muscleseg.autograd import conv3d
from muscleseg.vnet import (ArchitectureSpec, CorruptCheckpointError, SpecError, build_model, count_parameters,
                            forward, layer_table, load_checkpoint, save_checkpoint)

DESK = ArchitectureSpec((32, 32, 64), width=0.25)


def closed_form_count(f, cin=1):
    """Per-block sum written out independently of layer_table."""
    f0, f1, f2, f3, f4 = f
    c5 = lambda i, o: 125 * i * o + o  # noqa: E731
    c2 = lambda i, o: 8 * i * o + o  # noqa: E731
    pj = lambda i, o: 0 if i == o else i * o  # noqa: E731
    total = c5(cin, f0) + pj(cin, f0) + c2(f0, f1)
    total += c5(f1, f2) + c5(f2, f2) + pj(f1, f2) + c2(f2, f2)
    total += c5(f2, f3) + 2 * c5(f3, f3) + pj(f2, f3) + c2(f3, f3)
    total += c5(f3, f4) + 2 * c5(f4, f4) + pj(f3, f4) + c2(f4, f4)
    total += 3 * c5(f4, f4) + c2(f4, f3)
    total += c5(f3 + f4, f4) + 2 * c5(f4, f4) + pj(f3 + f4, f4) + c2(f4, f3)
    total += c5(f3 + f3, f3) + 2 * c5(f3, f3) + pj(2 * f3, f3) + c2(f3, f2)
    total += c5(f2 + f2, f2) + 2 * c5(f2, f2) + pj(2 * f2, f2) + c2(f2, f1)
    total += c5(f1 + f0, f1) + pj(f1 + f0, f1) + (f1 + 1)
    return total


def test_spec_validation():
    with pytest.raises(SpecError):
        ArchitectureSpec((30, 32, 64))
    with pytest.raises(SpecError):
        ArchitectureSpec((32, 32, 64), width=0)
    assert ArchitectureSpec().filters == (8, 16, 32, 64, 128)
    assert DESK.filters == (2, 4, 8, 16, 32)


@pytest.mark.parametrize("spec", [ArchitectureSpec(), DESK, ArchitectureSpec((16, 16, 16), width=0.5)])
def test_parameter_count_closed_form(spec):
    expected = closed_form_count(spec.filters)
    assert sum(int(np.prod(s)) + (s[1] if k == "tconv" else s[0] if k == "conv" else 0)
               for _, k, s in layer_table(spec)) == expected
    if spec.input_dims != (96, 96, 192):
        assert count_parameters(build_model(spec)) == expected


def test_full_scale_count():
    assert count_parameters(build_model(ArchitectureSpec((16, 16, 16)))) == closed_form_count((8, 16, 32, 64, 128))


def test_small_layer_counts():
    assert 125 * 8 + 8 == 1008
    first = [s for n, _, s in layer_table(ArchitectureSpec()) if n == "init.conv0"][0]
    assert int(np.prod(first)) + first[0] == 1008
    last = [s for n, _, s in layer_table(ArchitectureSpec()) if n == "final.out"][0]
    assert int(np.prod(last)) + last[0] == 17


def test_width_doubling_scales_weights():
    def conv_weights(w):
        return sum(int(np.prod(s)) for _, k, s in layer_table(ArchitectureSpec((16, 16, 16), width=w))
                   if k == "conv" and s[1] > 1 and s[0] > 1)
    # exact when every filter count doubles: (2a)(2b) = 4ab for all in/out pairs with in, out > 1
    assert conv_weights(1.0) == 4 * conv_weights(0.5)


def test_build_deterministic_and_init_scale():
    a, b = build_model(DESK, seed=3), build_model(DESK, seed=3)
    for (na, ta), (nb, tb) in zip(a.params.items(), b.params.items()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    big = build_model(ArchitectureSpec((16, 16, 16)), seed=0)
    w = big.params["bottom.conv0.weight"].data
    assert w.std() == pytest.approx(1 / np.sqrt(128 * 125), rel=0.02)
    assert all(np.all(t.data == 0) for n, t in big.params.items() if n.endswith(".bias"))


def test_forward_shape_range_and_determinism():
    m = build_model(DESK, seed=1)
    x = np.random.default_rng(0).standard_normal((32, 32, 64)).astype(np.float32)
    p1, p2 = forward(m, x), forward(m, x)
    assert p1.shape == (32, 32, 64)
    assert np.all((p1 > 0) & (p1 < 1))
    np.testing.assert_array_equal(p1, p2)
    with pytest.raises(ValueError):
        forward(m, np.zeros((32, 32, 32), np.float32))


def _taps(model, x):
    """Record spatial dims after every named block by re-running with hooks via layer names."""
    shapes = {}
    from muscleseg.autograd import ops
    orig = ops.conv3d

    def spy(inp, w, b=None, stride=1, padding=None):
        out = orig(inp, w, b, stride, padding)
        shapes.setdefault(w.name, out.shape[2:])
        return out
    import muscleseg.vnet as vn
    vn.conv3d = spy
    try:
        forward(model, x)
    finally:
        vn.conv3d = orig
    return shapes


def test_resolution_ladder():
    m = build_model(TINY)
    s = _taps(m, np.zeros((16, 16, 16), np.float32))
    assert s["init.down.weight"] == (8, 8, 8)
    assert s["down1.down.weight"] == (4, 4, 4)
    assert s["down2.down.weight"] == (2, 2, 2)
    assert s["down3.down.weight"] == (1, 1, 1)
    assert s["up1.conv0.weight"] == (2, 2, 2)
    assert s["up2.conv0.weight"] == (4, 4, 4)
    assert s["up3.conv0.weight"] == (8, 8, 8)
    assert s["final.conv0.weight"] == (16, 16, 16)


def test_batch_permutation_equivariance():
    m = build_model(TINY, seed=2)
    x = np.random.default_rng(1).standard_normal((3, 1, 16, 16, 16)).astype(np.float32)
    out = forward(m, x)
    np.testing.assert_array_equal(forward(m, x[[2, 0, 1]]), out[[2, 0, 1]])


def test_end_to_end_gradient_check():
    assert end_to_end_grad_error(0) < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    m = build_model(DESK, seed=5)
    m.metadata["note"] = "x"
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    back = load_checkpoint(p, expect_spec=DESK)
    x = np.random.default_rng(0).standard_normal((32, 32, 64)).astype(np.float32)
    np.testing.assert_array_equal(forward(back, x), forward(m, x))
    assert count_parameters(back) == count_parameters(m)
    assert back.spec.digest() == DESK.digest()
    assert back.metadata["note"] == "x"
    blob = p.read_bytes()
    save_checkpoint(back, p)
    assert p.read_bytes() == blob


def test_checkpoint_corruption(tmp_path):
    m = build_model(TINY)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    blob = p.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(blob[:-10])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(blob.replace(b"MSEGCKPT", b"XXXXXXXX", 1))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "nohead.ckpt").write_bytes(b"garbage")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "nohead.ckpt")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(p, expect_spec=DESK)


def test_checkpoint_write_is_atomic(tmp_path, monkeypatch):
    m = build_model(TINY)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    before = p.read_bytes()
    import muscleseg.vnet as vn

    def boom(*a, **k):
        raise KeyboardInterrupt
    monkeypatch.setattr(vn.os, "replace", boom)
    m.params["final.out.bias"].data[:] = 7
    with pytest.raises(KeyboardInterrupt):
        save_checkpoint(m, p)
    assert p.read_bytes() == before
    assert sorted(x.name for x in tmp_path.iterdir()) == ["m.ckpt"]
