import numpy as np
import pytest

from scenediff.labels import ChangeMaps, ImagePair
from scenediff.tensor import Conv2d, ShapeError, finite_diff_check, mse_loss
from scenediff.unet import (CheckpointError, UNetConfig, build, forward, load_checkpoint,
                            param_count, predict, preset, save_checkpoint)


def closed_form_count(widths, c_in=6, c_out=4, skip=True):
    total, c = 0, c_in
    for w in widths:
        total += (9 * c * w + w) + 2 * w  # conv + bn
        total += (9 * w * w + w) + 2 * w  # stride-2 conv + bn
        c = w
    for w in reversed(widths):
        total += 4 * c * w + w  # 2x2 transposed conv
        m = 2 * w if skip else w
        total += (9 * m * w + w) + 2 * w
        c = w
    return total + c * c_out + c_out


def random_pair(rng, h, w):
    return ImagePair(rng.random((h, w, 3)).astype(np.float32),
                     rng.random((h, w, 3)).astype(np.float32), "r")


TINY = UNetConfig((4, 8), input_size=(8, 8))


def test_presets():
    assert preset("A").encoder_widths == (16, 32, 64, 128, 256)
    assert preset("B").encoder_widths == (16, 32, 64)
    assert preset("C").encoder_widths == (16, 32, 64, 128)
    for name in "ABC":
        cfg = preset(name)
        assert cfg.input_channels == 6 and cfg.output_channels == 4
        assert cfg.input_size == (256, 512)


def test_unknown_preset():
    with pytest.raises(KeyError, match="Z"):
        preset("Z")


def test_single_block_param_count():
    conv = Conv2d(6, 16, 3)
    assert sum(v.size for v, _ in conv.parameters()) == 6 * 16 * 9 + 16 == 880


@pytest.mark.parametrize("name", "ABC")
def test_param_count_matches_closed_form(name):
    cfg = preset(name, input_size=(32, 32))
    assert param_count(build(cfg)) == closed_form_count(cfg.encoder_widths)


def test_param_count_ordering():
    counts = {n: param_count(build(preset(n, input_size=(32, 32)))) for n in "ABC"}
    assert counts["B"] < counts["C"] < counts["A"]


def test_no_skip_count():
    cfg = UNetConfig((4, 8), input_size=(8, 8), use_skip=False)
    assert param_count(build(cfg)) == closed_form_count((4, 8), skip=False)


def test_build_deterministic():
    a, b = build(TINY, 3), build(TINY, 3)
    for x, y in zip(a.state_arrays(), b.state_arrays()):
        assert x.tobytes() == y.tobytes()
    c = build(TINY, 4)
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.state_arrays(), c.state_arrays()))


@pytest.mark.parametrize("size", [(8, 10), (6, 8), (0, 8)])
def test_indivisible_size(size):
    with pytest.raises(ValueError, match="divisible by 2\\^2 = 4"):
        UNetConfig((4, 8), input_size=size)


@pytest.mark.parametrize("widths", [(), (8, 4), (4, 4)])
def test_bad_widths(widths):
    with pytest.raises(ValueError):
        UNetConfig(widths, input_size=(16, 16))


@pytest.mark.parametrize("name", "ABC")
def test_full_size_forward_shape(name):
    model = build(preset(name))
    out = forward(model, random_pair(np.random.default_rng(0), 256, 512))
    assert out.shape == (1, 4, 256, 512)
    assert out.min() > 0 and out.max() < 1


@pytest.mark.parametrize("skip", [True, False])
def test_output_resolution_equals_input(rng, skip):
    for widths, size in [((4,), (2, 6)), ((4, 8), (8, 12)), ((2, 3, 5), (16, 8))]:
        model = build(UNetConfig(widths, input_size=size, use_skip=skip))
        x = rng.random((2, 6, *size)).astype(np.float32)
        assert model.forward(x).shape == (2, 4, *size)


def test_forward_deterministic(rng):
    pair = random_pair(rng, 8, 8)
    a = forward(build(TINY, 1), pair)
    b = forward(build(TINY, 1), pair)
    assert a.tobytes() == b.tobytes()


def test_forward_size_mismatch(rng):
    with pytest.raises(ShapeError):
        forward(build(TINY), random_pair(rng, 8, 16))


def test_channel_layout(rng):
    from scenediff.unet import pair_to_input

    pair = random_pair(rng, 4, 4)
    x = pair_to_input(pair)
    np.testing.assert_array_equal(x[0, :3], pair.before.transpose(2, 0, 1))
    np.testing.assert_array_equal(x[0, 3:], pair.after.transpose(2, 0, 1))


def test_end_to_end_gradient(rng):
    model = build(TINY, 0).train()
    x = rng.random((2, 6, 8, 8))
    target = (rng.random((2, 4, 8, 8)) > 0.5).astype(float)
    rep = finite_diff_check(model, x, eps=1e-5, loss=lambda out: mse_loss(out, target))
    assert rep.max_error < 2e-3


def test_predict_extreme_thresholds(rng):
    model = build(TINY)
    pair = random_pair(rng, 8, 8)
    low = predict(model, pair, 0.0)
    assert low.removed.all() and low.added.all() and low.changed.all() and not low.notchanged.any()
    high = predict(model, pair, 1.0)
    assert not (high.removed.any() or high.added.any() or high.changed.any())
    assert high.notchanged.all()
    with pytest.raises(ValueError):
        predict(model, pair, 1.5)


def test_predict_restores_complement(rng):
    maps = predict(build(TINY, 2), random_pair(rng, 8, 8), 0.5)
    assert isinstance(maps, ChangeMaps)
    maps.validate()


# ---------------------------------------------------------------------------
# checkpoints


def trained_tiny(rng):
    model = build(TINY, 5)
    model.train()
    model.forward(rng.random((2, 6, 8, 8)).astype(np.float32))  # moves running stats
    return model


def test_checkpoint_roundtrip(tmp_path, rng):
    model = trained_tiny(rng)
    save_checkpoint(model, tmp_path / "m.sdck")
    loaded = load_checkpoint(tmp_path / "m.sdck")
    assert loaded.config == model.config
    for a, b in zip(model.state_arrays(), loaded.state_arrays()):
        assert a.tobytes() == b.tobytes()
    pair = random_pair(rng, 8, 8)
    assert forward(model, pair).tobytes() == forward(loaded, pair).tobytes()
    save_checkpoint(loaded, tmp_path / "again.sdck")
    assert (tmp_path / "m.sdck").read_bytes() == (tmp_path / "again.sdck").read_bytes()


def test_checkpoint_header(tmp_path, rng):
    save_checkpoint(build(TINY), tmp_path / "m.sdck")
    data = (tmp_path / "m.sdck").read_bytes()
    assert data[:4] == b"SDCK"
    assert int.from_bytes(data[4:8], "little") == 1


def test_checkpoint_bad_magic(tmp_path):
    save_checkpoint(build(TINY), tmp_path / "m.sdck")
    data = bytearray((tmp_path / "m.sdck").read_bytes())
    data[0:4] = b"XXXX"
    (tmp_path / "bad.sdck").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.sdck")


@pytest.mark.parametrize("cut", [2, 10, 30, -1])
def test_checkpoint_truncated(tmp_path, cut):
    save_checkpoint(build(TINY), tmp_path / "m.sdck")
    data = (tmp_path / "m.sdck").read_bytes()
    (tmp_path / "t.sdck").write_bytes(data[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.sdck")


def test_checkpoint_trailing_and_version(tmp_path):
    save_checkpoint(build(TINY), tmp_path / "m.sdck")
    data = (tmp_path / "m.sdck").read_bytes()
    (tmp_path / "x.sdck").write_bytes(data + b"\0\0\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "x.sdck")
    (tmp_path / "v.sdck").write_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.sdck")


def test_checkpoint_preset_expectation(tmp_path):
    save_checkpoint(build(preset("B", input_size=(16, 16))), tmp_path / "b.sdck")
    assert load_checkpoint(tmp_path / "b.sdck", expect_preset="B").config.preset == "B"
    with pytest.raises(CheckpointError, match="preset A"):
        load_checkpoint(tmp_path / "b.sdck", expect_preset="A")
