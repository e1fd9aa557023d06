import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ordinal_depth import dataio
from ordinal_depth.dataio import DepthMap, Image, ManifestRecord
from ordinal_depth.errors import (
    CorruptHeader, DegenerateRange, DimensionMismatch, MissingFile, NonPositiveScale,
    UnsupportedFormat,
)


def test_white_pgm_loads_as_ones(tmp_path):
    p = tmp_path / "w.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([255] * 4))
    img = dataio.load_image(p)
    assert img.data.shape == (2, 2, 1)
    assert np.all(img.data == 1.0)


def test_black_ppm_loads_as_zeros(tmp_path):
    p = tmp_path / "b.ppm"
    p.write_bytes(b"P6 1 1 255\n" + bytes(3))
    img = dataio.load_image(p)
    assert img.data.shape == (1, 1, 3) and np.all(img.data == 0)


def test_ppm_byte_decode(tmp_path):
    # width 3, height 2; first pixel pure red
    pixels = bytes([255, 0, 0]) + bytes(15)
    p = tmp_path / "r.ppm"
    p.write_bytes(b"P6\n# comment\n3 2\n255\n" + pixels)
    img = dataio.load_image(p)
    assert img.data.shape == (2, 3, 3)
    np.testing.assert_array_equal(img.data.ravel()[:3], [1, 0, 0])


def test_png_roundtrip(tmp_path):
    from PIL import Image as PILImage

    arr = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    PILImage.fromarray(arr).save(tmp_path / "x.png")
    img = dataio.load_image(tmp_path / "x.png")
    np.testing.assert_allclose(img.data, arr / 255.0)


def test_image_errors(tmp_path):
    with pytest.raises(MissingFile):
        dataio.load_image(tmp_path / "nope.ppm")
    (tmp_path / "x.txt").write_bytes(b"hello")
    with pytest.raises(UnsupportedFormat):
        dataio.load_image(tmp_path / "x.txt")
    (tmp_path / "bad.pgm").write_bytes(b"P5\n2 x\n255\n")
    with pytest.raises(CorruptHeader):
        dataio.load_image(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(CorruptHeader):
        dataio.load_image(tmp_path / "short.pgm")


def test_depth_pgm_scaling(tmp_path):
    p = tmp_path / "d.pgm"
    dataio.write_pnm(p, np.array([[1000, 0]]), 65535)
    d = dataio.load_depth(p, scale=0.001)
    assert d.data[0, 0] == pytest.approx(1.0)
    assert d.valid.tolist() == [[True, False]]


def test_depth_two_pixel_decode(tmp_path):
    p = tmp_path / "d.pgm"
    # 16-bit samples are big-endian
    p.write_bytes(b"P5\n2 1\n65535\n" + (2000).to_bytes(2, "big") + (4000).to_bytes(2, "big"))
    d = dataio.load_depth(p, scale=0.001)
    np.testing.assert_allclose(d.data, [[2.0, 4.0]])


def test_depth_pfm_roundtrip(tmp_path):
    data = np.array([[1.5, 2.5, 0.0], [3.0, 4.25, 5.0]])
    dataio.write_depth_pfm(DepthMap(data), tmp_path / "d.pfm")
    d = dataio.load_depth(tmp_path / "d.pfm")
    np.testing.assert_array_equal(d.data, data)
    assert not d.valid[0, 2]


def test_depth_errors(tmp_path):
    p = tmp_path / "d.pgm"
    dataio.write_pnm(p, np.ones((2, 2)), 65535)
    with pytest.raises(NonPositiveScale):
        dataio.load_depth(p, scale=0)
    with pytest.raises(DimensionMismatch):
        dataio.load_depth(p, like=Image(np.zeros((3, 2, 3))))
    with pytest.raises(MissingFile):
        dataio.load_depth(tmp_path / "none.pgm")


def test_write_depth_pgm_endpoints(tmp_path):
    d = DepthMap(np.array([[1.0, 3.0, 2.0]]))
    dataio.write_depth_pgm(d, tmp_path / "q.pgm", 1.0, 3.0)
    raw, maxval = dataio.read_pnm(tmp_path / "q.pgm")
    assert maxval == 65535
    assert raw[0, 0, 0] == 0 and raw[0, 1, 0] == 65535
    assert abs(raw[0, 2, 0] - 32768) <= 1
    with pytest.raises(DegenerateRange):
        dataio.write_depth_pgm(d, tmp_path / "q.pgm", 2.0, 2.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=12))
def test_depth_pgm_roundtrip_within_one_step(tmp_path_factory, values):
    hi = 10.0
    d = DepthMap(np.array([values]))
    path = tmp_path_factory.mktemp("rt") / "d.pgm"
    dataio.write_depth_pgm(d, path, 0.0, hi)
    back = dataio.load_depth(path, scale=hi / 65535)
    step = hi / 65535
    ok = back.valid[0]
    np.testing.assert_allclose(back.data[0][ok], np.array(values)[ok], atol=step)


def test_manifest_roundtrip_and_missing(tmp_path):
    (tmp_path / "a.ppm").write_bytes(b"P6 1 1 255\n" + bytes(3))
    recs = [ManifestRecord("a.ppm", None, None, "test")]
    dataio.write_manifest(tmp_path / "m.jsonl", recs)
    assert dataio.read_manifest(tmp_path / "m.jsonl") == recs
    dataio.write_manifest(tmp_path / "bad.jsonl", [ManifestRecord("b.ppm")])
    with pytest.raises(MissingFile):
        dataio.read_manifest(tmp_path / "bad.jsonl")
    with pytest.raises(ValueError):
        ManifestRecord("a.ppm", split="val")


def test_synth_deterministic():
    a_img, a_d = dataio.synth_scene(7, 48, 40, 3)
    b_img, b_d = dataio.synth_scene(7, 48, 40, 3)
    assert a_img.data.tobytes() == b_img.data.tobytes()
    assert a_d.data.tobytes() == b_d.data.tobytes()
    assert a_img.data.shape == (40, 48, 3)


def test_synth_ramp_without_objects():
    _, d = dataio.synth_scene(3, 40, 50, 0)
    # rows are level sets of the ramp, depth falls toward the bottom row
    assert np.all(d.data == d.data[:, :1])
    assert np.all(np.diff(d.data[:, 0]) < 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_synth_objects_in_front_of_background(seed):
    img, d = dataio.synth_scene(seed, 40, 40, 4)
    rows = np.arange(40)
    ramp = 4.0 + (1.0 - 4.0) * rows / 39
    covered = d.data != ramp[:, None]
    assert np.all(d.data[covered] < np.broadcast_to(ramp[:, None], d.data.shape)[covered])
    assert np.all(d.valid)
    assert np.all((img.data >= 0) & (img.data <= 1))


def test_synth_clamps_small_sizes():
    img, d = dataio.synth_scene(0, 5, 5, -3)
    assert img.data.shape == (32, 32, 3)
