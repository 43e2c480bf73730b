import numpy as np
import pytest

from octfield.images import read_ppm, to_uint8, write_pgm16, write_ppm


def test_ppm_round_trip_is_quantized(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(to_uint8(back), to_uint8(img))


def test_ppm_header(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((2, 3, 3)))
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n3 2\n255\n")


def test_values_clipped(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.full((1, 1, 3), 2.0))
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), 1.0)


def test_pgm16_scale(tmp_path):
    depth = np.array([[0.0, 2.0], [4.0, 8.0]])
    write_pgm16(tmp_path / "d.pgm", depth, scale=8.0)
    np.testing.assert_allclose(read_ppm(tmp_path / "d.pgm"), depth / 8.0, atol=1 / 65535)


def test_comment_in_header(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 10]))
    np.testing.assert_allclose(read_ppm(tmp_path / "c.ppm")[0, 0], [1.0, 0.0, 10 / 255])


def test_truncated(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((4, 4, 3)))
    raw = (tmp_path / "a.ppm").read_bytes()
    (tmp_path / "a.ppm").write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        read_ppm(tmp_path / "a.ppm")


def test_wrong_magic(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError, match="unsupported"):
        read_ppm(tmp_path / "x.ppm")


def test_rejects_gray_as_ppm(tmp_path):
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "g.ppm", np.zeros((2, 2)))
