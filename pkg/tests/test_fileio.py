import numpy as np
import pytest

from mmgw.fileio import (
    ParseError,
    read_image,
    read_matrix_csv,
    read_mmspace_dir,
    read_pgm,
    write_gray_png,
    write_mmspace_dir,
    write_pgm,
    write_rgb_png,
)
from mmgw.mmspace import LabelledMmSpace, LabelSpace, MmSpace


def sample_space(seed=0, n=4):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2))
    d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
    return MmSpace(d, rng.uniform(0.1, 1.0, size=n))


def test_mmspace_dir_round_trip(tmp_path):
    sp = sample_space()
    write_mmspace_dir(tmp_path / "sp", sp)
    back = read_mmspace_dir(tmp_path / "sp")
    np.testing.assert_array_equal(back.dist, sp.dist)
    np.testing.assert_array_equal(back.weights, sp.weights)


def test_labelled_round_trip(tmp_path):
    base = sample_space(1)
    lab = LabelSpace(np.array([[0.0, 0.5], [0.5, 0.0]]))
    sp = LabelledMmSpace(base, [0, 1, 1, 0], lab)
    write_mmspace_dir(tmp_path / "sp", sp)
    back = read_mmspace_dir(tmp_path / "sp")
    assert isinstance(back, LabelledMmSpace)
    np.testing.assert_array_equal(back.label_of, sp.label_of)
    np.testing.assert_array_equal(back.label_space.dist, lab.dist)


def test_parse_error_reports_file(tmp_path):
    bad = tmp_path / "dist.csv"
    bad.write_text("0,1\n1,zzz\n")
    with pytest.raises(ParseError, match="dist.csv"):
        read_matrix_csv(bad)


def test_pgm_round_trip_binary_and_plain(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(5, 7))
    img[0, 0] = 1.0  # pin the max so quantization is invertible at 1/255
    for binary in (True, False):
        path = tmp_path / f"img_{binary}.pgm"
        write_pgm(path, img, binary=binary)
        back = read_pgm(path)
        assert back.shape == img.shape
        np.testing.assert_allclose(back, img, atol=1.0 / 255.0 + 1e-9)


def test_pgm_comments_and_errors(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P2\n# a comment\n2 1\n# more\n255\n0 255\n")
    np.testing.assert_allclose(read_pgm(p), [[0.0, 1.0]])
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P7\n1 1\n255\n0")
    with pytest.raises(ParseError, match="P2/P5"):
        read_pgm(bad)
    trunc = tmp_path / "trunc.pgm"
    trunc.write_bytes(b"P5\n4 4\n255\nab")
    with pytest.raises(ParseError, match="truncated"):
        read_pgm(trunc)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(4, 6))
    img[0, 0] = 1.0
    path = tmp_path / "img.png"
    write_gray_png(path, img)
    back = read_image(path)
    np.testing.assert_allclose(back, img, atol=1.0 / 255.0 + 1e-9)
    write_rgb_png(tmp_path / "rgb.png", rng.uniform(size=(4, 6, 3)))
    assert (tmp_path / "rgb.png").exists()
