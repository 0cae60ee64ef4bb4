"""File interchange: mm-spaces as CSV directories, images as PGM/PNG.

An mm-space directory holds ``dist.csv`` (n x n, comma separated) and
``weights.csv`` (one value per line); labelled spaces add ``labels.csv``
(integer indices) and ``label_dist.csv`` (m x m).  UTF-8, ``.`` decimals.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image

from .mmspace import LabelSpace, LabelledMmSpace, MmSpace

__all__ = [
    "ParseError",
    "read_matrix_csv",
    "write_matrix_csv",
    "read_mmspace_dir",
    "write_mmspace_dir",
    "read_image",
    "read_pgm",
    "write_pgm",
    "write_gray_png",
    "write_rgb_png",
]


class ParseError(ValueError):
    """Malformed numeric input file."""


def read_matrix_csv(path, ndmin: int = 1) -> np.ndarray:
    path = Path(path)
    try:
        return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=ndmin)
    except ValueError as exc:
        # numpy reports the offending line; keep it and add the file name
        raise ParseError(f"{path}: {exc}") from exc


def write_matrix_csv(path, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    np.savetxt(path, arr, delimiter=",", fmt="%.17g")


def read_mmspace_dir(path) -> Union[MmSpace, LabelledMmSpace]:
    """Load a space from a directory; labelled when label files are present."""
    path = Path(path)
    dist = read_matrix_csv(path / "dist.csv", ndmin=2)
    weights = read_matrix_csv(path / "weights.csv")
    space = MmSpace(dist, weights, name=path.name)
    labels_file = path / "labels.csv"
    ldist_file = path / "label_dist.csv"
    if labels_file.exists():
        if not ldist_file.exists():
            raise ParseError(f"{path}: labels.csv present but label_dist.csv missing")
        labels = read_matrix_csv(labels_file).astype(np.intp)
        ldist = read_matrix_csv(ldist_file, ndmin=2)
        return LabelledMmSpace(space, labels, LabelSpace(ldist))
    return space


def write_mmspace_dir(path, space) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    base = space.base if isinstance(space, LabelledMmSpace) else space
    write_matrix_csv(path / "dist.csv", base.dist)
    np.savetxt(path / "weights.csv", base.weights, fmt="%.17g")
    if isinstance(space, LabelledMmSpace):
        np.savetxt(path / "labels.csv", space.label_of, fmt="%d")
        write_matrix_csv(path / "label_dist.csv", space.label_space.dist)


def read_pgm(path) -> np.ndarray:
    """8-bit grayscale PGM (plain P2 or binary P5) as a float array in [0, 1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4 and pos < len(data):
        # headers allow '#' comments between whitespace-separated tokens
        if data[pos : pos + 1].isspace():
            pos += 1
            continue
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if len(tokens) < 4:
        raise ParseError(f"{path}: truncated PGM header")
    magic = tokens[0]
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ParseError(f"{path}: bad PGM header") from exc
    if maxval <= 0 or maxval > 255:
        raise ParseError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    if magic == b"P2":
        vals = data[pos:].split()
        if len(vals) < w * h:
            raise ParseError(f"{path}: expected {w * h} pixels, got {len(vals)}")
        arr = np.array([int(v) for v in vals[: w * h]], dtype=np.float64)
    elif magic == b"P5":
        raster = data[pos + 1 : pos + 1 + w * h]
        if len(raster) < w * h:
            raise ParseError(f"{path}: truncated P5 raster")
        arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64)
    else:
        raise ParseError(f"{path}: not a P2/P5 PGM file")
    return (arr / maxval).reshape(h, w)


def write_pgm(path, values, binary: bool = True) -> None:
    """Write nonnegative values as 8-bit PGM, max-normalized to gray 255."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM output needs a 2-d array")
    top = arr.max()
    scaled = np.zeros_like(arr) if top <= 0 else arr / top * 255.0
    pix = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(pix.tobytes())
        else:
            fh.write(f"P2\n{w} {h}\n255\n".encode("ascii"))
            for row in pix:
                fh.write((" ".join(str(v) for v in row) + "\n").encode("ascii"))


def read_image(path) -> np.ndarray:
    """Grayscale image (PGM or PNG) as floats in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_gray_png(path, values) -> None:
    arr = np.asarray(values, dtype=np.float64)
    top = arr.max()
    scaled = np.zeros_like(arr) if top <= 0 else arr / top * 255.0
    Image.fromarray(np.clip(np.rint(scaled), 0, 255).astype(np.uint8), "L").save(path)


def write_rgb_png(path, rgb) -> None:
    """(h, w, 3) floats in [0, 1] to PNG."""
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), "RGB").save(path)
