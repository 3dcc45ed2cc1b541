"""Readers and writers for the on-disk raster, match and point-cloud formats."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import MissingArtifact


def _require(path: Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"file not found: {path}")
    return path


# -- PFM --------------------------------------------------------------------


def write_pfm(path, values, validity_sidecar: bool = True) -> None:
    """Write a grayscale little-endian PFM.

    NaN pixels are stored as 0; when ``validity_sidecar`` is set a binary PGM
    next to the file (``<name>.valid.pgm``) records which pixels are valid.
    """
    path = Path(path)
    data = np.asarray(values, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"PFM raster must be 2-D, got shape {data.shape}")
    valid = np.isfinite(data)
    out = np.where(valid, data, 0.0).astype("<f4")
    h, w = out.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(out).tobytes())
    if validity_sidecar:
        write_pgm(validity_path(path), valid)


def validity_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".valid.pgm")


def _read_header_tokens(f, n):
    tokens = []
    while len(tokens) < n:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float64 array (invalid pixels as NaN)."""
    path = _require(path)
    with open(path, "rb") as f:
        magic, w, h, scale = _read_header_tokens(f, 4)
        if magic != b"Pf":
            raise ValueError(f"{path}: only grayscale PFM ('Pf') is supported, got {magic!r}")
        w, h, scale = int(w), int(h), float(scale)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} samples, found {data.size}")
    out = np.flipud(data.reshape(h, w)).astype(np.float64)
    side = validity_path(path)
    if side.exists():
        out[~read_pgm(side)] = np.nan
    return out


# -- PGM / PPM --------------------------------------------------------------


def write_pgm(path, mask) -> None:
    mask = np.asarray(mask)
    img = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM mask; nonzero pixels are foreground."""
    path = _require(path)
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_header_tokens(f, 4)
        if magic != b"P5":
            raise ValueError(f"{path}: expected binary PGM")
        w, h = int(w), int(h)
        nbytes = 2 if int(maxval) > 255 else 1
        data = np.frombuffer(f.read(w * h * nbytes), dtype=">u2" if nbytes == 2 else np.uint8)
    return data.reshape(h, w) > 0


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    path = _require(path)
    with open(path, "rb") as f:
        magic, w, h, _ = _read_header_tokens(f, 4)
        if magic != b"P6":
            raise ValueError(f"{path}: expected binary PPM")
        w, h = int(w), int(h)
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).copy()


# -- matches (JSON lines) ---------------------------------------------------


def write_matches(path, sets) -> None:
    """Write correspondence sets as JSON lines ``{"i","j","xi","xj","q"}``."""
    with open(path, "w") as f:
        for s in sets:
            for xi, xj, q in zip(s.xi.tolist(), s.xj.tolist(), s.q.tolist()):
                f.write(json.dumps({"i": s.i, "j": s.j, "xi": xi, "xj": xj, "q": q}) + "\n")


def read_matches(path) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Group a matches file by canonical pair; returns ``{(i, j): (xi, xj, q)}``."""
    path = _require(path)
    grouped: dict[tuple[int, int], list] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            i, j, xi, xj = int(rec["i"]), int(rec["j"]), rec["xi"], rec["xj"]
            if i > j:
                i, j, xi, xj = j, i, xj, xi
            grouped.setdefault((i, j), []).append((xi, xj, float(rec["q"])))
    out = {}
    for key in sorted(grouped):
        rows = grouped[key]
        out[key] = (
            np.array([r[0] for r in rows], dtype=np.float64).reshape(-1, 2),
            np.array([r[1] for r in rows], dtype=np.float64).reshape(-1, 2),
            np.array([r[2] for r in rows], dtype=np.float64),
        )
    return out


# -- PLY --------------------------------------------------------------------


def write_ply(path, points, colors) -> None:
    """ASCII PLY with ``x y z red green blue`` vertex properties."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    lines = [
        f"{x:.9f} {y:.9f} {z:.9f} {r} {g} {b}\n"
        for (x, y, z), (r, g, b) in zip(points.tolist(), colors.tolist())
    ]
    with open(path, "w") as f:
        f.write(header)
        f.writelines(lines)


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ASCII PLY written by :func:`write_ply` (or compatible)."""
    path = _require(path)
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        props, n = [], 0
        for line in f:
            line = line.strip()
            if line.startswith("format") and "ascii" not in line:
                raise ValueError(f"{path}: only ASCII PLY is supported")
            m = re.match(r"element vertex (\d+)", line)
            if m:
                n = int(m.group(1))
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        rows = [f.readline().split() for _ in range(n)]
    table = np.array(rows, dtype=np.float64).reshape(n, len(props))
    col = {name: k for k, name in enumerate(props)}
    points = table[:, [col["x"], col["y"], col["z"]]]
    if all(c in col for c in ("red", "green", "blue")):
        colors = table[:, [col["red"], col["green"], col["blue"]]].astype(np.uint8)
    else:
        colors = np.zeros((n, 3), dtype=np.uint8)
    return points, colors
