from __future__ import annotations

import numpy as np
import pytest

from mgrecon import io
from mgrecon.errors import MissingArtifact
from mgrecon.observation import CorrespondenceSet


def test_pfm_round_trip_with_nan(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.uniform(0.1, 3.0, size=(7, 11))
    a[2, 3] = np.nan
    io.write_pfm(tmp_path / "d.pfm", a)
    b = io.read_pfm(tmp_path / "d.pfm")
    assert b.shape == a.shape and b.dtype == np.float64
    assert np.isnan(b[2, 3]) and np.isfinite(b).sum() == a.size - 1
    ok = np.isfinite(a)
    # stored as float32
    assert np.array_equal(b[ok], a[ok].astype(np.float32).astype(np.float64))


def test_pfm_rows_are_stored_bottom_up(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    io.write_pfm(tmp_path / "d.pfm", a, validity_sidecar=False)
    raw = (tmp_path / "d.pfm").read_bytes()
    body = np.frombuffer(raw[-16:], dtype="<f4")
    assert body.tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_big_endian_and_errors(tmp_path):
    p = tmp_path / "be.pfm"
    data = np.array([[5.0, 6.0]], dtype=">f4")
    p.write_bytes(b"Pf\n2 1\n1.0\n" + data.tobytes())
    assert io.read_pfm(p).tolist() == [[5.0, 6.0]]
    with pytest.raises(MissingArtifact):
        io.read_pfm(tmp_path / "missing.pfm")
    (tmp_path / "color.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
    with pytest.raises(ValueError):
        io.read_pfm(tmp_path / "color.pfm")
    (tmp_path / "short.pfm").write_bytes(b"Pf\n4 4\n-1.0\n" + bytes(8))
    with pytest.raises(ValueError):
        io.read_pfm(tmp_path / "short.pfm")
    with pytest.raises(ValueError):
        io.write_pfm(tmp_path / "x.pfm", np.zeros(3))


def test_pgm_and_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    mask = rng.random((5, 9)) < 0.5
    io.write_pgm(tmp_path / "m.pgm", mask)
    assert np.array_equal(io.read_pgm(tmp_path / "m.pgm"), mask)
    rgb = rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
    io.write_ppm(tmp_path / "c.ppm", rgb)
    assert np.array_equal(io.read_ppm(tmp_path / "c.ppm"), rgb)


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 1\n255\n" + bytes([0, 7, 255]))
    assert io.read_pgm(p).tolist() == [[False, True, True]]


def test_matches_round_trip_and_canonical_order(tmp_path):
    s = CorrespondenceSet(0, 2, [[1.5, 2.0], [3, 4]], [[5, 6], [7, 8.25]], [2.0, 3.5])
    io.write_matches(tmp_path / "m.jsonl", [s])
    with open(tmp_path / "m.jsonl", "a") as f:
        f.write('{"i": 2, "j": 1, "xi": [9, 9], "xj": [1, 1], "q": 4.0}\n\n')
    got = io.read_matches(tmp_path / "m.jsonl")
    assert list(got) == [(0, 2), (1, 2)]
    xi, xj, q = got[(0, 2)]
    assert np.array_equal(xi, s.xi) and np.array_equal(xj, s.xj) and np.array_equal(q, s.q)
    # reversed record is swapped into canonical order
    assert got[(1, 2)][0].tolist() == [[1, 1]] and got[(1, 2)][1].tolist() == [[9, 9]]


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(50, 3))
    cols = rng.integers(0, 256, size=(50, 3), dtype=np.uint8)
    io.write_ply(tmp_path / "c.ply", pts, cols)
    p, c = io.read_ply(tmp_path / "c.ply")
    assert np.abs(p - pts).max() < 1e-9
    assert np.array_equal(c, cols)
    io.write_ply(tmp_path / "empty.ply", np.zeros((0, 3)), np.zeros((0, 3)))
    p, c = io.read_ply(tmp_path / "empty.ply")
    assert p.shape == (0, 3)
