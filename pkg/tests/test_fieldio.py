import numpy as np
import pytest

from milltopo.fieldio import (
    read_field,
    read_init_field,
    read_pgm,
    read_vtk,
    write_convergence_csv,
    write_field,
    write_pgm,
    write_vtk,
)
from milltopo.optimizer import IterationRecord


def test_vtk_round_trip(tmp_path):
    rng = np.random.default_rng(53)
    field = rng.uniform(0, 1, 4 * 3 * 2)
    path = tmp_path / "density.vtk"
    write_vtk(path, field, (4, 3, 2))
    back, extents = read_vtk(path)
    assert extents == (4, 3, 2)
    np.testing.assert_allclose(back, field, rtol=1e-8)  # 9 significant digits
    # rewriting the parsed values reproduces the file byte for byte
    write_vtk(tmp_path / "again.vtk", back, extents)
    assert (tmp_path / "again.vtk").read_bytes() == path.read_bytes()


def test_vtk_header_layout(tmp_path):
    path = tmp_path / "x.vtk"
    write_vtk(path, np.zeros(8), (2, 2, 2))
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII"
    assert lines[3] == "DATASET STRUCTURED_POINTS"
    assert lines[4] == "DIMENSIONS 3 3 3"
    assert lines[5] == "ORIGIN 0 0 0"
    assert lines[6] == "SPACING 1 1 1"
    assert lines[7] == "CELL_DATA 8"
    assert lines[8] == "SCALARS density double 1"
    assert lines[9] == "LOOKUP_TABLE default"
    assert lines[10:] == ["0"] * 8


def test_vtk_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.vtk"
    bad.write_text("hello\n")
    with pytest.raises(ValueError):
        read_vtk(bad)
    truncated = tmp_path / "short.vtk"
    write_vtk(truncated, np.zeros(8), (2, 2, 2))
    text = truncated.read_text().splitlines()
    truncated.write_text("\n".join(text[:-2]) + "\n")
    with pytest.raises(ValueError, match="cells"):
        read_vtk(truncated)


def test_pgm_round_trip_and_orientation(tmp_path):
    field = np.zeros(6)
    field[1] = 1.0  # grid position x=1, y=0
    path = tmp_path / "density.pgm"
    write_pgm(path, field, (3, 2))
    lines = path.read_text().splitlines()
    assert lines[:3] == ["P2", "3 2", "255"]
    assert lines[3] == "255 255 255"  # top image row is the y=1 grid row
    assert lines[4] == "255 0 255"  # solid pixel renders black
    back, extents = read_pgm(path)
    assert extents == (3, 2)
    np.testing.assert_array_equal(back, field)
    write_pgm(tmp_path / "again.pgm", back, extents)
    assert (tmp_path / "again.pgm").read_bytes() == path.read_bytes()


def test_pgm_quantization_error_bounded(tmp_path):
    rng = np.random.default_rng(59)
    field = rng.uniform(0, 1, 5 * 4)
    path = tmp_path / "q.pgm"
    write_pgm(path, field, (5, 4))
    back, _ = read_pgm(path)
    assert np.abs(back - field).max() <= 0.5 / 255 + 1e-12


def test_pgm_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_text("P5\n1 1\n255\n0\n")
    with pytest.raises(ValueError):
        read_pgm(bad)


def test_read_field_dispatch(tmp_path):
    write_vtk(tmp_path / "a.vtk", np.zeros(8), (2, 2, 2))
    write_pgm(tmp_path / "a.pgm", np.zeros(4), (2, 2))
    assert read_field(tmp_path / "a.vtk")[1] == (2, 2, 2)
    assert read_field(tmp_path / "a.pgm")[1] == (2, 2)
    with pytest.raises(ValueError, match="format"):
        read_field(tmp_path / "a.csv")


def test_write_field_picks_format(tmp_path):
    write_field(tmp_path / "v.vtk", np.zeros(8), (2, 2, 2))
    write_field(tmp_path / "p.pgm", np.zeros(4), (2, 2))
    assert read_vtk(tmp_path / "v.vtk")[1] == (2, 2, 2)
    assert read_pgm(tmp_path / "p.pgm")[1] == (2, 2)


def test_field_shape_validation(tmp_path):
    with pytest.raises(ValueError, match="shape"):
        write_vtk(tmp_path / "x.vtk", np.zeros(7), (2, 2, 2))
    with pytest.raises(ValueError, match="extents"):
        write_pgm(tmp_path / "x.pgm", np.zeros(8), (2, 2, 2))


def test_convergence_csv_layout(tmp_path):
    history = [
        IterationRecord(1, 50.0, 0.25, 0.2, wall_time=1.0),
        IterationRecord(2, 48.125, 0.2000125, 0.0125, wall_time=2.0),
    ]
    path = tmp_path / "convergence.csv"
    write_convergence_csv(path, history)
    assert path.read_text() == (
        "iter,compliance,volume,change\n1,50.0,0.25,0.2\n2,48.125,0.2000125,0.0125\n"
    )


def test_init_field_round_trip(tmp_path):
    rng = np.random.default_rng(61)
    field = rng.uniform(0, 1, 12)
    path = tmp_path / "seed.npy"
    np.save(path, field)
    np.testing.assert_array_equal(read_init_field(path, 12), field)
    with pytest.raises(ValueError, match="12"):
        read_init_field(path, 13)
    np.save(tmp_path / "bad.npy", field + 5)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        read_init_field(tmp_path / "bad.npy", 12)
    with pytest.raises(ValueError, match="npy"):
        read_init_field(tmp_path / "seed.txt", 12)
