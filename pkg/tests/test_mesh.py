import math

import numpy as np
import pytest

from eitmono.errors import FormatError, ParameterError
from eitmono.mesh import (ElectrodeLayout, Mesh, generate_disk_mesh, load_mesh, refine,
                          save_mesh, validate_mesh)


def min_angle_deg(mesh):
    p = mesh.nodes[mesh.triangles]
    out = np.inf
    for i in range(3):
        a = p[:, (i + 1) % 3] - p[:, i]
        b = p[:, (i + 2) % 3] - p[:, i]
        cos = (a * b).sum(1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
        out = min(out, np.degrees(np.arccos(np.clip(cos, -1, 1))).min())
    return out


def test_layout_defaults_and_feasibility():
    lay = ElectrodeLayout(16)
    assert lay.size == pytest.approx(math.pi / 16)
    assert lay.h == pytest.approx(2 * math.pi / 16)
    assert lay.z == (1e-2,) * 16
    with pytest.raises(ParameterError):
        ElectrodeLayout(1)
    with pytest.raises(ParameterError):
        ElectrodeLayout(4, size=2 * math.pi / 4)
    with pytest.raises(ParameterError):
        ElectrodeLayout(4, z=(1.0, 1.0, 0.0, 1.0))


def test_two_wide_electrodes():
    lay = ElectrodeLayout(2, size=math.pi / 2)
    mesh = generate_disk_mesh(lay, 200)
    validate_mesh(mesh, lay.size)
    assert np.allclose(mesh.electrode_lengths(), math.pi / 2, rtol=1e-2)


def test_sixteen_electrodes_cover_half_the_circle(mesh16):
    total = mesh16.electrode_lengths().sum()
    assert total == pytest.approx(math.pi, rel=1e-2)
    # electrode j is centred at 2 pi j / k
    mid = mesh16.electrode_midangles()
    centres = 2 * np.pi * np.arange(16) / 16
    assert np.allclose(np.angle(np.exp(1j * (mid - centres))), 0, atol=2e-3)


def test_area_converges_under_refinement(mesh16):
    a0 = mesh16.signed_areas().sum()
    a1 = refine(mesh16).signed_areas().sum()
    assert abs(a0 - math.pi) < 0.02 * math.pi
    assert abs(a1 - math.pi) < abs(a0 - math.pi)


@pytest.mark.parametrize("k,target", [(8, 1000), (16, 2000), (32, 6000)])
def test_node_count_near_target_and_quality(k, target):
    mesh = generate_disk_mesh(ElectrodeLayout(k), target)
    assert abs(mesh.n_nodes - target) <= 0.25 * target
    assert min_angle_deg(mesh) > 15


def test_electrode_endpoints_are_boundary_nodes(mesh16, layout16):
    on_circle = np.hypot(*mesh16.nodes[mesh16.boundary_edges[:, 0]].T)
    assert np.allclose(on_circle, 1.0, atol=1e-12)
    lab = mesh16.electrode_of_edge
    starts = mesh16.boundary_edges[(lab >= 0) & (np.roll(lab, 1) != lab), 0]
    ang = np.arctan2(*mesh16.nodes[starts][:, ::-1].T) % (2 * math.pi)
    expect = (layout16.centers - layout16.size / 2) % (2 * math.pi)
    diff = np.angle(np.exp(1j * (np.sort(ang)[:, None] - np.sort(expect)[None, :])))
    assert np.abs(diff).min(axis=1).max() < 1e-9


def test_grading_shrinks_edges_at_electrode_ends():
    lay = ElectrodeLayout(8)
    flat = generate_disk_mesh(lay, 3000, grading=0.0).edge_lengths()
    graded = generate_disk_mesh(lay, 3000, grading=0.95).edge_lengths()
    assert flat.min() / flat.max() > 0.99
    assert graded.min() / graded.max() < 0.5
    assert graded.min() < 0.5 * flat.min()


def test_save_load_round_trip(tmp_path, mesh16, layout16):
    save_mesh(mesh16, tmp_path / "m.txt")
    back = load_mesh(tmp_path / "m.txt", layout16.size)
    assert back.digest() == mesh16.digest()
    assert np.array_equal(back.nodes, mesh16.nodes)


def test_load_reports_line_numbers(tmp_path, mesh16):
    save_mesh(mesh16, tmp_path / "m.txt")
    rows = (tmp_path / "m.txt").read_text().splitlines()
    bad = list(rows)
    bad[3] = "0.1 zz"
    (tmp_path / "b.txt").write_text("\n".join(bad) + "\n")
    with pytest.raises(FormatError, match="line 4"):
        load_mesh(tmp_path / "b.txt")
    # clockwise triangle
    bad = list(rows)
    i = 1 + mesh16.n_nodes
    a, b, c = bad[i].split()
    bad[i] = f"{a} {c} {b}"
    (tmp_path / "c.txt").write_text("\n".join(bad) + "\n")
    with pytest.raises(FormatError, match=f"line {i + 1}"):
        load_mesh(tmp_path / "c.txt")
    (tmp_path / "d.txt").write_text("points 3\n")
    with pytest.raises(FormatError, match="line 1"):
        load_mesh(tmp_path / "d.txt")


def test_validation_catches_touching_electrodes(mesh16):
    lab = mesh16.electrode_of_edge.copy()
    gaps = np.flatnonzero(lab == -1)
    # fill one gap between electrodes with the next electrode's label
    run = gaps[(gaps > 0) & (lab[gaps - 1] == 0)]
    end = run[0]
    while lab[end] == -1:
        end += 1
    lab[run[0]:end] = lab[end]
    broken = Mesh(mesh16.nodes, mesh16.triangles, mesh16.boundary_edges, lab, mesh16.k)
    with pytest.raises(FormatError):
        validate_mesh(broken)


def test_refinement_is_nested(mesh16):
    fine = refine(mesh16)
    assert fine.n_triangles == 4 * mesh16.n_triangles
    assert np.array_equal(fine.nodes[:mesh16.n_nodes], mesh16.nodes)
    validate_mesh(fine)
    # every fine centroid lies in its parent triangle
    parent = np.tile(np.arange(mesh16.n_triangles), 4)
    p = mesh16.nodes[mesh16.triangles[parent]]
    c = fine.centroids()
    for i in range(3):
        a, b = p[:, i], p[:, (i + 1) % 3]
        cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        assert (cross > 0).all()
    assert np.allclose(fine.electrode_lengths(), mesh16.electrode_lengths(), rtol=1e-3)


def test_generator_rejects_small_targets():
    with pytest.raises(ParameterError):
        generate_disk_mesh(ElectrodeLayout(16), 100)
