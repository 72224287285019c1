import logging

import numpy as np
import pytest

from eitmono.errors import ParameterError
from eitmono.forward import (ConductivityField, assemble, cached_derivative_tensor,
                             element_owner, raw_voltage_matrix, solve, voltage_matrix)
from eitmono.geometry import PixelSet, inside_set
from eitmono.mesh import ElectrodeLayout

from conftest import random_blocks


def test_system_dimension(small_setup):
    s = small_setup
    assert s["system"].dim == s["mesh"].n_nodes + 16 - 1


def test_current_must_sum_to_zero(small_setup):
    with pytest.raises(ParameterError):
        solve(small_setup["system"], np.eye(16)[0])
    with pytest.raises(ParameterError):
        solve(small_setup["system"], np.zeros(15))


def test_opposite_drive_extremes(small_setup):
    I = np.zeros(16)
    I[0], I[8] = 1.0, -1.0
    sol = solve(small_setup["system"], I)
    assert np.argmax(sol.V) == 0 and np.argmin(sol.V) == 8
    assert abs(sol.V.sum()) < 1e-12
    # potential antisymmetric under the reflection swapping the two electrodes
    assert sol.V[4] == pytest.approx(0.0, abs=1e-3 * sol.V[0])


def test_energy_identity(small_setup):
    # I . V equals the dissipated power including the contact terms
    s = small_setup
    I = s["patterns"].matrix[:, 4]
    sol = solve(s["system"], I)
    assert I @ sol.V > 0
    R, _ = raw_voltage_matrix(s["system"], s["patterns"])
    assert R[4, 4] == pytest.approx(I @ sol.V, rel=1e-10)


def test_voltage_matrix_is_symmetric_positive_definite(small_setup):
    s = small_setup
    rng = np.random.default_rng(3)
    sigma = ConductivityField(random_blocks(rng, s["mesh"]))
    R, _ = raw_voltage_matrix(assemble(s["mesh"], sigma, s["layout"]), s["patterns"])
    assert np.abs(R - R.T).max() <= 1e-9 * np.abs(R).max()
    assert np.linalg.eigvalsh(0.5 * (R + R.T)).min() > 0


def test_conductivity_validation(small_setup):
    mesh = small_setup["mesh"]
    with pytest.raises(ParameterError):
        ConductivityField(np.zeros(mesh.n_triangles))
    with pytest.raises(ParameterError):
        assemble(mesh, ConductivityField(np.ones(3)), small_setup["layout"])
    with pytest.raises(ParameterError):
        assemble(mesh, ConductivityField.constant(mesh, 1.0), ElectrodeLayout(8))


def test_derivative_matrices_are_negative_semidefinite(small_setup):
    mats = small_setup["tensor"].matrices
    lam_max = np.linalg.eigvalsh(mats).max(axis=1)
    scale = np.abs(mats).max()
    assert (lam_max <= 1e-12 * scale).all()
    assert np.allclose(mats, np.swapaxes(mats, 1, 2))


def test_derivative_sum_matches_finite_difference(small_setup):
    # derivative in direction dgamma = 1 on all inside pixels
    s = small_setup
    t = 1e-4
    S = s["tensor"].sum_over(inside_set(s["grid"]))
    base = voltage_matrix(s["mesh"], s["sigma0"], s["layout"], s["patterns"], s["system"]).entries
    up = voltage_matrix(s["mesh"], s["sigma0"].scaled(1 + t), s["layout"], s["patterns"]).entries
    fd = (up - base) / t
    assert np.linalg.norm(fd - S, 2) <= 1e-3 * np.linalg.norm(S, 2)


def test_every_triangle_has_an_owner(small_setup):
    owner = element_owner(small_setup["mesh"], small_setup["grid"])
    assert owner.min() >= 0 and owner.max() < small_setup["grid"].n_inside
    rows = small_setup["tensor"].rows(PixelSet(small_setup["grid"].inside_indices[:3]))
    assert rows.tolist() == [0, 1, 2]


def test_tensor_cache_hits_and_invalidates(tmp_path, small_setup, caplog):
    s = small_setup
    args = (s["mesh"], s["sigma0"], s["layout"], s["patterns"], s["grid"])
    first = cached_derivative_tensor(tmp_path, *args)
    with caplog.at_level(logging.INFO, logger="eitmono.forward"):
        second = cached_derivative_tensor(tmp_path, *args)
    assert "cache hit" in caplog.text
    assert np.array_equal(first.matrices, second.matrices)
    assert np.array_equal(first.matrices, s["tensor"].matrices)
    other = ElectrodeLayout(16, z=0.02)
    cached_derivative_tensor(tmp_path, s["mesh"], s["sigma0"], other, s["patterns"], s["grid"])
    assert len(list(tmp_path.glob("tensor-*.npz"))) == 2
