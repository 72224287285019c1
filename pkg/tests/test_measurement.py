import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eitmono.errors import FormatError, ParameterError
from eitmono.forward import VoltageMatrix, voltage_matrix
from eitmono.measurement import (NoiseSpec, add_noise, current_patterns, noise_matrix,
                                 read_measurement, standard_normals, write_measurement)


def test_first_patterns_by_hand():
    Q = current_patterns(4).matrix
    assert np.allclose(Q[:, 0], [1 / math.sqrt(2), -1 / math.sqrt(2), 0, 0])
    assert np.allclose(Q[:, 1], [1 / math.sqrt(6), 1 / math.sqrt(6), -2 / math.sqrt(6), 0])
    assert np.allclose(Q[:, 2], [1 / math.sqrt(12)] * 3 + [-3 / math.sqrt(12)])


@given(st.integers(2, 80))
def test_patterns_orthonormal_and_zero_sum(k):
    Q = current_patterns(k).matrix
    assert Q.shape == (k, k - 1)
    assert np.abs(Q.T @ Q - np.eye(k - 1)).max() < 1e-13
    assert np.abs(Q.sum(axis=0)).max() < 1e-13


def test_pattern_basis_rejects_single_electrode():
    with pytest.raises(ParameterError):
        current_patterns(1)


def test_frozen_normal_stream():
    assert standard_normals(0, 5).tolist() == [
        -0.11777673202953289, 0.9424543399096111, 2.5141597827479694,
        0.26202851726190257, 0.5487430572747508]
    assert standard_normals(12345, 3).tolist() == [
        -0.7009952098424479, 1.5720234977450225, -0.30078410965936464]
    # prefixes agree, odd lengths included
    assert np.array_equal(standard_normals(7, 9)[:5], standard_normals(7, 5))


def test_normal_stream_moments():
    z = standard_normals(99, 200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01


@pytest.fixture(scope="module")
def clean(small_setup):
    s = small_setup
    return voltage_matrix(s["mesh"], s["sigma0"], s["layout"], s["patterns"], s["system"])


def test_zero_noise_is_exact_copy(clean):
    out = add_noise(clean, clean.voltages, NoiseSpec(0.0, 5))
    assert np.array_equal(out.entries, clean.entries)
    assert out.metadata["delta"] == 0.0


@settings(max_examples=15, deadline=None)
@given(st.floats(1e-4, 0.1), st.integers(0, 2 ** 32))
def test_noise_has_prescribed_spectral_norm(clean, level, seed):
    out = add_noise(clean, clean.voltages, NoiseSpec(level, seed))
    delta = level * np.linalg.norm(clean.entries, 2)
    diff = out.entries - clean.entries
    assert np.linalg.norm(diff, 2) == pytest.approx(delta, rel=1e-10)
    assert np.abs(diff - diff.T).max() == 0
    assert out.metadata["delta"] == pytest.approx(delta)


def test_noise_is_reproducible(clean):
    a = add_noise(clean, clean.voltages, NoiseSpec(0.01, 42))
    b = add_noise(clean, clean.voltages, NoiseSpec(0.01, 42))
    c = add_noise(clean, clean.voltages, NoiseSpec(0.01, 43))
    assert np.array_equal(a.entries, b.entries)
    assert not np.array_equal(a.entries, c.entries)


def test_noise_matrix_shape_check(clean):
    with pytest.raises(ParameterError):
        noise_matrix(current_patterns(16), np.zeros((16, 16)), 0)


def test_noise_spec_validation():
    with pytest.raises(ParameterError):
        NoiseSpec(-0.1)
    with pytest.raises(ParameterError):
        NoiseSpec(0.1, -1)


def test_measurement_round_trip_is_bit_exact(tmp_path, clean):
    noisy = add_noise(clean, clean.voltages, NoiseSpec(0.005, 1))
    write_measurement(tmp_path / "r.txt", noisy)
    back = read_measurement(tmp_path / "r.txt")
    assert np.array_equal(back.entries, noisy.entries)
    assert back.metadata == noisy.metadata


def test_measurement_format_errors(tmp_path):
    vm = VoltageMatrix(np.eye(2), {"k": 3})
    write_measurement(tmp_path / "r.txt", vm)
    rows = (tmp_path / "r.txt").read_text().splitlines()
    (tmp_path / "a.txt").write_text("\n".join(["junk"] + rows[1:]) + "\n")
    with pytest.raises(FormatError, match="line 1"):
        read_measurement(tmp_path / "a.txt")
    bad = list(rows)
    bad[-1] = "0.0 oops"
    (tmp_path / "b.txt").write_text("\n".join(bad) + "\n")
    with pytest.raises(FormatError, match=f"line {len(rows)}"):
        read_measurement(tmp_path / "b.txt")
    (tmp_path / "c.txt").write_text("\n".join(rows[:-1]) + "\n")
    with pytest.raises(FormatError, match="truncated"):
        read_measurement(tmp_path / "c.txt")
