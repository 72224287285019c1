"""Current patterns, noise synthesis and the measurement file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ParameterError

GENERATOR_NAME = "numpy-PCG64/random_raw-53bit/box-muller"
FORMAT_TAG = "eitmono-measurement-v1"


@dataclass(frozen=True, eq=False)
class PatternBasis:
    """Orthonormal basis of the zero-sum hyperplane; column m-1 is pattern m."""

    k: int
    patterns: np.ndarray = field(repr=False)  # shape (k, k-1)

    @property
    def matrix(self) -> np.ndarray:
        return self.patterns


def current_patterns(k: int) -> PatternBasis:
    """Gram-Schmidt orthonormalization of e1 - e(m+1), m = 1..k-1.

    Pattern m has ``sqrt(1/(m(m+1)))`` on electrodes 1..m, ``-sqrt(m/(m+1))``
    on electrode m+1 and zeros after.
    """
    if k < 2:
        raise ParameterError(f"need k >= 2 electrodes, got {k}")
    out = np.zeros((k, k - 1))
    for m in range(1, k):
        out[:m, m - 1] = math.sqrt(1.0 / (m * (m + 1)))
        out[m, m - 1] = -math.sqrt(m / (m + 1.0))
    out.setflags(write=False)
    return PatternBasis(k, out)


@dataclass(frozen=True)
class NoiseSpec:
    level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.level >= 0 and math.isfinite(self.level)):
            raise ParameterError(f"noise level must be nonnegative, got {self.level}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ParameterError("seed must be a 64-bit unsigned integer")


def standard_normals(seed: int, n: int) -> np.ndarray:
    """``n`` standard normal draws, reproducible bit-for-bit across platforms.

    Uniforms come from the raw 64-bit PCG64 stream (top 53 bits), normals
    from the Box-Muller transform, two per pair of uniforms.
    """
    bitgen = np.random.PCG64(int(seed))
    m = (n + 1) // 2
    raw = bitgen.random_raw(2 * m).astype(np.uint64)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u1, u2 = u[0::2], u[1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[0::2] = rad * np.cos(2 * np.pi * u2)
    z[1::2] = rad * np.sin(2 * np.pi * u2)
    return z[:n]


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def noise_matrix(patterns: PatternBasis, electrode_voltages: np.ndarray, seed: int,
                 attempt: int = 0) -> np.ndarray:
    """Unit-spectral-norm noise direction Sym(I^T H Y V)/||.||."""
    k = patterns.k
    V = np.asarray(electrode_voltages, dtype=float)
    if V.shape != (k, k - 1):
        raise ParameterError(f"electrode voltages must have shape {(k, k - 1)}, got {V.shape}")
    Y = standard_normals(seed + attempt, k * k).reshape(k, k)
    H = np.eye(k) - np.full((k, k), 1.0 / k)
    N = _sym(patterns.matrix.T @ H @ Y @ V)
    nrm = np.linalg.norm(N, 2)
    return N / nrm if nrm > 0 else N * 0.0


def add_noise(clean, electrode_voltages: np.ndarray, spec: NoiseSpec,
              patterns: PatternBasis | None = None):
    """Return ``R + delta * N`` with ``delta = level * ||R||_2``.

    ``clean`` is a VoltageMatrix; ``electrode_voltages`` holds V^(m) as
    columns (shape ``(k, k-1)``), the same voltages ``clean`` was built from.
    """
    from .forward import VoltageMatrix

    if spec.level == 0:
        return VoltageMatrix(clean.entries.copy(), dict(clean.metadata, noise_level=0.0,
                                                        seed=int(spec.seed), delta=0.0))
    k = clean.k
    patterns = patterns or current_patterns(k)
    delta = spec.level * np.linalg.norm(clean.entries, 2)
    for attempt in range(2):
        N = noise_matrix(patterns, electrode_voltages, int(spec.seed), attempt)
        if np.any(N):
            break
    else:
        raise NumericalError("noise direction vanished twice")
    meta = dict(clean.metadata, noise_level=float(spec.level), seed=int(spec.seed),
                delta=float(delta), noise_norm="spectral", generator=GENERATOR_NAME)
    return VoltageMatrix(clean.entries + delta * N, meta)


# -- file format ------------------------------------------------------------

def write_measurement(path, vm) -> None:
    """Decimal-text measurement file: ``key value`` header then the matrix.

    Header values are JSON-encoded; the matrix is written row-major with 17
    significant digits so that a read returns the identical doubles.
    """
    entries = vm.entries
    lines = [FORMAT_TAG]
    for key in sorted(vm.metadata):
        lines.append(f"{key} {json.dumps(vm.metadata[key], sort_keys=True)}")
    lines.append(f"matrix {entries.shape[0]} {entries.shape[1]}")
    lines += [" ".join(f"{v:.16e}" for v in row) for row in entries.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_measurement(path):
    from .forward import VoltageMatrix

    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != FORMAT_TAG:
        raise FormatError(f"{path}: line 1: missing {FORMAT_TAG!r} tag")
    meta = {}
    i = 1
    while i < len(rows) and not rows[i].startswith("matrix "):
        key, _, value = rows[i].partition(" ")
        try:
            meta[key] = json.loads(value)
        except json.JSONDecodeError:
            raise FormatError(f"{path}: line {i + 1}: bad header value for {key!r}") from None
        i += 1
    if i == len(rows):
        raise FormatError(f"{path}: no matrix section")
    try:
        n, m = (int(v) for v in rows[i].split()[1:3])
    except ValueError:
        raise FormatError(f"{path}: line {i + 1}: bad matrix header") from None
    data = []
    for j in range(n):
        lineno = i + 2 + j
        if lineno > len(rows):
            raise FormatError(f"{path}: truncated matrix at line {lineno}")
        try:
            vals = [float(v) for v in rows[lineno - 1].split()]
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: bad number") from None
        if len(vals) != m:
            raise FormatError(f"{path}: line {lineno}: expected {m} values")
        data.append(vals)
    return VoltageMatrix(np.array(data), meta)
