"""P1 finite element solver for the complete electrode model.

Unknowns are the nodal potential ``v`` and the electrode voltages written
as ``V = Q w`` with ``Q`` the orthonormal zero-sum pattern basis, which
grounds the voltages without a Lagrange multiplier and keeps the system
symmetric positive definite::

    [ K(gamma) + M_E    C Q   ] [v]   [  0    ]
    [ Q^T C^T        Q^T D Q  ] [w] = [ Q^T I ]

with ``M_E`` the electrode boundary mass scaled by ``1/z_j``,
``C[n, j] = -(1/z_j) int_{E_j} phi_n`` and ``D = diag(|E_j|/z_j)``.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .errors import NumericalError, ParameterError
from .geometry import Phantom, PixelGrid, PixelSet
from .measurement import PatternBasis, current_patterns
from .mesh import ElectrodeLayout, Mesh

log = logging.getLogger(__name__)

CONDUCTIVITY_FLOOR = 1e-6
BINNING_RULE = "element-centroid; off-domain pixels reassigned to nearest inside pixel"


@dataclass(frozen=True, eq=False)
class ConductivityField:
    values: np.ndarray = field(repr=False)
    description: str = ""
    floor: float = CONDUCTIVITY_FLOOR

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ParameterError("conductivity has non-finite values")
        if vals.size and vals.min() < self.floor:
            raise ParameterError(
                f"conductivity {vals.min():.3g} below floor {self.floor:.3g}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, mesh: Mesh, value: float) -> "ConductivityField":
        return cls(np.full(mesh.n_triangles, float(value)), f"constant {value!r}")

    @classmethod
    def from_phantom(cls, mesh: Mesh, phantom: Phantom) -> "ConductivityField":
        vals = phantom.conductivity(mesh.centroids())
        desc = json.dumps(phantom.to_dict(), sort_keys=True)
        return cls(vals, desc)

    def scaled(self, factor: float) -> "ConductivityField":
        return ConductivityField(factor * self.values, f"{factor!r} * ({self.description})")

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class CemSolution:
    v: np.ndarray
    V: np.ndarray


@dataclass(frozen=True, eq=False)
class VoltageMatrix:
    """Symmetric current-to-voltage matrix in the pattern basis."""

    entries: np.ndarray
    metadata: dict = field(default_factory=dict)
    voltages: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        a = np.ascontiguousarray(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ParameterError("voltage matrix must be square")
        if not np.all(np.isfinite(a)):
            raise NumericalError("voltage matrix has non-finite entries")
        scale = max(np.abs(a).max(), np.finfo(float).tiny)
        if np.abs(a - a.T).max() > 1e-9 * scale:
            raise NumericalError("voltage matrix is not symmetric")
        object.__setattr__(self, "entries", a)

    @property
    def k(self) -> int:
        return self.entries.shape[0] + 1


@functools.lru_cache(maxsize=8)
def _element_geometry(mesh: Mesh):
    p = mesh.nodes[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    area = mesh.signed_areas()
    # gradients of the three barycentric functions, shape (T, 3, 2)
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grads = np.stack([gx, gy], axis=2) / (2 * area)[:, None, None]
    local = np.einsum("tad,tbd->tab", grads, grads) * area[:, None, None]
    return area, grads, local


@dataclass(eq=False)
class FactorizedSystem:
    mesh: Mesh
    layout: ElectrodeLayout
    sigma: ConductivityField
    matrix: sp.csc_matrix
    basis: np.ndarray  # (k, k-1)
    _lu: object = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def lu(self):
        if self._lu is None:
            try:
                self._lu = splu(self.matrix, permc_spec="MMD_AT_PLUS_A",
                                options={"SymmetricMode": True})
            except RuntimeError as exc:
                raise NumericalError(f"factorization failed for system of size {self.dim}: {exc}") from exc
        return self._lu

    def rhs(self, currents: np.ndarray) -> np.ndarray:
        """Right-hand sides for currents given as columns of a (k, m) array."""
        b = np.zeros((self.dim, currents.shape[1]))
        b[self.mesh.n_nodes:] = self.basis.T @ currents
        return b


def assemble(mesh: Mesh, sigma: ConductivityField, layout: ElectrodeLayout) -> FactorizedSystem:
    """CEM system matrix for ``sigma``; factorized lazily on first solve."""
    if mesh.k != layout.k:
        raise ParameterError(f"mesh has {mesh.k} electrodes, layout has {layout.k}")
    if sigma.values.shape != (mesh.n_triangles,):
        raise ParameterError("conductivity must have one value per triangle")
    n, k = mesh.n_nodes, layout.k
    area, _, local = _element_geometry(mesh)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    vals = (local * sigma.values[:, None, None]).ravel()

    z = layout.z_array()
    edges = mesh.boundary_edges
    lab = mesh.electrode_of_edge
    on = lab >= 0
    e = edges[on]
    ej = lab[on]
    length = mesh.edge_lengths()[on]
    w = length / z[ej]
    # electrode boundary mass (1/z) int phi_a phi_b = w/6 * [[2,1],[1,2]]
    m_rows = np.concatenate([e[:, 0], e[:, 0], e[:, 1], e[:, 1]])
    m_cols = np.concatenate([e[:, 0], e[:, 1], e[:, 0], e[:, 1]])
    m_vals = np.concatenate([w / 3, w / 6, w / 6, w / 3])
    A = sp.coo_matrix((np.concatenate([vals, m_vals]),
                       (np.concatenate([rows, m_rows]), np.concatenate([cols, m_cols]))),
                      shape=(n, n)).tocsr()
    # coupling C[n, j] = -(1/z_j) int_{E_j} phi_n
    C = sp.coo_matrix((np.concatenate([-w / 2, -w / 2]),
                       (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([ej, ej]))),
                      shape=(n, k)).tocsr()
    elen = np.bincount(ej, weights=length, minlength=k)
    Q = current_patterns(k).matrix
    CQ = sp.csr_matrix(C @ Q)
    D = (Q.T * (elen / z)) @ Q
    M = sp.bmat([[A, CQ], [CQ.T, sp.csr_matrix(D)]], format="csc")
    M.sum_duplicates()
    M.sort_indices()
    return FactorizedSystem(mesh, layout, sigma, M, Q)


def _solve_many(system: FactorizedSystem, currents: np.ndarray):
    b = system.rhs(currents)
    x = system.lu.solve(b)
    r = system.matrix @ x - b
    tol = 1e-8 * max(np.abs(b).max(), 1e-300)
    if np.abs(r).max() > tol and np.abs(b).max() > 0:
        raise NumericalError(f"CEM residual {np.abs(r).max():.3e} exceeds tolerance {tol:.3e}")
    n = system.mesh.n_nodes
    return x[:n], system.basis @ x[n:]


def solve(system: FactorizedSystem, current) -> CemSolution:
    current = np.asarray(current, dtype=float)
    if current.shape != (system.layout.k,):
        raise ParameterError(f"current must have length {system.layout.k}")
    if abs(current.sum()) > 1e-12 * max(1.0, np.abs(current).max()):
        raise ParameterError("current pattern must sum to zero")
    v, V = _solve_many(system, current[:, None])
    return CemSolution(v[:, 0], V[:, 0])


def solve_patterns(system: FactorizedSystem, patterns: PatternBasis):
    """Nodal potentials (N, k-1) and electrode voltages (k, k-1) for every pattern."""
    if patterns.k != system.layout.k:
        raise ParameterError("pattern basis does not match the electrode count")
    return _solve_many(system, patterns.matrix)


def raw_voltage_matrix(system: FactorizedSystem, patterns: PatternBasis):
    """Unsymmetrized ``R[i, j] = I^(j) . V^(i)`` and the voltages V."""
    _, V = solve_patterns(system, patterns)
    return (patterns.matrix.T @ V).T, V


def voltage_matrix(mesh: Mesh, sigma: ConductivityField, layout: ElectrodeLayout,
                   patterns: PatternBasis | None = None, system: FactorizedSystem | None = None) -> VoltageMatrix:
    patterns = patterns or current_patterns(layout.k)
    system = system or assemble(mesh, sigma, layout)
    R, V = raw_voltage_matrix(system, patterns)
    meta = {"k": layout.k, "z": list(layout.z), "electrode_size": layout.size,
            "mesh_hash": mesh.digest(), "conductivity_hash": sigma.digest(),
            "conductivity": sigma.description}
    return VoltageMatrix(0.5 * (R + R.T), meta, V)


# -- pixel derivative tensors ---------------------------------------------

def element_owner(mesh: Mesh, grid: PixelGrid) -> np.ndarray:
    """Inside-pixel row (0..n_inside-1) owning each triangle, by centroid."""
    cent = mesh.centroids()
    flat = grid.locate(cent)
    inside_flat = grid.inside_indices
    row_of = np.full(grid.n_pixels, -1, dtype=np.int64)
    row_of[inside_flat] = np.arange(len(inside_flat))
    owner = np.where(flat >= 0, row_of[np.maximum(flat, 0)], -1)
    lost = owner < 0
    if lost.any():
        tree = cKDTree(grid.centroids(inside_flat))
        _, nearest = tree.query(cent[lost])
        owner[lost] = nearest
    return owner


@dataclass(frozen=True, eq=False)
class DerivativeTensor:
    """Per inside pixel, the matrix ``E_p[i, j] = -int_p grad v_i . grad v_j``."""

    matrices: np.ndarray = field(repr=False)  # (n_inside, k-1, k-1)
    pixel_indices: np.ndarray = field(repr=False)  # flat indices of inside pixels
    owner: np.ndarray = field(repr=False)  # per triangle, row into matrices
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        row_of = {int(p): r for r, p in enumerate(self.pixel_indices.tolist())}
        object.__setattr__(self, "_row_of", row_of)

    def rows(self, pset: PixelSet) -> np.ndarray:
        try:
            return np.fromiter((self._row_of[p] for p in pset), dtype=np.int64, count=len(pset))
        except KeyError as exc:
            raise ParameterError(f"pixel {exc.args[0]} is not an inside pixel") from None

    def matrix(self, pixel: int) -> np.ndarray:
        return self.matrices[self._row_of[int(pixel)]]

    def sum_over(self, pset: PixelSet) -> np.ndarray:
        r = self.rows(pset)
        return self.matrices[r].sum(axis=0)

    @property
    def k(self) -> int:
        return self.matrices.shape[1] + 1


def derivative_tensor(mesh: Mesh, sigma0: ConductivityField, layout: ElectrodeLayout,
                      patterns: PatternBasis, grid: PixelGrid,
                      system: FactorizedSystem | None = None) -> DerivativeTensor:
    system = system or assemble(mesh, sigma0, layout)
    U, _ = solve_patterns(system, patterns)
    area, grads, _ = _element_geometry(mesh)
    tri = mesh.triangles
    # element gradients of every pattern potential, shape (T, 2, k-1)
    G = np.einsum("tad,tam->tdm", grads, U[tri])
    G *= np.sqrt(area)[:, None, None]
    owner = element_owner(mesh, grid)
    n_in = grid.n_inside
    km = patterns.k - 1
    mats = np.zeros((n_in, km, km))
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(n_in + 1))
    for r in range(n_in):
        lo, hi = bounds[r], bounds[r + 1]
        if hi == lo:
            continue
        W = G[order[lo:hi]].reshape(-1, km)
        E = -(W.T @ W)
        mats[r] = 0.5 * (E + E.T)
    meta = {"mesh_hash": mesh.digest(), "k": layout.k, "z": list(layout.z),
            "background_hash": sigma0.digest(), "grid": grid.key(), "binning": BINNING_RULE}
    return DerivativeTensor(mats, grid.inside_indices, owner, meta)


def tensor_cache_key(mesh: Mesh, sigma0: ConductivityField, layout: ElectrodeLayout,
                     grid: PixelGrid) -> str:
    key = {"mesh": mesh.digest(), "k": layout.k, "z": list(layout.z),
           "size": layout.size, "gamma0": sigma0.digest(), "grid": grid.key(),
           "binning": BINNING_RULE}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:24]


def cached_derivative_tensor(cache_dir, mesh, sigma0, layout, patterns, grid, system=None):
    """Load the tensor from ``cache_dir`` if its key matches, else compute and store.

    Cache files are ``.npz`` archives holding ``key``, ``matrices``,
    ``pixel_indices``, ``owner`` and a JSON ``metadata`` string.
    """
    key = tensor_cache_key(mesh, sigma0, layout, grid)
    path = Path(cache_dir) / f"tensor-{key}.npz"
    if path.exists():
        try:
            with np.load(path, allow_pickle=False) as npz:
                if str(npz["key"]) == key:
                    log.info("derivative tensor cache hit %s", path.name)
                    return DerivativeTensor(npz["matrices"], npz["pixel_indices"], npz["owner"],
                                            json.loads(str(npz["metadata"])))
        except (OSError, KeyError, ValueError):
            log.warning("ignoring unreadable tensor cache %s", path)
    tensor = derivative_tensor(mesh, sigma0, layout, patterns, grid, system)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, key=np.array(key), matrices=tensor.matrices,
             pixel_indices=tensor.pixel_indices, owner=tensor.owner,
             metadata=np.array(json.dumps(tensor.metadata, sort_keys=True)))
    return tensor


def indicator_conductivity(sigma0: ConductivityField, owner: np.ndarray, rows: np.ndarray,
                           change: float) -> ConductivityField:
    """``sigma0 + change`` on triangles owned by the given pixel rows."""
    mask = np.isin(owner, rows)
    vals = sigma0.values.copy()
    vals[mask] += change
    return ConductivityField(vals, f"background {change:+.6g} on {len(rows)} pixels")
