"""Triangular meshes of the unit disk with boundary electrodes.

Generated meshes follow a size field that is fine in a band along the
boundary and finest at the electrode endpoints, where the CEM potential has
weak singularities: graded boundary nodes, half-ring fans around each
endpoint and concentric interior rings. The point cloud is triangulated with Qhull's Delaunay
routine, which is deterministic for a fixed point set.

Mesh file format (plain text, 0-based indices)::

    nodes N triangles T edges E k K
    x y                      (N lines)
    i j l                    (T lines, counterclockwise)
    i j electrode            (E lines, electrode = -1 off the electrodes)
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .errors import FormatError, ParameterError

RING_FACTOR = math.sqrt(3.0) / 2.0


@dataclass(frozen=True)
class ElectrodeLayout:
    """``k`` equidistant electrodes of arc length ``size`` on the unit circle.

    Electrode ``j`` is centered at angle ``2*pi*j/k``.
    """

    k: int
    size: float | None = None
    z: tuple[float, ...] | float = 1e-2

    def __post_init__(self):
        if self.k < 2:
            raise ParameterError(f"need at least 2 electrodes, got k={self.k}")
        size = math.pi / self.k if self.size is None else float(self.size)
        if not 0 < size < 2 * math.pi / self.k:
            raise ParameterError(
                f"electrode size {size} infeasible for k={self.k} (electrodes overlap)")
        z = self.z
        z = (float(z),) * self.k if np.isscalar(z) else tuple(float(v) for v in z)
        if len(z) != self.k or min(z) <= 0:
            raise ParameterError("need one positive contact impedance per electrode")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "z", z)

    @property
    def h(self) -> float:
        """Maximal extended electrode diameter 2*pi/k."""
        return 2 * math.pi / self.k

    @property
    def centers(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.k) / self.k

    def z_array(self) -> np.ndarray:
        return np.asarray(self.z, dtype=float)

    def scaled(self, factor: float) -> "ElectrodeLayout":
        """Same layout with every contact impedance multiplied by ``factor``."""
        return ElectrodeLayout(self.k, self.size, tuple(factor * v for v in self.z))


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    boundary_edges: np.ndarray = field(repr=False)
    electrode_of_edge: np.ndarray = field(repr=False)
    k: int

    def __post_init__(self):
        for name, dtype in (("nodes", float), ("triangles", np.int64),
                            ("boundary_edges", np.int64), ("electrode_of_edge", np.int64)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def edge_lengths(self) -> np.ndarray:
        d = self.nodes[self.boundary_edges[:, 1]] - self.nodes[self.boundary_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def boundary_arc(self) -> np.ndarray:
        """Arc-length parameter of each boundary edge's start node along the loop."""
        return np.concatenate([[0.0], np.cumsum(self.edge_lengths())[:-1]])

    def electrode_edges(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.electrode_of_edge == j)

    def electrode_lengths(self) -> np.ndarray:
        lengths = self.edge_lengths()
        return np.array([lengths[self.electrode_of_edge == j].sum() for j in range(self.k)])

    def electrode_midangles(self) -> np.ndarray:
        """Angle of the midpoint between each electrode's two endpoint nodes."""
        out = np.empty(self.k)
        for j in range(self.k):
            chain = _electrode_chain(self, j)
            a = self.nodes[chain[0]]
            b = self.nodes[chain[-1]]
            ta, tb = math.atan2(a[1], a[0]), math.atan2(b[1], b[0])
            span = (tb - ta) % (2 * math.pi)
            out[j] = (ta + span / 2) % (2 * math.pi)
        return out

    def digest(self) -> str:
        """Content hash over all mesh arrays."""
        h = hashlib.sha256()
        for arr in (self.nodes, self.triangles, self.boundary_edges, self.electrode_of_edge):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.k).encode())
        return h.hexdigest()[:16]


def _electrode_chain(mesh: Mesh, j: int) -> list[int]:
    edges = mesh.boundary_edges[mesh.electrode_edges(j)]
    # boundary_edges are stored in loop order, but an electrode may wrap
    # around the loop start
    succ = {int(a): int(b) for a, b in edges}
    starts = set(succ) - set(succ.values())
    node = starts.pop() if starts else int(edges[0, 0])
    chain = [node]
    while node in succ and len(chain) <= len(edges):
        node = succ[node]
        chain.append(node)
    return chain


# -- generation -------------------------------------------------------------

def _graded_positions(t0: float, t1: float, size_fn, n_min: int) -> np.ndarray:
    """Interior break points of [t0, t1] with spacing following ``size_fn``."""
    s = np.linspace(t0, t1, 2049)
    dens = 1.0 / size_fn(s)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))])
    n = max(n_min, int(math.ceil(cdf[-1] - 1e-9)))
    targets = np.linspace(0.0, cdf[-1], n + 1)[1:-1]
    return np.interp(targets, cdf, s)


SLOPE = 0.1  # growth of the local edge length per unit distance


def _size_field(endpoints: np.ndarray, h: float, h_band: float, h_end: float):
    tree = cKDTree(endpoints)

    def size(x: np.ndarray) -> np.ndarray:
        r = np.hypot(x[:, 0], x[:, 1])
        d = tree.query(x)[0]
        return np.minimum.reduce([np.full(len(x), h), h_band + SLOPE * (1.0 - r),
                                  h_end + SLOPE * d])
    return size


def _fan(e: np.ndarray, h_band: float, h_end: float) -> np.ndarray:
    """Half-rings of points around a boundary point ``e``, inside the disk."""
    out = []
    rho = RING_FACTOR * h_end
    inward = math.atan2(e[1], e[0]) + math.pi
    while True:
        s = h_end + SLOPE * rho
        if s >= h_band:
            break
        # keep |e + rho*u| <= 1 - 0.3 s, i.e. the angle from the inward
        # direction at most psi
        c = (1.0 + rho * rho - (1.0 - 0.3 * s) ** 2) / (2.0 * rho)
        if c < 1.0:
            psi = math.acos(max(c, -1.0))
            n = max(1, int(math.ceil(2.0 * psi * rho / s)))
            ang = inward - psi + (np.arange(n) + 0.5) * (2.0 * psi / n)
            out.append(np.column_stack([e[0] + rho * np.cos(ang), e[1] + rho * np.sin(ang)]))
        rho += RING_FACTOR * s
    return np.vstack(out) if out else np.zeros((0, 2))


def _disk_points(layout: ElectrodeLayout, h: float, grading: float):
    k = layout.k
    half = layout.size / 2.0
    h_end = max(1.0 - grading, 0.05) * h
    h_band = max(1.0 - 0.8 * grading, 0.2) * h

    # boundary segments alternate electrode [c-half, c+half] and the gap
    # up to the next electrode
    bnd_angles = []
    bnd_electrode = []
    ends = []
    for j in range(k):
        c = 2 * math.pi * j / k
        for t0, t1, label, n_min in ((c - half, c + half, j, 2),
                                     (c + half, c + 2 * math.pi / k - half, -1, 1)):
            def size_fn(t, t0=t0, t1=t1):
                d = np.maximum(np.minimum(t - t0, t1 - t), 0.0)
                return np.minimum(h_band, h_end + SLOPE * d)
            inner = _graded_positions(t0, t1, size_fn, n_min)
            pts = np.concatenate([[t0], inner])
            bnd_angles.append(pts)
            bnd_electrode.append(np.full(len(pts), label))
        ends += [c - half, c + half]
    theta = np.concatenate(bnd_angles)
    edge_label = np.concatenate(bnd_electrode)
    boundary = np.column_stack([np.cos(theta), np.sin(theta)])
    endpoints = np.column_stack([np.cos(ends), np.sin(ends)])
    size = _size_field(endpoints, h, h_band, h_end)

    # fans around electrode endpoints, thinned greedily in placement order
    fan = np.vstack([_fan(e, h_band, h_end) for e in endpoints])
    reach = 0.6 * size(fan)
    clear = cKDTree(boundary).query(fan)[0] > reach
    fan, reach = fan[clear], reach[clear]
    keep = np.zeros(len(fan), dtype=bool)
    for i, near in enumerate(cKDTree(fan).query_ball_point(fan, reach)):
        keep[i] = not any(keep[j] for j in near if j < i)
    accepted = [boundary, fan[keep]]

    # concentric rings following the radial part of the size field
    def radial_size(r):
        return min(h, h_band + SLOPE * (1.0 - r))

    rings = []
    r = 1.0
    i = 0
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    while True:
        r -= RING_FACTOR * radial_size(r)
        s = radial_size(r)
        if r < 0.6 * s:
            break
        n = max(6, int(round(2 * math.pi * r / s)))
        offset = 2 * math.pi * ((0.5 * (i % 2) + golden * i) % 1.0) / n
        t = offset + 2 * math.pi * np.arange(n) / n
        rings.append(np.column_stack([r * np.cos(t), r * np.sin(t)]))
        i += 1
    rings.append(np.zeros((1, 2)))
    ring_pts = np.vstack(rings)
    d = cKDTree(np.vstack(accepted)).query(ring_pts)[0]
    interior = np.vstack(accepted[1:] + [ring_pts[d > 0.6 * size(ring_pts)]])
    return boundary, edge_label, interior


def _triangulate(boundary: np.ndarray, edge_label: np.ndarray, interior: np.ndarray, k: int) -> Mesh:
    nb = len(boundary)
    points = np.vstack([boundary, interior])
    tri = Delaunay(points).simplices.astype(np.int64)
    p = points[tri]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    tri = tri[np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))]
    edges = np.column_stack([np.arange(nb), (np.arange(nb) + 1) % nb])
    mesh = Mesh(points, tri, edges, edge_label, k)
    found = boundary_loop(mesh.triangles)
    if len(found) != nb:
        raise ParameterError("triangulation hull does not match the boundary nodes")
    return mesh


def generate_disk_mesh(layout: ElectrodeLayout, target_nodes: int, grading: float = 0.95) -> Mesh:
    """Graded triangulation of the unit disk with ``layout``'s electrodes.

    The local edge length ``h`` in the bulk shrinks to ``max(1 - 0.8*grading,
    0.2) * h`` in a band along the boundary and to ``max(1 - grading, 0.05) * h``
    at electrode endpoints, growing linearly away from them. ``h`` is tuned
    so that the node count lands near ``target_nodes``.
    """
    if target_nodes < 50 * layout.k:
        raise ParameterError(f"target_nodes must be at least 50*k = {50 * layout.k}")
    if not 0.0 <= grading <= 1.0:
        raise ParameterError("grading must lie in [0, 1]")
    h = math.sqrt(2 * math.pi / (math.sqrt(3.0) * target_nodes))
    for _ in range(12):
        b, lab, inner = _disk_points(layout, h, grading)
        n = len(b) + len(inner)
        if abs(n - target_nodes) <= 0.03 * target_nodes:
            break
        h *= math.sqrt(n / target_nodes)
    mesh = _triangulate(b, lab, inner, layout.k)
    validate_mesh(mesh, layout.size)
    return mesh


def refine(mesh: Mesh, project_to_circle: bool | None = None) -> Mesh:
    """Uniform red refinement: each triangle split into four.

    New boundary nodes are projected onto the unit circle when the mesh is
    a disk mesh (detected automatically unless ``project_to_circle`` is set).
    """
    nodes = mesh.nodes
    tri = mesh.triangles
    if project_to_circle is None:
        bn = mesh.boundary_edges[:, 0]
        project_to_circle = bool(np.allclose(np.hypot(*nodes[bn].T), 1.0, atol=1e-12))
    e = np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e_sorted = np.sort(e, axis=1)
    uniq, inv = np.unique(e_sorted, axis=0, return_inverse=True)
    inv = inv.ravel()
    mids = 0.5 * (nodes[uniq[:, 0]] + nodes[uniq[:, 1]])
    n0 = len(nodes)
    mid_id = n0 + inv.reshape(3, -1).T  # columns: edge01, edge12, edge20
    # boundary edges: midpoint ids by lookup
    be = np.sort(mesh.boundary_edges, axis=1)
    pos = np.searchsorted(uniq[:, 0] * (n0 + 1) + uniq[:, 1], be[:, 0] * (n0 + 1) + be[:, 1])
    if project_to_circle:
        mids[pos] /= np.hypot(mids[pos, 0], mids[pos, 1])[:, None]
    new_nodes = np.vstack([nodes, mids])
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, bc, ca = mid_id[:, 0], mid_id[:, 1], mid_id[:, 2]
    new_tri = np.vstack([np.column_stack([a, ab, ca]), np.column_stack([ab, b, bc]),
                         np.column_stack([ca, bc, c]), np.column_stack([ab, bc, ca])])
    m = n0 + pos
    be_o = mesh.boundary_edges
    new_edges = np.empty((2 * len(be_o), 2), dtype=np.int64)
    new_edges[0::2, 0] = be_o[:, 0]
    new_edges[0::2, 1] = m
    new_edges[1::2, 0] = m
    new_edges[1::2, 1] = be_o[:, 1]
    new_lab = np.repeat(mesh.electrode_of_edge, 2)
    return Mesh(new_nodes, new_tri, new_edges, new_lab, mesh.k)


# -- validation and I/O -----------------------------------------------------

def boundary_loop(triangles: np.ndarray) -> np.ndarray:
    """Directed boundary edges (each appearing in exactly one triangle)."""
    e = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return e[counts[inv.ravel()] == 1]


def validate_mesh(mesh: Mesh, electrode_size: float | None = None) -> None:
    """Check every Mesh invariant; raise FormatError describing the first violation."""
    n = mesh.n_nodes
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= n):
        raise FormatError("triangle node index out of range")
    if mesh.boundary_edges.size and (mesh.boundary_edges.min() < 0 or mesh.boundary_edges.max() >= n):
        raise FormatError("boundary edge node index out of range")
    area = mesh.signed_areas()
    bad = np.flatnonzero(area <= 0)
    if bad.size:
        raise FormatError(f"triangle {int(bad[0])} has non-positive signed area (clockwise or degenerate)")
    be = mesh.boundary_edges
    if len(be) < 3:
        raise FormatError("boundary has fewer than 3 edges")
    if not np.array_equal(be[:, 1], np.roll(be[:, 0], -1)):
        raise FormatError("boundary edges do not form a single closed loop in order")
    if len(np.unique(be[:, 0])) != len(be):
        raise FormatError("boundary loop visits a node twice")
    expected = {tuple(x) for x in np.sort(boundary_loop(mesh.triangles), axis=1).tolist()}
    listed = {tuple(x) for x in np.sort(be, axis=1).tolist()}
    if expected != listed:
        raise FormatError("listed boundary edges differ from the triangulation boundary")
    lab = mesh.electrode_of_edge
    if len(lab) != len(be):
        raise FormatError("electrode labels do not match boundary edges")
    if lab.min() < -1 or lab.max() >= mesh.k:
        raise FormatError("electrode index out of range")
    # contiguity: walking the loop, each electrode label forms one run
    runs = lab[np.r_[True, lab[1:] != lab[:-1]]]
    if len(runs) > 1 and runs[0] == runs[-1] and lab[0] == lab[-1]:
        runs = runs[:-1]
    seen = runs[runs >= 0]
    if len(seen) != len(np.unique(seen)):
        raise FormatError("an electrode is split into several arcs or electrodes overlap")
    if len(np.unique(seen)) != mesh.k:
        raise FormatError("some electrode has no boundary edges")
    # distinct electrodes must not touch (disjoint closures)
    nxt = np.roll(lab, -1)
    touching = (lab >= 0) & (nxt >= 0) & (lab != nxt)
    if touching.any():
        raise FormatError(f"electrodes {int(lab[touching][0])} and {int(nxt[touching][0])} overlap or touch")
    counts = np.bincount(lab[lab >= 0], minlength=mesh.k)
    if counts.min() < 2:
        raise FormatError(f"electrode {int(np.argmin(counts))} has fewer than 2 edges")
    lengths = mesh.electrode_lengths()
    ref = electrode_size if electrode_size is not None else float(np.mean(lengths))
    dev = np.abs(lengths - ref) / ref
    if dev.max() > 0.01:
        raise FormatError(f"electrode {int(np.argmax(dev))} arc length deviates "
                          f"{100 * dev.max():.2f}% from {ref:.6g}")


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"nodes {mesh.n_nodes} triangles {mesh.n_triangles} "
             f"edges {len(mesh.boundary_edges)} k {mesh.k}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes.tolist()]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines += [f"{a} {b} {e}" for (a, b), e in zip(mesh.boundary_edges.tolist(),
                                                    mesh.electrode_of_edge.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path, electrode_size: float | None = None) -> Mesh:
    """Read and validate a mesh file; errors name the offending line."""
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    rows = text.splitlines()
    if not rows:
        raise FormatError(f"{path}: empty mesh file")
    head = rows[0].split()
    try:
        if head[0::2] != ["nodes", "triangles", "edges", "k"]:
            raise ValueError
        n, t, e, k = (int(v) for v in head[1::2])
    except (ValueError, IndexError):
        raise FormatError(f"{path}: line 1: malformed header {rows[0]!r}") from None
    if len(rows) < 1 + n + t + e:
        raise FormatError(f"{path}: expected {1 + n + t + e} lines, found {len(rows)}")

    def parse(start, count, width, conv, what):
        out = []
        for i in range(count):
            lineno = start + i + 1
            parts = rows[start + i].split()
            if len(parts) != width:
                raise FormatError(f"{path}: line {lineno}: expected {width} fields for {what}")
            try:
                out.append([conv(v) for v in parts])
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: bad number in {what}") from None
        return out

    nodes = np.array(parse(1, n, 2, float, "node"), dtype=float).reshape(n, 2)
    tri = np.array(parse(1 + n, t, 3, int, "triangle"), dtype=np.int64).reshape(t, 3)
    edges = np.array(parse(1 + n + t, e, 3, int, "edge"), dtype=np.int64).reshape(e, 3)
    for i, row in enumerate(tri):
        if row.min() < 0 or row.max() >= n:
            raise FormatError(f"{path}: line {2 + n + i}: triangle {i} node index out of range")
    for i, row in enumerate(edges):
        if row[:2].min() < 0 or row[:2].max() >= n:
            raise FormatError(f"{path}: line {2 + n + t + i}: edge node index out of range")
        if not -1 <= row[2] < k:
            raise FormatError(f"{path}: line {2 + n + t + i}: electrode index {row[2]} out of range")
    mesh = Mesh(nodes, tri, edges[:, :2], edges[:, 2], k)
    area = mesh.signed_areas()
    bad = np.flatnonzero(area <= 0)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: line {2 + n + i}: triangle {i} is clockwise or degenerate")
    try:
        validate_mesh(mesh, electrode_size)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return mesh
