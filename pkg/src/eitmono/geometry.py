"""Pixel grids, inclusion shapes and set operations on the grid.

A :class:`PixelGrid` covers the bounding square of the disk domain with
square pixels of edge ``side``. A pixel belongs to the (discretized) domain
when its centroid lies strictly inside the disk. Pixels are addressed by a
flat row-major index ``iy * nx + ix``.

Connectivity is 4-adjacency (NWSE) throughout. Everything outside the
domain, i.e. off-grid pixels and grid pixels whose centroid is outside the
disk, is treated as a single exterior super-node.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import shapely
from scipy import ndimage

from .errors import FormatError, ParameterError

_CROSS = ndimage.generate_binary_structure(2, 1)
_SQUARE = ndimage.generate_binary_structure(2, 2)


@dataclass(frozen=True, eq=False)
class PixelGrid:
    origin: tuple[float, float]
    side: float
    nx: int
    ny: int
    inside_mask: np.ndarray = field(repr=False)  # shape (ny, nx)

    def __post_init__(self):
        if not self.side > 0:
            raise ParameterError(f"pixel side must be positive, got {self.side}")
        mask = np.asarray(self.inside_mask, dtype=bool)
        if mask.shape != (self.ny, self.nx):
            raise ParameterError(
                f"inside_mask has shape {mask.shape}, expected {(self.ny, self.nx)}")
        mask.setflags(write=False)
        object.__setattr__(self, "inside_mask", mask)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def pixel_area(self) -> float:
        return self.side * self.side

    @property
    def inside_indices(self) -> np.ndarray:
        return np.flatnonzero(self.inside_mask.ravel())

    @property
    def n_inside(self) -> int:
        return int(self.inside_mask.sum())

    def centroids(self, indices=None) -> np.ndarray:
        """Centroids of the given flat indices (all pixels by default)."""
        if indices is None:
            indices = np.arange(self.n_pixels)
        indices = np.asarray(indices, dtype=np.int64)
        iy, ix = np.divmod(indices, self.nx)
        x = self.origin[0] + (ix + 0.5) * self.side
        y = self.origin[1] + (iy + 0.5) * self.side
        return np.column_stack([x, y])

    def locate(self, points) -> np.ndarray:
        """Flat index of the pixel containing each point, -1 if off-grid."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ix = np.floor((pts[:, 0] - self.origin[0]) / self.side).astype(np.int64)
        iy = np.floor((pts[:, 1] - self.origin[1]) / self.side).astype(np.int64)
        ok = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return np.where(ok, iy * self.nx + ix, -1)

    def ixiy(self, indices) -> tuple[np.ndarray, np.ndarray]:
        iy, ix = np.divmod(np.asarray(indices, dtype=np.int64), self.nx)
        return ix, iy

    def neighbours(self, index: int) -> list[int]:
        """In-grid NWSE neighbours of a pixel, in the order E, W, N, S."""
        iy, ix = divmod(int(index), self.nx)
        out = []
        if ix + 1 < self.nx:
            out.append(index + 1)
        if ix > 0:
            out.append(index - 1)
        if iy + 1 < self.ny:
            out.append(index + self.nx)
        if iy > 0:
            out.append(index - self.nx)
        return out

    def key(self) -> dict:
        """Parameters identifying the grid, used in cache keys and reports."""
        return {"origin": [float(self.origin[0]), float(self.origin[1])],
                "side": float(self.side), "nx": self.nx, "ny": self.ny,
                "n_inside": self.n_inside}


class PixelSet:
    """Immutable, sorted, duplicate-free set of flat pixel indices."""

    __slots__ = ("_idx",)

    def __init__(self, indices: Iterable[int] = ()):
        idx = np.unique(np.asarray(list(indices) if not isinstance(indices, np.ndarray)
                                   else indices, dtype=np.int64))
        idx.setflags(write=False)
        self._idx = idx

    @classmethod
    def from_mask(cls, mask) -> "PixelSet":
        return cls(np.flatnonzero(np.asarray(mask, dtype=bool).ravel()))

    @property
    def indices(self) -> np.ndarray:
        return self._idx

    def mask(self, grid: PixelGrid) -> np.ndarray:
        m = np.zeros(grid.n_pixels, dtype=bool)
        m[self._idx] = True
        return m.reshape(grid.ny, grid.nx)

    def area(self, grid: PixelGrid) -> float:
        return len(self) * grid.pixel_area

    def check_within(self, grid: PixelGrid) -> None:
        if len(self) == 0:
            return
        if self._idx[0] < 0 or self._idx[-1] >= grid.n_pixels:
            raise ParameterError("pixel index out of grid range")
        if not grid.inside_mask.ravel()[self._idx].all():
            raise ParameterError("pixel set contains pixels outside the domain")

    def __len__(self):
        return int(self._idx.size)

    def __iter__(self):
        return iter(self._idx.tolist())

    def __contains__(self, item):
        pos = np.searchsorted(self._idx, item)
        return bool(pos < self._idx.size and self._idx[pos] == item)

    def __eq__(self, other):
        if not isinstance(other, PixelSet):
            return NotImplemented
        return np.array_equal(self._idx, other._idx)

    def __hash__(self):
        return hash(self._idx.tobytes())

    def __or__(self, other: "PixelSet") -> "PixelSet":
        return PixelSet(np.union1d(self._idx, other._idx))

    def __and__(self, other: "PixelSet") -> "PixelSet":
        return PixelSet(np.intersect1d(self._idx, other._idx))

    def __sub__(self, other: "PixelSet") -> "PixelSet":
        return PixelSet(np.setdiff1d(self._idx, other._idx))

    def __le__(self, other: "PixelSet") -> bool:
        return bool(np.isin(self._idx, other._idx).all())

    def __ge__(self, other: "PixelSet") -> bool:
        return other <= self

    def __repr__(self):
        return f"PixelSet(n={len(self)})"


# -- shapes -----------------------------------------------------------------

@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ParameterError(f"disk radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d2 = (pts[:, 0] - self.center[0]) ** 2 + (pts[:, 1] - self.center[1]) ** 2
        return d2 < self.radius ** 2

    def outline(self, n: int = 256) -> np.ndarray:
        t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return np.column_stack([self.center[0] + self.radius * np.cos(t),
                                self.center[1] + self.radius * np.sin(t)])

    def to_dict(self) -> dict:
        return {"shape": "disk", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Polygon:
    """Simple polygon with counterclockwise vertices."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise ParameterError("polygon needs at least 3 vertices")
        poly = shapely.Polygon(verts)
        if not poly.is_valid or poly.area <= 0:
            raise ParameterError("polygon is degenerate or self-intersecting")
        if not poly.exterior.is_ccw:
            raise ParameterError("polygon vertices must be counterclockwise")
        object.__setattr__(self, "vertices", verts)

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        poly = shapely.Polygon(self.vertices)
        return shapely.contains_xy(poly, pts[:, 0], pts[:, 1])

    def outline(self, n: int = 0) -> np.ndarray:
        return np.asarray(self.vertices)

    def to_dict(self) -> dict:
        return {"shape": "polygon", "vertices": [list(v) for v in self.vertices]}


Shape = Disk | Polygon


def regular_polygon(center, radius, n, rotation=0.0) -> Polygon:
    t = rotation + 2 * np.pi * np.arange(n) / n
    return Polygon(tuple(zip(center[0] + radius * np.cos(t), center[1] + radius * np.sin(t))))


def shape_from_dict(d: dict) -> Shape:
    kind = d.get("shape")
    if kind == "disk":
        return Disk(tuple(d["center"]), float(d["radius"]))
    if kind == "polygon":
        return Polygon(tuple(tuple(v) for v in d["vertices"]))
    if kind == "regular_polygon":
        return regular_polygon(d["center"], float(d["radius"]), int(d["n"]),
                               float(d.get("rotation", 0.0)))
    raise ParameterError(f"unknown shape kind {kind!r}")


# -- phantom ----------------------------------------------------------------

@dataclass(frozen=True)
class Phantom:
    """Background conductivity with signed piecewise-constant inclusions.

    The conductivity is ``background + k+ on D+ - k- on D-``. Note that the
    technical condition on the outer boundaries of D+ and D- (any boundary
    neighbourhood contains a ball missing one of the parts) is not checked.
    """

    background: float
    positives: tuple[tuple[Shape, float], ...] = ()
    negatives: tuple[tuple[Shape, float], ...] = ()

    def __post_init__(self):
        if not self.background > 0:
            raise ParameterError("background conductivity must be positive")
        for _, amp in self.positives + self.negatives:
            if not amp > 0:
                raise ParameterError(f"inclusion amplitudes must be positive, got {amp}")
        if self.negatives and max(a for _, a in self.negatives) >= self.background:
            raise ParameterError("negative amplitude must stay below the background")

    @property
    def max_positive(self) -> float:
        return max((a for _, a in self.positives), default=0.0)

    @property
    def max_negative(self) -> float:
        return max((a for _, a in self.negatives), default=0.0)

    def conductivity(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(pts), float(self.background))
        for shape, amp in self.positives:
            out[shape.contains(pts)] += amp
        for shape, amp in self.negatives:
            out[shape.contains(pts)] -= amp
        return out

    def rasterize(self, grid: PixelGrid) -> tuple[PixelSet, PixelSet]:
        """Rasterized positive and negative parts."""
        pos = PixelSet()
        for shape, _ in self.positives:
            pos = pos | rasterize(shape, grid)
        neg = PixelSet()
        for shape, _ in self.negatives:
            neg = neg | rasterize(shape, grid)
        return pos, neg

    def check_disjoint(self, grid: PixelGrid) -> None:
        shapes = [s for s, _ in self.positives + self.negatives]
        cents = grid.centroids()
        hits = np.zeros(len(cents), dtype=int)
        for s in shapes:
            hits += s.contains(cents)
        if (hits > 1).any():
            raise ParameterError("phantom shapes overlap on the pixel grid")

    def to_dict(self) -> dict:
        return {"background": self.background,
                "positives": [dict(s.to_dict(), amplitude=a) for s, a in self.positives],
                "negatives": [dict(s.to_dict(), amplitude=a) for s, a in self.negatives]}

    @classmethod
    def from_dict(cls, d: dict) -> "Phantom":
        pos = tuple((shape_from_dict(e), float(e["amplitude"])) for e in d.get("positives", []))
        neg = tuple((shape_from_dict(e), float(e["amplitude"])) for e in d.get("negatives", []))
        return cls(float(d.get("background", 1.0)), pos, neg)


@dataclass(frozen=True)
class BetaBounds:
    beta: float
    beta_lower: float
    beta_upper: float

    def __post_init__(self):
        if not (self.beta > 0 and self.beta_lower > 0 and self.beta_upper > 0):
            raise ParameterError("beta bounds must be positive")
        if self.beta_lower > self.beta_upper:
            raise ParameterError("beta_lower exceeds beta_upper")

    @property
    def negative_contrast(self) -> float:
        """Largest admissible negative amplitude, beta/(1+beta) * beta_lower."""
        return self.beta / (1.0 + self.beta) * self.beta_lower


# -- grid operations --------------------------------------------------------

def build_grid(domain_radius: float, side: float, center=(0.0, 0.0)) -> PixelGrid:
    """Pixel grid over the bounding square of a disk, centroid rule for membership."""
    if not side > 0:
        raise ParameterError(f"pixel side must be positive, got {side}")
    if not domain_radius > 0:
        raise ParameterError("domain radius must be positive")
    if side > domain_radius * (1 + 1e-12):
        raise ParameterError("pixel side must not exceed the domain radius")
    n = int(math.ceil(2 * domain_radius / side - 1e-9))
    origin = (center[0] - domain_radius, center[1] - domain_radius)
    ix = np.arange(n)
    x = origin[0] + (ix + 0.5) * side - center[0]
    y = origin[1] + (ix + 0.5) * side - center[1]
    inside = (x[None, :] ** 2 + y[:, None] ** 2) < domain_radius ** 2
    return PixelGrid(origin, float(side), n, n, inside)


def rasterize(shape: Shape, grid: PixelGrid) -> PixelSet:
    """Inside pixels whose centroid lies in the shape."""
    cand = grid.inside_indices
    hit = shape.contains(grid.centroids(cand))
    return PixelSet(cand[hit])


def _exterior_reached(set_mask: np.ndarray, grid: PixelGrid) -> np.ndarray:
    """Inside pixels outside the set that are 4-connected to the exterior."""
    free = grid.inside_mask & ~set_mask
    passable = np.pad(free | ~grid.inside_mask, 1, constant_values=True)
    labels, _ = ndimage.label(passable, structure=_CROSS)
    exterior = np.pad(~grid.inside_mask, 1, constant_values=True)
    ext_labels = np.unique(labels[exterior])
    reached = np.isin(labels, ext_labels[ext_labels > 0])[1:-1, 1:-1]
    return reached & free


def complement_connected(pset: PixelSet, grid: PixelGrid) -> bool:
    """True iff every inside pixel not in the set can reach the exterior."""
    m = pset.mask(grid)
    free = grid.inside_mask & ~m
    return bool(np.array_equal(_exterior_reached(m, grid), free))


def outer_support(pset: PixelSet, grid: PixelGrid) -> PixelSet:
    """The set together with every inside pixel it encloses."""
    m = pset.mask(grid)
    reached = _exterior_reached(m, grid)
    return PixelSet.from_mask(grid.inside_mask & ~reached)


def frontier(pset: PixelSet, grid: PixelGrid) -> PixelSet:
    """Members of the set with at least one NWSE neighbour outside the set."""
    m = np.pad(pset.mask(grid), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return PixelSet.from_mask(core & ~interior)


def dilate(pset: PixelSet, grid: PixelGrid, steps: int = 1) -> PixelSet:
    """8-neighbourhood dilation restricted to inside pixels."""
    if steps <= 0 or len(pset) == 0:
        return pset
    m = ndimage.binary_dilation(pset.mask(grid), structure=_SQUARE, iterations=steps)
    return PixelSet.from_mask(m & grid.inside_mask)


def write_pixel_csv(path, pset: PixelSet, grid: PixelGrid) -> None:
    ix, iy = grid.ixiy(pset.indices)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ix", "iy"])
        w.writerows(zip(ix.tolist(), iy.tolist()))


def read_pixel_csv(path, grid: PixelGrid) -> PixelSet:
    idx = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        for lineno, row in enumerate(rows, start=1):
            if lineno == 1 and row[:2] == ["ix", "iy"]:
                continue
            try:
                ix, iy = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: line {lineno}: expected two integers") from exc
            if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
                raise FormatError(f"{path}: line {lineno}: pixel ({ix}, {iy}) off grid")
            idx.append(iy * grid.nx + ix)
    out = PixelSet(idx)
    out.check_within(grid)
    return out


def inside_set(grid: PixelGrid) -> PixelSet:
    return PixelSet(grid.inside_indices)


def pixels_from_ixiy(grid: PixelGrid, pairs: Sequence[tuple[int, int]]) -> PixelSet:
    return PixelSet([iy * grid.nx + ix for ix, iy in pairs])
