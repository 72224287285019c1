"""Binary PPM rasters of reconstructions with phantom outlines.

Each grid pixel becomes a ``scale x scale`` block: white background, dark
positive part, mid-gray negative part. Phantom outlines are traced at image
resolution (red for positive, blue for negative shapes) and the domain
boundary in light gray. Output bytes depend only on the inputs.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import Phantom, PixelGrid, PixelSet

WHITE = (255, 255, 255)
POSITIVE = (40, 40, 40)
NEGATIVE = (150, 150, 150)
POSITIVE_OUTLINE = (220, 0, 0)
NEGATIVE_OUTLINE = (0, 70, 220)
DOMAIN_OUTLINE = (200, 200, 200)


def _edges(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with a 4-neighbour outside it."""
    pad = np.pad(mask, 1, constant_values=False)
    inner = pad[1:-1, 1:-1]
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return inner & ~interior


def render_image(grid: PixelGrid, positive: PixelSet, negative: PixelSet,
                 phantom: Phantom | None = None, scale: int = 8) -> np.ndarray:
    """RGB array of shape (rows, cols, 3), row 0 at the top (largest y)."""
    img = np.empty((grid.ny * scale, grid.nx * scale, 3), dtype=np.uint8)
    img[:] = WHITE
    block = np.ones((scale, scale), dtype=bool)
    for pset, color in ((negative, NEGATIVE), (positive, POSITIVE)):
        mask = np.kron(pset.mask(grid), block).astype(bool)
        img[mask[::-1]] = color

    # sample points at image-pixel centres, in grid coordinates
    n_rows, n_cols = img.shape[:2]
    step = grid.side / scale
    xs = grid.origin[0] + (np.arange(n_cols) + 0.5) * step
    ys = grid.origin[1] + (np.arange(n_rows) + 0.5) * step
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    radius = grid.side * grid.nx / 2.0
    cx, cy = grid.origin[0] + radius, grid.origin[1] + radius
    domain = ((pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2 < radius ** 2).reshape(X.shape)
    img[_edges(domain)[::-1]] = DOMAIN_OUTLINE
    if phantom is not None:
        for shapes, color in ((phantom.negatives, NEGATIVE_OUTLINE),
                              (phantom.positives, POSITIVE_OUTLINE)):
            for shape, _ in shapes:
                inside = shape.contains(pts).reshape(X.shape)
                img[_edges(inside)[::-1]] = color
    return img


def ppm_bytes(img: np.ndarray, comments: tuple[str, ...] = ()) -> bytes:
    rows, cols = img.shape[:2]
    head = "P6\n" + "".join(f"# {c}\n" for c in comments) + f"{cols} {rows}\n255\n"
    return head.encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def write_ppm(path, img: np.ndarray, comments: tuple[str, ...] = ()) -> None:
    Path(path).write_bytes(ppm_bytes(img, comments))


def read_ppm(path) -> tuple[np.ndarray, list[str]]:
    """Parse a binary PPM written by :func:`write_ppm`; returns (image, comments)."""
    data = Path(path).read_bytes()
    tokens, comments = [], []
    pos = 0
    try:
        while len(tokens) < 4:
            end = data.index(b"\n", pos)
            line = data[pos:end].decode("ascii")
            pos = end + 1
            if line.startswith("#"):
                comments.append(line[1:].strip())
            else:
                tokens += line.split()
        if tokens[0] != "P6" or tokens[3] != "255":
            raise ValueError
        cols, rows = int(tokens[1]), int(tokens[2])
        img = np.frombuffer(data[pos:pos + rows * cols * 3], dtype=np.uint8).reshape(rows, cols, 3)
    except (ValueError, UnicodeDecodeError):
        raise FormatError(f"{path}: not an 8-bit binary PPM written by this package") from None
    return img, comments
