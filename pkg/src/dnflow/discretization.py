"""Staggered box grids with an exactly adjoint gradient/divergence pair.

Vector fields live on interior nodes (the boundary value is an implicit
zero); matrix fields live on cells.  The gradient on a cell is the forward
difference along each axis averaged over the cell's other edges, and the
divergence is built as the negative transpose of that map, so

    <gradient(v), P>_cells == -<v, divergence(P)>_nodes

holds up to rounding for every zero-boundary ``v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "Grid",
    "VectorField",
    "MatrixField",
    "GridMismatch",
    "gradient",
    "divergence",
    "inner",
    "inner_cells",
    "write_snapshot",
    "read_snapshot",
]


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform box ``origin + [0, extents]`` split into ``cells`` per axis."""

    extents: tuple
    cells: tuple
    origin: tuple = None
    h: float = field(init=False)

    def __post_init__(self):
        ext = tuple(float(e) for e in np.atleast_1d(self.extents))
        cells = tuple(int(c) for c in np.atleast_1d(self.cells))
        if len(ext) != len(cells) or len(ext) not in (1, 2):
            raise ValueError("grid must be 1-D or 2-D with one extent per axis")
        if min(cells) < 2 or min(ext) <= 0:
            raise ValueError("need at least two cells and positive extents per axis")
        spacings = [e / c for e, c in zip(ext, cells)]
        if max(spacings) - min(spacings) > 1e-12 * max(spacings):
            raise ValueError(f"spacing must be uniform across axes, got {spacings}")
        origin = (0.0,) * len(ext) if self.origin is None else tuple(
            float(o) for o in np.atleast_1d(self.origin)
        )
        if len(origin) != len(ext):
            raise ValueError("origin has wrong dimension")
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "h", spacings[0])

    @classmethod
    def unit(cls, n: int, cells_per_side: int) -> "Grid":
        return cls((1.0,) * n, (cells_per_side,) * n)

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def weight(self) -> float:
        """Quadrature weight h^n of a node or a cell."""
        return self.h**self.n

    @property
    def interior_shape(self) -> tuple:
        return tuple(c - 1 for c in self.cells)

    @property
    def node_shape(self) -> tuple:
        return tuple(c + 1 for c in self.cells)

    def _axis(self, a: int, offset: float, count: int) -> np.ndarray:
        return self.origin[a] + (np.arange(count) + offset) * self.h

    def node_coords(self) -> np.ndarray:
        """Interior node positions, shape ``(*interior_shape, n)`` in C order."""
        axes = [self._axis(a, 1.0, c - 1) for a, c in enumerate(self.cells)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def all_node_coords(self) -> np.ndarray:
        axes = [self._axis(a, 0.0, c + 1) for a, c in enumerate(self.cells)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_coords(self) -> np.ndarray:
        axes = [self._axis(a, 0.5, c) for a, c in enumerate(self.cells)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def boundary_nodes(self) -> np.ndarray:
        """Multi-indices of boundary nodes, lexicographically ordered."""
        idx = np.indices(self.node_shape).reshape(self.n, -1).T
        on_edge = np.any((idx == 0) | (idx == np.array(self.cells)), axis=1)
        return idx[on_edge]

    def contains_box(self, lo: Sequence[float], hi: Sequence[float], slack=1e-12) -> bool:
        tol = slack * max(1.0, max(self.extents))
        return all(
            lo[a] >= self.origin[a] - tol and hi[a] <= self.origin[a] + self.extents[a] + tol
            for a in range(self.n)
        )

    # array-level operators; node arrays are (*interior_shape, m), cell
    # arrays are (*cells, m, n)

    def pad(self, v: np.ndarray) -> np.ndarray:
        """Zero-extend interior node values to the full node array."""
        widths = [(1, 1)] * self.n + [(0, 0)] * (v.ndim - self.n)
        return np.pad(v, widths)

    def grad(self, v: np.ndarray) -> np.ndarray:
        full = self.pad(v)
        comps = []
        for a in range(self.n):
            d = np.diff(full, axis=a) / self.h
            for b in range(self.n):
                if b != a:
                    d = 0.5 * (_take(d, b, 1, None) + _take(d, b, 0, -1))
            comps.append(d)
        return np.stack(comps, axis=-1)

    def div(self, P: np.ndarray) -> np.ndarray:
        total = None
        for a in range(self.n):
            y = P[..., a]
            for b in range(self.n):
                if b != a:
                    yp = _pad_axis(y, b)
                    y = 0.5 * (_take(yp, b, 1, None) + _take(yp, b, 0, -1))
            yp = _pad_axis(y, a)
            # transpose of the forward difference
            t = (_take(yp, a, 0, -1) - _take(yp, a, 1, None)) / self.h
            total = -t if total is None else total - t
        interior = tuple(slice(1, -1) for _ in range(self.n))
        return total[interior]

    def nodes_to_cells(self, v: np.ndarray) -> np.ndarray:
        """Average of the 2^n corner values of each cell (zero boundary)."""
        full = self.pad(v)
        for a in range(self.n):
            full = 0.5 * (_take(full, a, 1, None) + _take(full, a, 0, -1))
        return full

    def inner(self, v: np.ndarray, w: np.ndarray) -> float:
        return float(self.weight * np.sum(v * w))


def _take(x: np.ndarray, axis: int, start, stop) -> np.ndarray:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    return x[tuple(sl)]


def _pad_axis(x: np.ndarray, axis: int) -> np.ndarray:
    widths = [(0, 0)] * x.ndim
    widths[axis] = (1, 1)
    return np.pad(x, widths)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == self.grid.n:
            vals = vals[..., None]
        if vals.shape[:-1] != self.grid.interior_shape:
            raise GridMismatch(
                f"values shape {vals.shape} does not match interior nodes "
                f"{self.grid.interior_shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("vector field has non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def from_function(cls, grid: Grid, f) -> "VectorField":
        """Sample ``f(x)`` (x of shape (..., n)) at interior nodes."""
        return cls(grid, np.asarray(f(grid.node_coords()), dtype=float))

    @classmethod
    def zeros(cls, grid: Grid, m: int = 1) -> "VectorField":
        return cls(grid, np.zeros(grid.interior_shape + (m,)))


@dataclass(frozen=True, eq=False)
class MatrixField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[: self.grid.n] != self.grid.cells or vals.shape[-1] != self.grid.n:
            raise GridMismatch(f"matrix field shape {vals.shape} does not fit grid")
        object.__setattr__(self, "values", vals)

    @property
    def m(self) -> int:
        return self.values.shape[-2]


FieldLike = Union[VectorField, MatrixField]


def gradient(v: VectorField) -> MatrixField:
    return MatrixField(v.grid, v.grid.grad(v.values))


def divergence(P: MatrixField) -> VectorField:
    return VectorField(P.grid, P.grid.div(P.values))


def _same_grid(a: FieldLike, b: FieldLike) -> Grid:
    if a.grid != b.grid or a.values.shape != b.values.shape:
        raise GridMismatch("fields live on different grids or have different shapes")
    return a.grid


def inner(v: VectorField, w: VectorField) -> float:
    return _same_grid(v, w).inner(v.values, w.values)


def inner_cells(P: MatrixField, Q: MatrixField) -> float:
    return _same_grid(P, Q).inner(P.values, Q.values)


# ---------------------------------------------------------------------------
# snapshots: one row per node or cell, index coordinates then components


def write_snapshot(path: Union[str, Path], f: FieldLike) -> None:
    grid = f.grid
    kind = "vector" if isinstance(f, VectorField) else "matrix"
    vals = f.values
    lead = grid.interior_shape if kind == "vector" else grid.cells
    flat = vals.reshape(math.prod(lead), -1)
    offset = 1 if kind == "vector" else 0
    idx = np.indices(lead).reshape(grid.n, -1).T + offset
    lines = [
        f"# kind={kind} n={grid.n} cells={','.join(map(str, grid.cells))} "
        f"extents={','.join(map(repr, grid.extents))} "
        f"origin={','.join(map(repr, grid.origin))} "
        f"components={flat.shape[1]}"
    ]
    for ij, row in zip(idx, flat):
        lines.append(" ".join([*map(str, ij), *(repr(float(x)) for x in row)]))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str) -> dict:
    out = {}
    for tok in line.lstrip("#").split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def read_snapshot(path: Union[str, Path], grid: Optional[Grid] = None) -> FieldLike:
    """Inverse of :func:`write_snapshot`; values round-trip bit for bit."""
    text = Path(path).read_text().splitlines()
    head = _parse_header(text[0])
    if grid is None:
        grid = Grid(
            tuple(float(x) for x in head["extents"].split(",")),
            tuple(int(x) for x in head["cells"].split(",")),
            tuple(float(x) for x in head["origin"].split(",")),
        )
    kind = head["kind"]
    ncomp = int(head["components"])
    rows = [ln.split() for ln in text[1:] if ln.strip()]
    data = np.array([[float(x) for x in r[grid.n:]] for r in rows]).reshape(-1, ncomp)
    if kind == "vector":
        return VectorField(grid, data.reshape(grid.interior_shape + (ncomp,)))
    m = ncomp // grid.n
    return MatrixField(grid, data.reshape(grid.cells + (m, grid.n)))
