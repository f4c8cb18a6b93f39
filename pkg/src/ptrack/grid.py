"""Structured rectilinear grid geometry.

Cell ``(i, j, k)`` has dense id ``i + nx * (j + ny * k)``; per-cell arrays are
shaped ``(nz, ny, nx)`` so that ``arr.ravel()[cell_id]`` addresses the cell.
The z axis points up and ``k = 0`` is the *bottom* layer, so ``dz[k]`` lists
thicknesses bottom to top. Layer numbers reported in output files follow the
MODFLOW convention (1 = top layer), see :meth:`Grid.layer_number`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

BOUNDARY = -1
"""Marker returned by :func:`neighbor` for faces on the domain hull."""


class GridError(ValueError):
    pass


class Face(enum.IntEnum):
    """Cell faces; ``axis = face // 2`` and ``side = face % 2`` (0 low, 1 high)."""

    X_LOW = 0
    X_HIGH = 1
    Y_LOW = 2
    Y_HIGH = 3
    Z_LOW = 4
    Z_HIGH = 5

    @property
    def axis(self) -> int:
        return int(self) // 2

    @property
    def side(self) -> int:
        return int(self) % 2

    @property
    def opposite(self) -> "Face":
        return Face(int(self) ^ 1)


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: tuple[float, ...]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    zbot: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 1:
                raise GridError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.dx > 0 and self.dy > 0):
            raise GridError(f"spacings must be positive, got dx={self.dx}, dy={self.dy}")
        if len(self.dz) != self.nz:
            raise GridError(f"dz has {len(self.dz)} entries for nz={self.nz}")
        if any(not d > 0 for d in self.dz):
            raise GridError(f"layer thicknesses must be positive, got {self.dz}")
        zbot = np.concatenate([[0.0], np.cumsum(self.dz)])
        zbot.setflags(write=False)
        object.__setattr__(self, "zbot", zbot)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def ncells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def extent(self) -> tuple[float, float, float]:
        return (self.nx * self.dx, self.ny * self.dy, float(self.zbot[-1]))

    @property
    def dz_array(self) -> np.ndarray:
        return np.asarray(self.dz, dtype=np.float64)

    def cell_id(self, i: int, j: int, k: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny and 0 <= k < self.nz):
            raise GridError(f"cell index ({i}, {j}, {k}) outside grid {self.nx}x{self.ny}x{self.nz}")
        return i + self.nx * (j + self.ny * k)

    def ijk(self, cell: int) -> tuple[int, int, int]:
        cell = int(cell)
        if not 0 <= cell < self.ncells:
            raise GridError(f"cell id {cell} outside [0, {self.ncells})")
        i = cell % self.nx
        j = (cell // self.nx) % self.ny
        k = cell // (self.nx * self.ny)
        return i, j, k

    def layer_number(self, k):
        """1-based layer number counted from the top (works on arrays)."""
        return self.nz - k

    def cell_size(self, cell: int) -> tuple[float, float, float]:
        _, _, k = self.ijk(cell)
        return (self.dx, self.dy, self.dz[k])

    def cell_volumes(self) -> np.ndarray:
        vol = self.dx * self.dy * self.dz_array
        return np.broadcast_to(vol[:, None, None], self.shape).copy()

    def face_area(self, cell: int, face: Face) -> float:
        _, _, k = self.ijk(cell)
        axis = Face(face).axis
        if axis == 0:
            return self.dy * self.dz[k]
        if axis == 1:
            return self.dx * self.dz[k]
        return self.dx * self.dy

    def global_position(self, cell: int, local) -> np.ndarray:
        i, j, k = self.ijk(cell)
        xl, yl, zl = local
        ox, oy, oz = self.origin
        return np.array([
            ox + (i + xl) * self.dx,
            oy + (j + yl) * self.dy,
            oz + self.zbot[k] + zl * self.dz[k],
        ])

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ox, oy, oz = self.origin
        xc = ox + (np.arange(self.nx) + 0.5) * self.dx
        yc = oy + (np.arange(self.ny) + 0.5) * self.dy
        zc = oz + 0.5 * (self.zbot[:-1] + self.zbot[1:])
        return xc, yc, zc


def build_structured(nx, ny, nz, dx, dy, dz_list, origin=(0.0, 0.0, 0.0)) -> Grid:
    """Build a grid; ``dz_list`` is ordered bottom layer first."""
    if np.isscalar(origin):
        origin = (float(origin),) * 3
    try:
        dz = tuple(float(d) for d in dz_list)
    except TypeError:
        raise GridError(f"dz_list must be a sequence, got {dz_list!r}") from None
    return Grid(int(nx), int(ny), int(nz), float(dx), float(dy), dz,
                tuple(float(o) for o in origin))


_STEP = {
    Face.X_LOW: (-1, 0, 0), Face.X_HIGH: (1, 0, 0),
    Face.Y_LOW: (0, -1, 0), Face.Y_HIGH: (0, 1, 0),
    Face.Z_LOW: (0, 0, -1), Face.Z_HIGH: (0, 0, 1),
}


def neighbor(grid: Grid, cell: int, face: Face) -> int:
    """Cell across ``face``, or :data:`BOUNDARY` on the domain hull."""
    i, j, k = grid.ijk(cell)
    di, dj, dk = _STEP[Face(face)]
    i, j, k = i + di, j + dj, k + dk
    if 0 <= i < grid.nx and 0 <= j < grid.ny and 0 <= k < grid.nz:
        return grid.cell_id(i, j, k)
    return BOUNDARY


def _locate_axis(u: float, n: int, size: float, bounds: np.ndarray | None = None):
    # points on an interior face go to the higher-index cell; the far hull
    # face belongs to the last cell
    if bounds is None:
        idx = min(int(np.floor(u / size)), n - 1)
        return idx, (u - idx * size) / size
    idx = int(np.searchsorted(bounds, u, side="right")) - 1
    idx = min(max(idx, 0), n - 1)
    return idx, (u - bounds[idx]) / (bounds[idx + 1] - bounds[idx])


def locate(grid: Grid, point) -> tuple[int, tuple[float, float, float]]:
    """Cell id and local coordinates in ``[0, 1]^3`` of a global point."""
    p = np.asarray(point, dtype=np.float64) - np.asarray(grid.origin)
    ext = grid.extent
    if np.any(p < 0) or np.any(p > np.asarray(ext)) or not np.all(np.isfinite(p)):
        raise GridError(f"point {tuple(point)} outside domain [0, {ext}] from origin {grid.origin}")
    i, xl = _locate_axis(p[0], grid.nx, grid.dx)
    j, yl = _locate_axis(p[1], grid.ny, grid.dy)
    k, zl = _locate_axis(p[2], grid.nz, 0.0, grid.zbot)
    return grid.cell_id(i, j, k), (float(xl), float(yl), float(zl))


def _locate_axis_many(u, n, size, bounds=None):
    if bounds is None:
        idx = np.minimum(np.floor(u / size).astype(np.int64), n - 1)
        return idx, (u - idx * size) / size
    idx = np.clip(np.searchsorted(bounds, u, side="right") - 1, 0, n - 1)
    return idx, (u - bounds[idx]) / (bounds[idx + 1] - bounds[idx])


def locate_many(grid: Grid, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`locate`: cell ids ``(n,)`` and local coordinates ``(n, 3)``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(grid.origin)
    ext = np.asarray(grid.extent)
    bad = ~np.all(np.isfinite(p) & (p >= 0) & (p <= ext), axis=1)
    if bad.any():
        q = tuple(p[np.argmax(bad)] + np.asarray(grid.origin))
        raise GridError(f"point {q} outside domain [0, {tuple(ext)}] from origin {grid.origin}")
    i, xl = _locate_axis_many(p[:, 0], grid.nx, grid.dx)
    j, yl = _locate_axis_many(p[:, 1], grid.ny, grid.dy)
    k, zl = _locate_axis_many(p[:, 2], grid.nz, 0.0, grid.zbot)
    return i + grid.nx * (j + grid.ny * k), np.column_stack([xl, yl, zl])
