"""Structured triangulations of rectangles and the uniform coarse observation grid."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

LEFT, RIGHT, BOTTOM, TOP = 1, 2, 3, 4
SIDE_TAGS = {"left": LEFT, "right": RIGHT, "bottom": BOTTOM, "top": TOP}


class MeshError(ValueError):
    pass


class OutOfDomainError(MeshError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Conforming triangulation with tagged boundary edges.

    ``triangles`` are counter-clockwise vertex triples. ``boundary_edges`` holds
    vertex pairs and ``boundary_tags`` their side tag (1=left, 2=right,
    3=bottom, 4=top).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray

    def __post_init__(self):
        for name in ("vertices", "triangles", "boundary_edges", "boundary_tags"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def h_max(self) -> float:
        p = self.vertices[self.triangles]
        lengths = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
        return float(lengths.max())

    @cached_property
    def bbox(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])

    @cached_property
    def _edge_data(self) -> tuple[np.ndarray, np.ndarray]:
        # Local edge k is opposite local vertex k.
        t = self.triangles
        local = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1)
        keys = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs."""
        return self._edge_data[0]

    @property
    def triangle_edges(self) -> np.ndarray:
        """Global edge index of each local edge (edge k opposite vertex k)."""
        return self._edge_data[1]

    @cached_property
    def edge_counts(self) -> np.ndarray:
        """Number of triangles sharing each edge."""
        return np.bincount(self.triangle_edges.ravel(), minlength=len(self.edges))

    @cached_property
    def boundary_edge_ids(self) -> np.ndarray:
        """Global edge index of each boundary edge, aligned with ``boundary_tags``."""
        lookup = {tuple(e): i for i, e in enumerate(self.edges.tolist())}
        keys = np.sort(self.boundary_edges, axis=1)
        return np.array([lookup[tuple(k)] for k in keys.tolist()], dtype=np.int64)

    def validate(self) -> None:
        if np.any(self.signed_areas <= 0.0):
            raise MeshError("triangle with non-positive signed area")
        counts = self.edge_counts
        if np.any(counts > 2):
            raise MeshError("non-manifold edge")
        on_boundary = np.flatnonzero(counts == 1)
        if set(on_boundary.tolist()) != set(self.boundary_edge_ids.tolist()):
            raise MeshError("boundary edges do not match edges with one neighbour")


def build_structured(rect=(0.0, 1.0, 0.0, 1.0), n: int = 1) -> TriMesh:
    """Diagonal-split triangulation of ``rect = (x0, x1, y0, y1)``.

    ``n`` is the number of subdivisions per unit length; each axis gets
    ``round(n * length)`` squares, each split along its SW-NE diagonal.
    """
    x0, x1, y0, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate rectangle {rect}")
    if int(n) != n or n < 1:
        raise MeshError(f"subdivisions per unit length must be a positive integer, got {n}")
    nx = max(1, int(round(n * (x1 - x0))))
    ny = max(1, int(round(n * (y1 - y0))))

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    vid = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    v00 = vid[:-1, :-1].ravel()
    v10 = vid[:-1, 1:].ravel()
    v01 = vid[1:, :-1].ravel()
    v11 = vid[1:, 1:].ravel()
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    edges, tags = [], []
    bottom = vid[0, :]
    right = vid[:, -1]
    top = vid[-1, ::-1]
    left = vid[::-1, 0]
    for side, tag in ((bottom, BOTTOM), (right, RIGHT), (top, TOP), (left, LEFT)):
        edges.append(np.column_stack([side[:-1], side[1:]]))
        tags.append(np.full(len(side) - 1, tag))

    return TriMesh(
        vertices=vertices,
        triangles=triangles.astype(np.int64),
        boundary_edges=np.concatenate(edges).astype(np.int64),
        boundary_tags=np.concatenate(tags).astype(np.int64),
    )


def barycentric_refine(mesh: TriMesh) -> TriMesh:
    """Split every triangle into three around its barycenter."""
    nv = mesh.n_vertices
    centers = mesh.vertices[mesh.triangles].mean(axis=1)
    c = nv + np.arange(mesh.n_triangles)
    t = mesh.triangles
    children = np.stack(
        [
            np.column_stack([t[:, 0], t[:, 1], c]),
            np.column_stack([t[:, 1], t[:, 2], c]),
            np.column_stack([t[:, 2], t[:, 0], c]),
        ],
        axis=1,
    ).reshape(-1, 3)
    return TriMesh(
        vertices=np.vstack([mesh.vertices, centers]),
        triangles=children,
        boundary_edges=mesh.boundary_edges.copy(),
        boundary_tags=mesh.boundary_tags.copy(),
    )


@dataclass(frozen=True)
class CoarseGrid:
    """Uniform rectangular grid; cells are half-open except on the max faces."""

    origin: tuple[float, float]
    cell_size: tuple[float, float]
    counts: tuple[int, int]

    @classmethod
    def covering(cls, mesh: TriMesh, H: float) -> "CoarseGrid":
        if H <= 0:
            raise MeshError(f"coarse cell size must be positive, got {H}")
        x0, x1, y0, y1 = mesh.bbox
        nx = max(1, int(round((x1 - x0) / H)))
        ny = max(1, int(round((y1 - y0) / H)))
        return cls((x0, y0), ((x1 - x0) / nx, (y1 - y0) / ny), (nx, ny))

    @property
    def n_cells(self) -> int:
        return self.counts[0] * self.counts[1]

    @property
    def cell_measures(self) -> np.ndarray:
        return np.full(self.n_cells, self.cell_size[0] * self.cell_size[1])

    def flat_index(self, i, j):
        return np.asarray(j) * self.counts[0] + np.asarray(i)

    def locate(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Flat cell index of each point in an ``(m, 2)`` array."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ij = np.empty(pts.shape, dtype=np.int64)
        for ax in range(2):
            lo = self.origin[ax]
            size = self.cell_size[ax]
            hi = lo + size * self.counts[ax]
            x = pts[:, ax]
            if np.any(x < lo - tol) or np.any(x > hi + tol):
                raise OutOfDomainError("point outside the coarse grid")
            k = np.floor((x - lo) / size).astype(np.int64)
            ij[:, ax] = np.clip(k, 0, self.counts[ax] - 1)
        return self.flat_index(ij[:, 0], ij[:, 1])


def locate_cell(grid: CoarseGrid, point) -> tuple[int, int]:
    """Cell ``(i, j)`` containing ``point``."""
    flat = int(grid.locate(np.asarray(point, dtype=float)[None, :])[0])
    return flat % grid.counts[0], flat // grid.counts[0]
