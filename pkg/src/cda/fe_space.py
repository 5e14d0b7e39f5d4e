"""Lagrange spaces (P0, P1, P2; scalar or 2-vector) on a TriMesh.

Local ordering for P2: vertex nodes 0..2, then edge nodes 3..5 where node
``3 + k`` sits on the edge opposite vertex ``k``.  Vector spaces are stored
component-blocked: DOF ``c * n_scalar + i`` is component ``c`` of scalar node ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .mesh import TriMesh


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,), sum to 1
    degree: int


def _strang_fix_7() -> QuadratureRule:
    s15 = np.sqrt(15.0)
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [9.0 / 40.0]
    for b, w in (((6 - s15) / 21, (155 - s15) / 1200), ((6 + s15) / 21, (155 + s15) / 1200)):
        a = 1 - 2 * b
        pts += [(a, b, b), (b, a, b), (b, b, a)]
        wts += [w, w, w]
    return QuadratureRule(np.array(pts), np.array(wts), 5)


def _midpoint_3() -> QuadratureRule:
    pts = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    return QuadratureRule(pts, np.full(3, 1 / 3), 2)


def collapsed_gauss(n: int) -> QuadratureRule:
    """Duffy-collapsed tensor Gauss rule, exact to degree ``2n - 2``.

    The collapse Jacobian ``(1 - s)`` costs one degree in ``s``.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1)
    w = 0.5 * w
    s, t = np.meshgrid(x, x, indexing="ij")
    ws, wt = np.meshgrid(w, w, indexing="ij")
    xi = s.ravel()
    eta = (t * (1 - s)).ravel()
    wts = 2.0 * (ws * wt * (1 - s)).ravel()
    pts = np.column_stack([1 - xi - eta, xi, eta])
    return QuadratureRule(pts, wts, 2 * n - 2)


def default_rule() -> QuadratureRule:
    return _strang_fix_7()


def quadrature_rule(degree: int) -> QuadratureRule:
    if degree <= 2:
        return _midpoint_3()
    if degree <= 5:
        return _strang_fix_7()
    return collapsed_gauss((degree + 3) // 2)


N_LOCAL = {0: 1, 1: 3, 2: 6}


def shape_values(order: int, bary: np.ndarray) -> np.ndarray:
    """Basis values at barycentric points, shape (nq, n_local)."""
    L = np.atleast_2d(bary)
    if order == 0:
        return np.ones((len(L), 1))
    if order == 1:
        return L.copy()
    if order == 2:
        l0, l1, l2 = L.T
        return np.column_stack(
            [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1]
        )
    raise SpaceError(f"unsupported element order {order}")


def shape_dbary(order: int, bary: np.ndarray) -> np.ndarray:
    """Derivatives w.r.t. the three barycentric coordinates, shape (nq, n_local, 3)."""
    L = np.atleast_2d(bary)
    nq = len(L)
    if order == 0:
        return np.zeros((nq, 1, 3))
    if order == 1:
        return np.broadcast_to(np.eye(3), (nq, 3, 3)).copy()
    if order == 2:
        l0, l1, l2 = L.T
        d = np.zeros((nq, 6, 3))
        d[:, 0, 0] = 4 * l0 - 1
        d[:, 1, 1] = 4 * l1 - 1
        d[:, 2, 2] = 4 * l2 - 1
        d[:, 3, 1], d[:, 3, 2] = 4 * l2, 4 * l1
        d[:, 4, 2], d[:, 4, 0] = 4 * l0, 4 * l2
        d[:, 5, 0], d[:, 5, 1] = 4 * l1, 4 * l0
        return d
    raise SpaceError(f"unsupported element order {order}")


def grad_barycentric(mesh: TriMesh) -> np.ndarray:
    """Constant gradients of the barycentric coordinates, shape (nt, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
    Jinv = np.linalg.inv(J)  # rows are grad(lambda_1), grad(lambda_2)
    g = np.empty((mesh.n_triangles, 3, 2))
    g[:, 1:] = Jinv
    g[:, 0] = -Jinv.sum(axis=1)
    return g


def _check_bary(bary) -> np.ndarray:
    b = np.asarray(bary, dtype=float)
    if b.shape != (3,):
        raise SpaceError("barycentric point must have three coordinates")
    if np.any(b < -1e-12) or abs(b.sum() - 1.0) > 1e-12:
        raise SpaceError(f"invalid barycentric point {b}")
    return b


@dataclass(frozen=True, eq=False)
class FESpace:
    mesh: TriMesh
    order: int
    arity: int
    continuous: bool
    scalar_dof_map: np.ndarray  # (nt, n_local)
    n_scalar: int
    nodes: np.ndarray  # (n_scalar, 2) geometric node of each scalar DOF
    boundary_nodes: dict = field(repr=False)  # tag -> scalar node indices

    @property
    def n_local(self) -> int:
        return N_LOCAL[self.order]

    @property
    def n_dofs(self) -> int:
        return self.n_scalar * self.arity

    @cached_property
    def dof_map(self) -> np.ndarray:
        """Global DOFs per triangle, component-blocked, shape (nt, arity * n_local)."""
        return np.hstack([self.scalar_dof_map + c * self.n_scalar for c in range(self.arity)])

    @cached_property
    def dirichlet_pairs(self) -> list[tuple[int, int]]:
        """(DOF, boundary tag) pairs; corner nodes carry one pair per adjacent side."""
        pairs = []
        for tag, nodes in sorted(self.boundary_nodes.items()):
            for c in range(self.arity):
                pairs.extend((int(i) + c * self.n_scalar, tag) for i in nodes)
        return pairs

    def dirichlet_dofs(self, tags=(1, 2, 3, 4)) -> np.ndarray:
        return dirichlet_dofs(self, tags)

    def interpolate(self, f, t=None) -> np.ndarray:
        """Nodal interpolation; ``f(x, y[, t])`` returns a scalar or (2, m) array."""
        x, y = self.nodes[:, 0], self.nodes[:, 1]
        vals = np.asarray(f(x, y) if t is None else f(x, y, t), dtype=float)
        vals = np.broadcast_to(vals, (self.arity, self.n_scalar) if self.arity > 1 else (self.n_scalar,))
        return np.ascontiguousarray(vals).reshape(-1).copy()

    def component(self, coeffs: np.ndarray, c: int) -> np.ndarray:
        return coeffs[c * self.n_scalar:(c + 1) * self.n_scalar]

    @cached_property
    def elements(self) -> "ElementData":
        """Element data with the default quadrature rule."""
        return ElementData(self)

    def elements_for(self, degree: int) -> "ElementData":
        """Element data for a rule exact to ``degree``, cached per space."""
        if degree <= 5:
            return self.elements
        cache = self.__dict__.setdefault("_rule_cache", {})
        if degree not in cache:
            cache[degree] = ElementData(self, quadrature_rule(degree))
        return cache[degree]


def build_space(mesh: TriMesh, order: int, arity: int = 1, continuous: bool = True) -> FESpace:
    if order not in N_LOCAL:
        raise SpaceError(f"unsupported element order {order}")
    if arity not in (1, 2):
        raise SpaceError(f"arity must be 1 or 2, got {arity}")
    nt = mesh.n_triangles
    tri = mesh.triangles
    boundary_nodes: dict[int, np.ndarray] = {}

    if order == 0:
        dmap = np.arange(nt)[:, None]
        nodes = mesh.vertices[tri].mean(axis=1)
    elif order == 1 and not continuous:
        dmap = np.arange(3 * nt).reshape(nt, 3)
        nodes = mesh.vertices[tri].reshape(-1, 2)
    elif order == 1:
        dmap = tri.copy()
        nodes = mesh.vertices.copy()
        for tag in np.unique(mesh.boundary_tags):
            e = mesh.boundary_edges[mesh.boundary_tags == tag]
            boundary_nodes[int(tag)] = np.unique(e)
    else:
        if not continuous:
            raise SpaceError("discontinuous P2 is not supported")
        nv = mesh.n_vertices
        dmap = np.hstack([tri, nv + mesh.triangle_edges])
        mids = mesh.vertices[mesh.edges].mean(axis=1)
        nodes = np.vstack([mesh.vertices, mids])
        for tag in np.unique(mesh.boundary_tags):
            sel = mesh.boundary_tags == tag
            verts = np.unique(mesh.boundary_edges[sel])
            boundary_nodes[int(tag)] = np.concatenate([verts, nv + mesh.boundary_edge_ids[sel]])

    return FESpace(
        mesh=mesh,
        order=order,
        arity=arity,
        continuous=continuous or order == 0,
        scalar_dof_map=np.ascontiguousarray(dmap, dtype=np.int64),
        n_scalar=len(nodes),
        nodes=nodes,
        boundary_nodes=boundary_nodes,
    )


def dirichlet_dofs(space: FESpace, tags=(1, 2, 3, 4)) -> np.ndarray:
    """DOFs whose geometric node lies on an edge with one of ``tags``."""
    if space.order == 0 or not space.continuous:
        raise SpaceError("Dirichlet DOFs need a continuous space of order >= 1")
    tags = {tags} if isinstance(tags, int) else set(tags)
    nodes = [v for t, v in space.boundary_nodes.items() if t in tags]
    if not nodes:
        return np.zeros(0, dtype=np.int64)
    scalar = np.unique(np.concatenate(nodes))
    return np.concatenate([scalar + c * space.n_scalar for c in range(space.arity)])


def eval_basis(space: FESpace, triangle: int, point) -> tuple[np.ndarray, np.ndarray]:
    """Local basis values and gradients w.r.t. reference coordinates (xi, eta).

    The reference map is ``lambda = (1 - xi - eta, xi, eta)``.  For vector spaces
    the local functions are component-blocked and values have shape (2 n_local, 2).
    """
    if not 0 <= triangle < space.mesh.n_triangles:
        raise SpaceError(f"triangle index {triangle} out of range")
    b = _check_bary(point)
    vals = shape_values(space.order, b)[0]
    db = shape_dbary(space.order, b)[0]
    ref = np.column_stack([db[:, 1] - db[:, 0], db[:, 2] - db[:, 0]])
    if space.arity == 1:
        return vals, ref
    n = len(vals)
    v = np.zeros((2 * n, 2))
    v[:n, 0] = vals
    v[n:, 1] = vals
    g = np.zeros((2 * n, 2, 2))  # (local, component, reference direction)
    g[:n, 0] = ref
    g[n:, 1] = ref
    return v, g


class ElementData:
    """Per-triangle quadrature data for a scalar space: points, weights, values, gradients."""

    def __init__(self, space: FESpace, rule: QuadratureRule | None = None):
        rule = rule or default_rule()
        mesh = space.mesh
        self.rule = rule
        self.space = space
        self.values = shape_values(space.order, rule.points)  # (nq, nl)
        glam = grad_barycentric(mesh)
        db = shape_dbary(space.order, rule.points)  # (nq, nl, 3)
        self.grads = np.einsum("qak,tkd->tqad", db, glam)  # (nt, nq, nl, 2)
        self.jxw = mesh.areas[:, None] * rule.weights[None, :]  # (nt, nq)
        p = mesh.vertices[mesh.triangles]
        self.points = np.einsum("qk,tkd->tqd", rule.points, p)  # (nt, nq, 2)

    def field_values(self, coeffs: np.ndarray) -> np.ndarray:
        """Scalar field at quadrature points, (nt, nq)."""
        return coeffs[self.space.scalar_dof_map] @ self.values.T

    def field_grads(self, coeffs: np.ndarray) -> np.ndarray:
        """Scalar field gradient at quadrature points, (nt, nq, 2)."""
        return np.einsum("ta,tqad->tqd", coeffs[self.space.scalar_dof_map], self.grads)
