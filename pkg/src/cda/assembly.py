"""Sparse operators and load vectors of the nudged backward-Euler scheme."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fe_space import ElementData, FESpace, QuadratureRule
from .linalg import finalize


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalParams:
    """Coefficients of the double-diffusive Darcy-Brinkman system.

    ``inv_Da = 0`` encodes an infinite Darcy number (no drag term).
    """

    nu: float = 1.0
    inv_Da: float = 0.0
    kappa: float = 1.0
    Dc: float = 1.0
    beta_T: float = 1.0
    beta_C: float = 1.0
    gravity: tuple[float, float] = (0.0, -1.0)

    def __post_init__(self):
        for name in ("nu", "kappa", "Dc"):
            if not getattr(self, name) > 0:
                raise AssemblyError(f"{name} must be positive, got {getattr(self, name)}")
        if self.inv_Da < 0:
            raise AssemblyError(f"inv_Da must be nonnegative, got {self.inv_Da}")
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))


def _elements(space: FESpace, rule: QuadratureRule | None) -> ElementData:
    return space.elements if rule is None else ElementData(space, rule)


def _scatter(rows_map, cols_map, local, shape) -> sp.csr_matrix:
    nl_r, nl_c = rows_map.shape[1], cols_map.shape[1]
    I = np.repeat(rows_map, nl_c, axis=1).ravel()
    J = np.tile(cols_map, (1, nl_r)).ravel()
    return finalize(sp.coo_matrix((local.ravel(), (I, J)), shape=shape))


def _blocks(space: FESpace, scalar: sp.csr_matrix) -> sp.csr_matrix:
    if space.arity == 1:
        return scalar
    return finalize(sp.block_diag([scalar] * space.arity))


def _same_mesh(*spaces: FESpace):
    mesh = spaces[0].mesh
    if any(s.mesh is not mesh for s in spaces[1:]):
        raise AssemblyError("spaces are defined on different meshes")


def assemble_mass(space: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    ed = _elements(space, rule)
    local = np.einsum("tq,qa,qb->tab", ed.jxw, ed.values, ed.values)
    n = space.n_scalar
    return _blocks(space, _scatter(space.scalar_dof_map, space.scalar_dof_map, local, (n, n)))


def assemble_stiffness(space: FESpace, coeff: float = 1.0, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    if space.order < 1:
        raise AssemblyError("stiffness matrix needs an order >= 1 space")
    ed = _elements(space, rule)
    local = coeff * np.einsum("tq,tqad,tqbd->tab", ed.jxw, ed.grads, ed.grads)
    n = space.n_scalar
    return _blocks(space, _scatter(space.scalar_dof_map, space.scalar_dof_map, local, (n, n)))


def velocity_at_quadrature(w_space: FESpace, w: np.ndarray, rule: QuadratureRule | None = None) -> np.ndarray:
    """Vector field ``w`` at quadrature points, shape (nt, nq, 2)."""
    if w_space.arity != 2:
        raise AssemblyError("convecting field must live on a vector space")
    w = np.asarray(w, dtype=float)
    if w.shape != (w_space.n_dofs,):
        raise AssemblyError(f"convecting field has {w.shape[0]} entries, space has {w_space.n_dofs}")
    ed = _elements(w_space, rule)
    return np.stack([ed.field_values(w_space.component(w, c)) for c in range(2)], axis=-1)


def assemble_convection(space: FESpace, w_space: FESpace, w: np.ndarray,
                        rule: QuadratureRule | None = None) -> sp.csr_matrix:
    """Plain convection matrix ``C_ij = (w . grad phi_j, phi_i)``."""
    _same_mesh(space, w_space)
    wq = velocity_at_quadrature(w_space, w, rule)
    ed = _elements(space, rule)
    adv = np.einsum("tqd,tqbd->tqb", wq, ed.grads)
    local = np.einsum("tq,qa,tqb->tab", ed.jxw, ed.values, adv)
    n = space.n_scalar
    return _blocks(space, _scatter(space.scalar_dof_map, space.scalar_dof_map, local, (n, n)))


def assemble_convection_skew(space: FESpace, w_space: FESpace, w: np.ndarray,
                             rule: QuadratureRule | None = None) -> sp.csr_matrix:
    """Skew-symmetrized convection ``N = (C - C^T) / 2``; ``x^T N x = 0`` exactly."""
    C = assemble_convection(space, w_space, w, rule)
    return finalize(0.5 * (C - C.T))


def assemble_divergence(vel_space: FESpace, p_space: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    """``B[k, i] = (q_k, div phi_i)``, shape (pressure DOFs, velocity DOFs)."""
    _same_mesh(vel_space, p_space)
    if vel_space.arity != 2 or p_space.arity != 1:
        raise AssemblyError("divergence needs a vector velocity space and a scalar pressure space")
    ev = _elements(vel_space, rule)
    ep = _elements(p_space, rule)
    ns = vel_space.n_scalar
    cols = np.hstack([vel_space.scalar_dof_map, vel_space.scalar_dof_map + ns])
    dphi = np.concatenate([ev.grads[..., 0], ev.grads[..., 1]], axis=2)  # (nt, nq, 2 nl)
    local = np.einsum("tq,qa,tqb->tab", ev.jxw, ep.values, dphi)
    return _scatter(p_space.scalar_dof_map, cols, local, (p_space.n_scalar, 2 * ns))


def _load_from_quadrature(space: FESpace, fq: np.ndarray, ed: ElementData) -> np.ndarray:
    """Load vector from a source sampled at quadrature points; fq is (nt, nq) or (nt, nq, 2)."""
    if fq.ndim == 2:
        fq = fq[..., None]
    out = np.zeros(space.n_dofs)
    for c in range(space.arity):
        local = np.einsum("tq,qa,tq->ta", ed.jxw, ed.values, fq[..., c])
        np.add.at(out, space.scalar_dof_map + c * space.n_scalar, local)
    return out


def assemble_load(space: FESpace, f: Callable | float, t: float = 0.0,
                  rule: QuadratureRule | None = None) -> np.ndarray:
    """``(f(., t), phi_i)``; ``f(x, y, t)`` returns a scalar field or a pair of them."""
    ed = _elements(space, rule)
    x, y = ed.points[..., 0], ed.points[..., 1]
    if callable(f):
        vals = np.asarray(f(x, y, t), dtype=float)
    else:
        vals = np.asarray(f, dtype=float)
    if space.arity == 2:
        if vals.ndim == 1:
            vals = vals.reshape(2, 1, 1)
        fq = np.moveaxis(np.broadcast_to(vals, (2,) + x.shape), 0, -1)
    else:
        fq = np.broadcast_to(vals, x.shape)
    return _load_from_quadrature(space, fq, ed)


def assemble_buoyancy_rhs(vel_space: FESpace, T_space: FESpace, T: np.ndarray, S_space: FESpace,
                          S: np.ndarray, params: PhysicalParams, rule: QuadratureRule | None = None) -> np.ndarray:
    """``((beta_T T + beta_C S) g, phi_i)`` for the velocity test functions."""
    _same_mesh(vel_space, T_space, S_space)
    if T.shape != (T_space.n_dofs,) or S.shape != (S_space.n_dofs,):
        raise AssemblyError("temperature/concentration size does not match its space")
    ev = _elements(vel_space, rule)
    theta = params.beta_T * _elements(T_space, rule).field_values(T)
    theta = theta + params.beta_C * _elements(S_space, rule).field_values(S)
    g = np.asarray(params.gravity)
    fq = theta[..., None] * g[None, None, :]
    return _load_from_quadrature(vel_space, fq, ev)


def assemble_nudging(space: FESpace, obs, mu: float) -> sp.csr_matrix:
    """``mu * P^T W P`` on ``space``; ``obs`` is built on ``space`` or its scalar component space."""
    if mu < 0:
        raise AssemblyError(f"nudging parameter must be nonnegative, got {mu}")
    n = space.n_dofs
    if mu == 0:
        return sp.csr_matrix((n, n))
    G = obs.normal_matrix()
    if G.shape[0] == n:
        return finalize(mu * G)
    if G.shape[0] * space.arity == n:
        return finalize(mu * sp.block_diag([G] * space.arity))
    raise AssemblyError("observation operator does not match the space")


def nudging_rhs(space: FESpace, obs, mu: float, observed: np.ndarray) -> np.ndarray:
    """``mu * P^T W d`` for observed cell averages ``d`` (one row per component)."""
    if mu == 0:
        return np.zeros(space.n_dofs)
    d = np.atleast_2d(observed)
    return mu * np.concatenate([obs.adjoint_weighted(d[c]) for c in range(space.arity)])


@dataclass
class SystemOperators:
    """Time-independent matrices of the scheme; M/A per field, B, nudging normals."""

    M_u: sp.csr_matrix
    A_u: sp.csr_matrix
    B: sp.csr_matrix
    M_T: sp.csr_matrix
    A_T: sp.csr_matrix
    G_u: sp.csr_matrix
    G_T: sp.csr_matrix
    G_S: sp.csr_matrix
    p_mean: np.ndarray  # integral of each pressure basis function
