"""Legacy ASCII VTK output for P2 fields (and a reader for checking files).

Each P2 triangle is written as four linear triangles (VTK cell type 5) over
its vertex and edge-midpoint nodes, so every nodal value appears in the file.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fe_space import FESpace
from .mesh import TriMesh

VTK_TRIANGLE = 5

# children of a P2 triangle in local node numbering (vertices 0-2, midpoints 3-5 opposite 0-2)
_P2_SPLIT = np.array([[0, 5, 4], [5, 1, 3], [4, 3, 2], [3, 4, 5]])


def _cells(space: FESpace) -> tuple[np.ndarray, np.ndarray]:
    if space.order == 1:
        return space.nodes, space.scalar_dof_map
    if space.order == 2:
        return space.nodes, space.scalar_dof_map[:, _P2_SPLIT].reshape(-1, 3)
    raise ValueError("VTK output needs a continuous P1 or P2 space")


def write_vtk(path, space: FESpace, point_data: dict | None = None, title: str = "cda fields") -> Path:
    """Write ``point_data`` (name -> nodal scalars, or (n, 2) vectors) on ``space``'s nodes."""
    path = Path(path)
    points, cells = _cells(space)
    n = len(points)
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {n} double")
    lines.extend(f"{x:.10g} {y:.10g} 0" for x, y in points)
    lines.append(f"CELLS {len(cells)} {4 * len(cells)}")
    lines.extend(f"3 {a} {b} {c}" for a, b, c in cells)
    lines.append(f"CELL_TYPES {len(cells)}")
    lines.extend([str(VTK_TRIANGLE)] * len(cells))
    if point_data:
        lines.append(f"POINT_DATA {n}")
        for name, values in point_data.items():
            v = np.asarray(values, dtype=float)
            if v.shape == (n,):
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{a:.10g}" for a in v)
            elif v.shape == (n, 2):
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{a:.10g} {b:.10g} 0" for a, b in v)
            else:
                raise ValueError(f"field {name!r} has shape {v.shape}, expected ({n},) or ({n}, 2)")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_mesh_vtk(path, mesh: TriMesh) -> Path:
    """Mesh only, vertices and triangles."""
    path = Path(path)
    lines = ["# vtk DataFile Version 3.0", "cda mesh", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double"]
    lines.extend(f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices)
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines.extend([str(VTK_TRIANGLE)] * mesh.n_triangles)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk(path) -> dict:
    """Parse a file written by this module.

    Returns a dict with ``points`` (n, 3), ``cells`` (m, 3), ``cell_types`` and
    ``point_data`` (name -> array).
    """
    tokens = Path(path).read_text().split("\n")
    out = {"title": tokens[1], "point_data": {}}
    i = 4
    words = " ".join(tokens[i:]).split()
    pos = 0

    def take(k):
        nonlocal pos
        chunk = words[pos:pos + k]
        pos += k
        return chunk

    n_points = 0
    while pos < len(words):
        key = take(1)[0]
        if key == "POINTS":
            n_points, _ = int(take(1)[0]), take(1)
            out["points"] = np.array(take(3 * n_points), dtype=float).reshape(-1, 3)
        elif key == "CELLS":
            m, size = int(take(1)[0]), int(take(1)[0])
            raw = np.array(take(size), dtype=np.int64).reshape(m, 4)
            if np.any(raw[:, 0] != 3):
                raise ValueError("only triangle cells are supported")
            out["cells"] = raw[:, 1:]
        elif key == "CELL_TYPES":
            m = int(take(1)[0])
            out["cell_types"] = np.array(take(m), dtype=np.int64)
        elif key == "POINT_DATA":
            take(1)
        elif key == "SCALARS":
            name, _, _ = take(3)
            take(2)  # LOOKUP_TABLE default
            out["point_data"][name] = np.array(take(n_points), dtype=float)
        elif key == "VECTORS":
            name, _ = take(2)
            out["point_data"][name] = np.array(take(3 * n_points), dtype=float).reshape(-1, 3)[:, :2]
        else:
            raise ValueError(f"unexpected VTK keyword {key!r}")
    return out
