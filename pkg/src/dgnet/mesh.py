"""Tensor-product meshes with a classified skeleton.

Elements are axis-aligned boxes from a per-axis partition of the
computational box.  Every codimension-1 face is classified as interior
(time-like or space-like), boundary, initial, or terminal.  On interior
faces the lower-index neighbor owns the positive normal; for space-like
faces this makes the normal point towards future time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "INTERIOR_TIME",
    "INTERIOR_SPACE",
    "BOUNDARY",
    "INITIAL",
    "TERMINAL",
    "CATEGORIES",
    "Face",
    "Mesh",
    "build_mesh",
    "jump_pair",
]

INTERIOR_TIME = "interior-time-like"
INTERIOR_SPACE = "interior-space-like"
BOUNDARY = "boundary"
INITIAL = "initial"
TERMINAL = "terminal"
CATEGORIES = (INTERIOR_TIME, INTERIOR_SPACE, BOUNDARY, INITIAL, TERMINAL)


@dataclass(frozen=True)
class Face:
    """One face of the skeleton.

    ``bounds`` is (dim, 2) with exactly one degenerate axis (``axis``).
    ``neighbors`` holds one element index on outer faces, two on interior
    faces; ``normal`` is the unit normal owned by ``neighbors[0]`` on
    interior faces and the outward normal on outer faces.
    """

    bounds: np.ndarray
    axis: int
    category: str
    neighbors: tuple[int, ...]
    normal: np.ndarray

    @property
    def measure(self) -> float:
        widths = self.bounds[:, 1] - self.bounds[:, 0]
        return float(np.prod(widths[widths > 0]))


@dataclass
class Mesh:
    """Immutable tensor-product mesh of an axis-aligned box."""

    dim: int
    box: np.ndarray              # (dim, 2)
    cells_per_axis: np.ndarray   # (dim,)
    time_axis: int | None
    elements: np.ndarray         # (n_elements, dim, 2)
    faces: tuple[Face, ...]
    _by_category: dict = field(default_factory=dict, repr=False)

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def element_widths(self) -> np.ndarray:
        return (self.box[:, 1] - self.box[:, 0]) / self.cells_per_axis

    @property
    def h(self) -> float:
        """Element diameter bound: the largest per-axis width."""
        return float(self.element_widths.max())

    def faces_in(self, category: str) -> tuple[Face, ...]:
        if category not in CATEGORIES:
            raise ValueError(f"unknown face category {category!r}")
        if not self._by_category:
            groups: dict[str, list[Face]] = {c: [] for c in CATEGORIES}
            for f in self.faces:
                groups[f.category].append(f)
            self._by_category.update({c: tuple(v) for c, v in groups.items()})
        return self._by_category[category]


def build_mesh(box, cells_per_axis, time_axis: int | None = None) -> Mesh:
    """Build a tensor-product mesh and classify its skeleton.

    ``box`` is a (dim, 2) array of per-axis interval bounds, ``cells_per_axis``
    the per-axis cell counts.  If ``time_axis`` is given, interior faces
    normal to it become space-like, the remaining interior faces time-like,
    and the two box ends along it become initial/terminal face sets.
    """
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError(f"box must have shape (dim, 2), got {box.shape}")
    cells = np.asarray(cells_per_axis, dtype=int)
    dim = box.shape[0]
    if cells.shape != (dim,):
        raise ValueError("cells_per_axis length must match the box dimension")
    if np.any(cells < 1):
        raise ValueError("all cell counts must be >= 1")
    if np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("box intervals must be ordered and nondegenerate")
    if time_axis is not None and not (0 <= time_axis < dim):
        raise ValueError(f"time_axis {time_axis} out of range for dim {dim}")

    widths = (box[:, 1] - box[:, 0]) / cells
    grids = [box[a, 0] + widths[a] * np.arange(cells[a] + 1) for a in range(dim)]
    # Element ordering is C-order over the index tuple, axis 0 slowest.
    index_of = lambda idx: int(np.ravel_multi_index(idx, cells))

    n_elem = int(np.prod(cells))
    elements = np.empty((n_elem, dim, 2))
    for idx in np.ndindex(*cells):
        k = index_of(idx)
        for a in range(dim):
            elements[k, a, 0] = grids[a][idx[a]]
            elements[k, a, 1] = grids[a][idx[a] + 1]

    faces: list[Face] = []
    for axis in range(dim):
        is_time_normal = time_axis is not None and axis == time_axis
        for idx in np.ndindex(*cells):
            k = index_of(idx)
            bounds = elements[k].copy()

            # Positive-side face: interior if a neighbor exists, else upper end.
            if idx[axis] + 1 < cells[axis]:
                nxt = list(idx)
                nxt[axis] += 1
                k2 = index_of(tuple(nxt))
                fb = bounds.copy()
                fb[axis, 0] = fb[axis, 1] = elements[k, axis, 1]
                normal = np.zeros(dim)
                normal[axis] = 1.0
                category = INTERIOR_SPACE if is_time_normal else INTERIOR_TIME
                faces.append(Face(fb, axis, category, (k, k2), normal))
            else:
                fb = bounds.copy()
                fb[axis, 0] = fb[axis, 1] = elements[k, axis, 1]
                normal = np.zeros(dim)
                normal[axis] = 1.0
                category = TERMINAL if is_time_normal else BOUNDARY
                faces.append(Face(fb, axis, category, (k,), normal))

            # Negative-side face only at the lower box end (interior faces are
            # emitted once, from the lower-index side).
            if idx[axis] == 0:
                fb = bounds.copy()
                fb[axis, 0] = fb[axis, 1] = elements[k, axis, 0]
                normal = np.zeros(dim)
                normal[axis] = -1.0
                category = INITIAL if is_time_normal else BOUNDARY
                faces.append(Face(fb, axis, category, (k,), normal))

    for f in faces:
        f.bounds.setflags(write=False)
        f.normal.setflags(write=False)
    elements.setflags(write=False)

    return Mesh(
        dim=dim,
        box=box,
        cells_per_axis=cells,
        time_axis=time_axis,
        elements=elements,
        faces=tuple(faces),
    )


def jump_pair(face: Face, traces, kind: str = "scalar"):
    """Signed trace combination across an interior face.

    ``traces`` is the pair of traces from ``face.neighbors[0]`` and
    ``face.neighbors[1]``; ``kind`` says whether each trace is a scalar (or
    an array of scalars) or a vector over the ambient axes (trailing axis).
    On time-like faces, scalar traces give the vector-valued space normal
    jump w1*n1 + w2*n2 and vector traces the scalar normal jump of a flux;
    on space-like faces both give the time jump (w- - w+) * n_t with
    n_t = +1 by the future-pointing convention.
    """
    if face.category not in (INTERIOR_TIME, INTERIOR_SPACE):
        raise ValueError(f"jump_pair requires an interior face, got {face.category!r}")
    if kind not in ("scalar", "vector"):
        raise ValueError(f"kind must be 'scalar' or 'vector', got {kind!r}")
    t1, t2 = traces
    t1 = np.asarray(t1)
    t2 = np.asarray(t2)
    if face.category == INTERIOR_SPACE:
        # neighbors[0] is the earlier-time element, n_F^t = +1.
        return t1 - t2
    n1 = face.normal
    if kind == "scalar":
        return t1[..., None] * n1 + t2[..., None] * (-n1)
    return t1 @ n1 + t2 @ (-n1)
