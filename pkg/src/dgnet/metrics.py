"""Error norms of approximate solutions against exact ones, by quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quadrature import default_points_per_axis, element_rule

__all__ = ["ErrorReport", "error_norms"]


@dataclass
class ErrorReport:
    """Relative errors over the whole box, plus the exact-solution norms used."""

    rel_l2: float
    rel_h1_space: float
    rel_h1_time: float | None
    rel_h1_spacetime: float | None
    exact_l2: float
    exact_h1_space: float
    exact_h1_time: float | None


def _components(solution):
    comps = getattr(solution, "components", None)
    if comps is not None:
        return list(comps)
    if solution is None:
        return []
    if isinstance(solution, (list, tuple)):
        return list(solution)
    return [solution]


def error_norms(solution, model, mesh, points_per_axis: int | None = None) -> ErrorReport:
    """Relative L2 and broken H1-type seminorm errors of ``solution``.

    Space-time models report the space-gradient seminorm, the time-derivative
    seminorm, and their combination; stationary models only the first.
    """
    q = points_per_axis or default_points_per_axis(model.omega, mesh.h)
    rule0 = element_rule(mesh.elements[0], q)
    offsets = mesh.elements[:, :, 0] - mesh.elements[0, :, 0]
    pts = rule0.points[None, :, :] + offsets[:, None, :]
    w = rule0.weights[None, :]

    needs = ["value", "grad"]
    timed = model.geometry.time_axis is not None
    if timed:
        needs.append("dt")

    exact = model.exact.bundle(pts, needs)
    num = None
    for comp in _components(solution):
        b = comp.eval_bundle(pts, np.arange(mesh.n_elements), needs)
        if num is None:
            num = b
        else:
            from .netfn import add_bundles

            num = add_bundles(num, b)

    def sq(arr):
        return float(np.real(np.sum(w * np.abs(arr) ** 2))) if arr.ndim == 2 else \
            float(np.real(np.sum(w[..., None] * np.abs(arr) ** 2)))

    if num is None:
        dv, dg = exact.value, exact.grad
        dt = exact.dt if timed else None
    else:
        dv = num.value - exact.value
        dg = num.grad - exact.grad
        dt = (num.dt - exact.dt) if timed else None

    den_l2 = sq(exact.value)
    den_h1 = sq(exact.grad)
    if den_l2 == 0.0 or den_h1 == 0.0:
        raise ValueError("exact solution has zero norm; relative errors undefined")

    rel_l2 = np.sqrt(sq(dv) / den_l2)
    rel_h1 = np.sqrt(sq(dg) / den_h1)
    if timed:
        den_t = sq(exact.dt)
        rel_t = np.sqrt(sq(dt) / den_t)
        rel_st = np.sqrt((sq(dg) + sq(dt)) / (den_h1 + den_t))
        return ErrorReport(float(rel_l2), float(rel_h1), float(rel_t), float(rel_st),
                           np.sqrt(den_l2), np.sqrt(den_h1), np.sqrt(den_t))
    return ErrorReport(float(rel_l2), float(rel_h1), None, None,
                       np.sqrt(den_l2), np.sqrt(den_h1), None)
