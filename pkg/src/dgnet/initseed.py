"""Initial fields from local spectral-element solves on fictitious domains.

Each element gets a slightly enlarged copy of itself; a small polynomial
problem with the model's interior operator, homogeneous artificial boundary
data, and the closed-form source is solved there independently.  The
piecewise union of the local solutions seeds the outer iteration, leaving a
nearly homogeneous residual that Trefftz candidates can absorb.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netfn import EvalBundle
from .quadrature import gauss_legendre_1d

__all__ = ["LocalSpectralField", "spectral_init_helmholtz", "spectral_init_wave"]


def _legder_matrix(order: int, m: int) -> np.ndarray:
    """Rows are the Legendre coefficients of the m-th derivative of each basis."""
    D = np.zeros((order + 1, order + 1))
    for i in range(order + 1):
        e = np.zeros(i + 1)
        e[i] = 1.0
        d = np.polynomial.legendre.legder(e, m)
        D[i, : d.size] = d
    return D


def _leg_tables(shat: np.ndarray, order: int, half_width) -> list[np.ndarray]:
    """Legendre values and first/second derivatives w.r.t. the raw coordinate."""
    V = np.polynomial.legendre.legvander(shat, order)
    D1 = _legder_matrix(order, 1)
    D2 = _legder_matrix(order, 2)
    scale = 1.0 / half_width
    return [V, (V @ D1.T) * scale[..., None], (V @ D2.T) * scale[..., None] ** 2]


def _factor_tables(x, lo, hi, order: int, kind: str) -> list[np.ndarray]:
    """1D factor values/derivatives on [lo, hi].

    ``plain``: Legendre basis of degree <= order.
    ``bubble``: (x-lo)(hi-x) times Legendre, vanishing at both ends.
    ``zero-left``: (x-lo) times Legendre, vanishing at the left end.
    """
    half = 0.5 * (hi - lo)
    shat = (x - lo) / half - 1.0
    if kind == "plain":
        return _leg_tables(shat, order, half)
    if kind == "bubble":
        L, L1, L2 = _leg_tables(shat, order - 2, half)
        q = (x - lo) * (hi - x)
        q1 = lo + hi - 2.0 * x
        val = q[..., None] * L
        d1 = q1[..., None] * L + q[..., None] * L1
        d2 = -2.0 * L + 2.0 * q1[..., None] * L1 + q[..., None] * L2
        return [val, d1, d2]
    if kind == "zero-left":
        L, L1, L2 = _leg_tables(shat, order - 1, half)
        r = x - lo
        val = r[..., None] * L
        d1 = L + r[..., None] * L1
        d2 = 2.0 * L1 + r[..., None] * L2
        return [val, d1, d2]
    if kind == "zero-left-sq":
        # (x-lo)^2 times Legendre: value and first derivative vanish at lo.
        L, L1, L2 = _leg_tables(shat, order - 2, half)
        r = x - lo
        r2 = (r * r)[..., None]
        val = r2 * L
        d1 = 2.0 * r[..., None] * L + r2 * L1
        d2 = 2.0 * L + 4.0 * r[..., None] * L1 + r2 * L2
        return [val, d1, d2]
    raise ValueError(f"unknown factor kind {kind!r}")


@dataclass
class LocalSpectralField:
    """Piecewise-polynomial field from independent per-element local solves."""

    boxes: np.ndarray          # (n_elements, dim, 2) fictitious boxes
    order: int
    factor_kinds: tuple[str, str]
    n_funcs: tuple[int, int]
    coeffs: np.ndarray         # (n_elements, n1 * n2)
    timed: bool

    def eval_bundle(self, pts, elem_idx, needs) -> EvalBundle:
        boxes = self.boxes if elem_idx is None else self.boxes[elem_idx]
        n1, n2 = self.n_funcs
        C = self.coeffs if elem_idx is None else self.coeffs[elem_idx]
        C = C.reshape(C.shape[:-1] + (n1, n2))
        X = _factor_tables(pts[..., 0], boxes[..., 0, 0][..., None],
                           boxes[..., 0, 1][..., None], self.order,
                           self.factor_kinds[0])
        Y = _factor_tables(pts[..., 1], boxes[..., 1, 0][..., None],
                           boxes[..., 1, 1][..., None], self.order,
                           self.factor_kinds[1])

        def combine(dx, dy):
            return np.einsum("kpi,kpj,kij->kp", X[dx], Y[dy], C)

        out = {}
        if "value" in needs:
            out["value"] = combine(0, 0)
        if self.timed:
            if "grad" in needs:
                out["grad"] = combine(1, 0)[..., None]
            if "lap" in needs:
                out["lap"] = combine(2, 0)
            if "dt" in needs:
                out["dt"] = combine(0, 1)
            if "dtt" in needs:
                out["dtt"] = combine(0, 2)
        else:
            if "grad" in needs:
                out["grad"] = np.stack([combine(1, 0), combine(0, 1)], axis=-1)
            if "lap" in needs:
                out["lap"] = combine(2, 0) + combine(0, 2)
        return EvalBundle(**out)


def _fictitious_boxes(mesh, scale: float, skip_axis: int | None = None) -> np.ndarray:
    centers = mesh.elements.mean(axis=-1, keepdims=True)
    boxes = centers + scale * (mesh.elements - centers)
    if skip_axis is not None:
        boxes[:, skip_axis, :] = mesh.elements[:, skip_axis, :]
    return boxes


def _volume_rule(boxes, q):
    x1, w1 = gauss_legendre_1d(q)
    lo, hi = boxes[..., 0], boxes[..., 1]
    half = 0.5 * (hi - lo)
    # per-axis points: (K, q)
    ax = [lo[:, a, None] + half[:, a, None] * (x1 + 1.0) for a in range(2)]
    aw = [half[:, a, None] * w1 for a in range(2)]
    pts = np.stack([
        np.repeat(ax[0][:, :, None], q, axis=2).reshape(boxes.shape[0], -1),
        np.repeat(ax[1][:, None, :], q, axis=1).reshape(boxes.shape[0], -1),
    ], axis=-1)
    w = (aw[0][:, :, None] * aw[1][:, None, :]).reshape(boxes.shape[0], -1)
    return pts, w


def _line_rule(boxes, q, axis, end):
    """Rule on the fictitious box side {x_axis = bound} with the other axis active."""
    x1, w1 = gauss_legendre_1d(q)
    other = 1 - axis
    lo, hi = boxes[:, other, 0], boxes[:, other, 1]
    half = 0.5 * (hi - lo)
    t = lo[:, None] + half[:, None] * (x1 + 1.0)
    w = half[:, None] * w1
    fixed = boxes[:, axis, end]
    pts = np.empty((boxes.shape[0], q, 2))
    pts[..., axis] = fixed[:, None]
    pts[..., other] = t
    return pts, w


def _basis_tables(pts, boxes, order, kinds):
    X = _factor_tables(pts[..., 0], boxes[:, 0, 0][:, None], boxes[:, 0, 1][:, None],
                       order, kinds[0])
    Y = _factor_tables(pts[..., 1], boxes[:, 1, 0][:, None], boxes[:, 1, 1][:, None],
                       order, kinds[1])
    return X, Y


def _outer(Xd, Yd):
    K, P, n1 = Xd.shape
    n2 = Yd.shape[-1]
    return (Xd[:, :, :, None] * Yd[:, :, None, :]).reshape(K, P, n1 * n2)


def spectral_init_helmholtz(model, mesh, order: int = 3, scale: float = 1.1,
                            points_per_axis: int | None = None,
                            boundary_data=None) -> LocalSpectralField:
    """Per-element impedance problems on fictitious boxes, solved in tensor
    polynomials of per-axis degree <= order.

    ``boundary_data(pts, normal)`` replaces the homogeneous impedance datum;
    production solves use zero (the paper's artificial condition), nonzero
    data exists for manufactured-solution verification.
    """
    if model.kind != "helmholtz":
        raise ValueError("spectral_init_helmholtz requires a Helmholtz model")
    q = points_per_axis or (order + 6)
    w = model.omega
    boxes = _fictitious_boxes(mesh, scale)
    K = boxes.shape[0]
    pts, wq = _volume_rule(boxes, q)
    kinds = ("plain", "plain")
    X, Y = _basis_tables(pts, boxes, order, kinds)
    B = _outer(X[0], Y[0])
    Bx = _outer(X[1], Y[0])
    By = _outer(X[0], Y[1])
    rho = model.rho(pts)
    f = model.interior_term.data(pts, None)

    # M[k, i, j] = int grad(phi_j).grad(phi_i) - w^2 rho phi_j phi_i  + i w oint phi_j phi_i
    M = (np.einsum("kp,kpi,kpj->kij", wq, Bx, Bx)
         + np.einsum("kp,kpi,kpj->kij", wq, By, By)
         - np.einsum("kp,kpi,kpj->kij", wq * (w ** 2) * rho, B, B)).astype(complex)
    rhs = np.einsum("kp,kpi->ki", wq * f, B).astype(complex)

    for axis in range(2):
        for end in range(2):
            ppts, pw = _line_rule(boxes, q, axis, end)
            Xb, Yb = _basis_tables(ppts, boxes, order, kinds)
            Bb = _outer(Xb[0], Yb[0])
            M += 1j * w * np.einsum("kp,kpi,kpj->kij", pw, Bb, Bb)
            if boundary_data is not None:
                normal = np.zeros(2)
                normal[axis] = 1.0 if end == 1 else -1.0
                g = boundary_data(ppts, normal)
                rhs += np.einsum("kp,kpi->ki", pw * g, Bb)

    try:
        coeffs = np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"singular local spectral system: {exc}") from exc
    nf = order + 1
    return LocalSpectralField(boxes, order, kinds, (nf, nf), coeffs, timed=False)


def spectral_init_wave(model, mesh, order: int = 5, scale: float = 1.1,
                       points_per_axis: int | None = None,
                       constrained: bool = True) -> LocalSpectralField:
    """Per-element space-time solves seeding the outer iteration.

    The fictitious enlargement applies to the space axis only; the time slab
    stays physical.  Coefficients minimize the local interior residual of
    the wave operator in the weighted quadrature norm, through a truncated
    SVD so the minimum-norm small-residual field is selected (a plain
    normal-equations solve rides along near-null traveling directions and
    produces wildly large fields).

    With ``constrained=True`` the tensor basis pins value and velocity to
    zero at the slab's initial time, the basis-restriction form of the local
    initial condition.  Each slab then restarts from rest, which at large
    wavespeeds builds O(c^2 f dt) velocity mismatches across slab interfaces
    for the corrections to patch.  ``constrained=False`` drops the restart;
    neighboring minimum-norm solves of the same smooth source then nearly
    agree, so the assembled field carries almost no interface jumps.
    """
    if model.kind != "wave":
        raise ValueError("spectral_init_wave requires the wave model")
    if model.variant != "constant":
        raise ValueError("spectral initializer covers the constant-wavespeed model")
    q = points_per_axis or (order + 6)
    boxes = _fictitious_boxes(mesh, scale, skip_axis=model.geometry.time_axis)
    kinds = ("plain", "zero-left-sq" if constrained else "plain")
    pts, wq = _volume_rule(boxes, q)
    X, Y = _basis_tables(pts, boxes, order, kinds)
    rows = -_outer(X[2], Y[0]) \
        + (model.wavespeed(pts) ** -2)[..., None] * _outer(X[0], Y[2])
    f = model.interior_term.data(pts, None)

    sw = np.sqrt(wq)
    A = rows * sw[..., None]
    b = f * sw
    U, S, Vh = np.linalg.svd(A, full_matrices=False)
    if not np.all(np.isfinite(S)):
        raise RuntimeError("local spectral system is not finite")
    keep = S > 1e-8 * S[:, :1]
    Sinv = np.where(keep, 1.0 / np.where(S > 0, S, 1.0), 0.0)
    coeffs = np.einsum("kji,kj->ki", Vh, Sinv * np.einsum("kpi,kp->ki", U, b))
    n2 = order - 1 if constrained else order + 1
    return LocalSpectralField(boxes, order, kinds, (order + 1, n2), coeffs,
                              timed=True)
