"""Quadratic loss evaluation, Hermitian Gram assembly, Galerkin least squares.

The ``Workspace`` holds, per loss term, quadrature points, materialized
operator coefficients, data values, and the running residual of the frozen
part of the approximation (Op(u_frozen) - data).  Adding a frozen correction
updates that base once; after that every candidate-loss evaluation, Gram
assembly, and parameter gradient touches only the candidate networks.

For a candidate basis with frozen nonlinear weights, each term contributes a
Hermitian positive semidefinite matrix M_i and a vector h_i with

    loss_i(c) = c^H M_i c + 2 Re(c^H h_i) + const_i,

so the global Gram system is M = sum lambda_i M_i with right-hand side
-sum lambda_i h_i, and per-term coefficient gradients are 2 (M_i c + h_i).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import mesh as meshmod
from .netfn import EvalBundle, KernelTerm, NetworkSet, apply_coeffs, param_gradient
from .quadrature import default_points_per_axis, element_rule, face_rule

__all__ = [
    "LossBreakdown",
    "GramSystem",
    "SolveResult",
    "ConditioningError",
    "Workspace",
    "evaluate_loss",
    "assemble_gram",
    "solve_linear",
    "bilinear_form",
    "linear_form",
    "data_constant",
]

DENSE_LIMIT = 1500
RESIDUAL_ACCEPT = 1e-6
RIDGE_START = 1e-12
RIDGE_MAX = 1e-6


class ConditioningError(RuntimeError):
    """Gram solve failed after exhausting the ridge escalation schedule."""


@dataclass
class LossBreakdown:
    """Per-term (unweighted) loss components and the weighted total."""

    names: tuple[str, ...]
    components: np.ndarray
    lambdas: np.ndarray

    @property
    def total(self) -> float:
        return float(self.lambdas @ self.components)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.components))


@dataclass
class GramSystem:
    """Hermitian PSD normal-equations system for the linear coefficients."""

    matrix: scipy.sparse.csr_array
    rhs: np.ndarray
    width: int
    n_elements: int

    @property
    def size(self) -> int:
        return self.rhs.size


@dataclass
class SolveResult:
    coeffs: np.ndarray        # (n_elements, width)
    flat: np.ndarray
    residual: float           # ||M c - rhs|| / ||rhs|| against the unridged M
    ridge: float


class _TermCtx:
    __slots__ = ("term", "index", "coef1", "coef2", "data", "base", "const",
                 "group", "mat", "h")

    def __init__(self, term, index, group, coef1, coef2, data):
        self.term = term
        self.index = index
        self.group = group
        self.coef1 = coef1
        self.coef2 = coef2
        self.data = data
        self.base = None
        self.const = 0.0
        self.mat = None
        self.h = None


class _Group:
    __slots__ = ("kind", "pts", "w", "normals", "elem1", "elem2", "terms", "needs")

    def __init__(self, kind, pts, w, normals, elem1, elem2):
        self.kind = kind
        self.pts = pts
        self.w = w
        self.normals = normals
        self.elem1 = elem1
        self.elem2 = elem2
        self.terms: list[_TermCtx] = []
        self.needs: tuple[str, ...] = ()


def _materialize(coeffs: dict, shape, ds) -> dict:
    out = {}
    for entry, coef in coeffs.items():
        target = shape + (ds,) if entry == "grad" else shape
        arr = np.asarray(coef)
        if entry == "grad" and arr.ndim == 1:
            arr = arr.reshape((1,) * len(shape) + (-1,))
        out[entry] = np.broadcast_to(arr, target)
    return out


class Workspace:
    """Quadrature contexts for one (model, mesh) pair.

    ``points_per_axis`` overrides the default rule size for both element and
    face rules.
    """

    def __init__(self, model, mesh, points_per_axis: int | None = None,
                 extra_degree: int = 0):
        self.model = model
        self.mesh = mesh
        q = points_per_axis or default_points_per_axis(model.omega, mesh.h,
                                                       extra_degree)
        self.q = q
        self.needs = model.needs
        self.dtype = complex if model.is_complex else float
        self.groups: list[_Group] = []
        self.term_ctxs: list[_TermCtx] = []
        self._build_groups()
        self.reset_base()

    # -- construction -------------------------------------------------------

    def _build_groups(self):
        model, mesh = self.model, self.mesh
        ds = model.geometry.ds

        # Volume group, shared by every term with domain 'volume'.
        rule0 = element_rule(mesh.elements[0], self.q)
        offsets = mesh.elements[:, :, 0] - mesh.elements[0, :, 0]
        pts = rule0.points[None, :, :] + offsets[:, None, :]
        w = np.broadcast_to(rule0.weights, (mesh.n_elements, rule0.npoints)).copy()
        vol = _Group("volume", pts, w, None,
                     np.arange(mesh.n_elements), None)
        self.groups.append(vol)
        for idx, term in enumerate(model.terms):
            if term.domain == "volume":
                coef1 = _materialize(term.coeffs(pts, None, 1.0), pts.shape[:2], ds)
                data = term.data(pts, None) if term.data is not None else None
                self._add_term(vol, term, idx, coef1, None, data)

        # One group per boundary/initial term (face subsets may differ).
        for idx, term in enumerate(model.terms):
            if term.domain in (meshmod.BOUNDARY, meshmod.INITIAL):
                faces = mesh.faces_in(term.domain)
                if term.predicate is not None:
                    faces = tuple(f for f in faces if term.predicate(f))
                grp = self._face_group("single", faces)
                if grp is None:
                    self._add_term(None, term, idx, None, None, None)
                    continue
                self.groups.append(grp)
                nb = grp.normals[:, None, :]
                coef1 = _materialize(term.coeffs(grp.pts, nb, 1.0),
                                     grp.pts.shape[:2], ds)
                data = term.data(grp.pts, nb) if term.data is not None else None
                self._add_term(grp, term, idx, coef1, None, data)

        # One group per interior category, shared by that category's jump terms.
        for category in (meshmod.INTERIOR_TIME, meshmod.INTERIOR_SPACE):
            terms = [(i, t) for i, t in enumerate(model.terms) if t.domain == category]
            if not terms:
                continue
            grp = self._face_group("pair", mesh.faces_in(category))
            if grp is None:
                for idx, term in terms:
                    self._add_term(None, term, idx, None, None, None)
                continue
            self.groups.append(grp)
            nb = grp.normals[:, None, :]
            for idx, term in terms:
                coef1 = _materialize(term.coeffs(grp.pts, nb, 1.0),
                                     grp.pts.shape[:2], ds)
                coef2 = _materialize(term.coeffs(grp.pts, -nb, -1.0),
                                     grp.pts.shape[:2], ds)
                self._add_term(grp, term, idx, coef1, coef2, None)

        for grp in self.groups:
            entries = set()
            for tc in grp.terms:
                entries.update(tc.coef1.keys())
            grp.needs = tuple(e for e in EvalBundle.ENTRIES if e in entries)

    def _face_group(self, kind, faces):
        if not faces:
            return None
        pts_list, w_list = [], []
        for f in faces:
            rule = face_rule(f, self.q)
            pts_list.append(rule.points)
            w_list.append(rule.weights)
        pts = np.stack(pts_list)
        w = np.stack(w_list)
        normals = np.stack([f.normal for f in faces])
        elem1 = np.array([f.neighbors[0] for f in faces])
        elem2 = (np.array([f.neighbors[1] for f in faces])
                 if kind == "pair" else None)
        return _Group(kind, pts, w, normals, elem1, elem2)

    def _add_term(self, group, term, index, coef1, coef2, data):
        tc = _TermCtx(term, index, group, coef1, coef2, data)
        if group is not None:
            group.terms.append(tc)
        self.term_ctxs.append(tc)
        self.term_ctxs.sort(key=lambda t: t.index)

    # -- frozen-part bookkeeping ---------------------------------------------

    def reset_base(self):
        for tc in self.term_ctxs:
            if tc.group is None:
                tc.base = None
                tc.const = 0.0
                continue
            shape = tc.group.pts.shape[:2]
            tc.base = np.zeros(shape, dtype=self.dtype)
            if tc.data is not None:
                tc.base -= tc.data
            self._refresh_const(tc)

    def _refresh_const(self, tc):
        tc.const = float(np.real(np.sum(tc.group.w * np.abs(tc.base) ** 2)))

    def add_component(self, component):
        """Fold one solution component into every term's base residual."""
        for grp in self.groups:
            b1 = component.eval_bundle(grp.pts, grp.elem1, self.needs)
            b2 = (component.eval_bundle(grp.pts, grp.elem2, self.needs)
                  if grp.kind == "pair" else None)
            for tc in grp.terms:
                tc.base = tc.base + apply_coeffs(tc.coef1, b1)
                if tc.coef2 is not None:
                    tc.base = tc.base + apply_coeffs(tc.coef2, b2)
                self._refresh_const(tc)

    def set_components(self, components):
        self.reset_base()
        for comp in components:
            self.add_component(comp)

    # -- loss ---------------------------------------------------------------

    def term_names(self):
        return tuple(tc.term.name for tc in self.term_ctxs)

    def base_loss(self, lambdas) -> LossBreakdown:
        comps = np.array([tc.const for tc in self.term_ctxs])
        return LossBreakdown(self.term_names(), comps, np.asarray(lambdas, float))

    def candidate_residuals(self, candidate: NetworkSet | None):
        """Per-term residual arrays base + Op(candidate); None when skipped."""
        out = {id(tc): tc.base for tc in self.term_ctxs}
        if candidate is None:
            return out
        skip_interior = candidate.family.annihilates_interior()
        for grp in self.groups:
            if skip_interior and all(tc.term.domain == "volume" for tc in grp.terms):
                continue
            f1 = candidate.field(grp.pts, self._idx(grp), grp.needs)
            f2 = (candidate.field(grp.pts, grp.elem2, grp.needs)
                  if grp.kind == "pair" else None)
            for tc in grp.terms:
                if skip_interior and tc.term.domain == "volume":
                    continue
                r = tc.base + apply_coeffs(tc.coef1, f1)
                if tc.coef2 is not None:
                    r = r + apply_coeffs(tc.coef2, f2)
                out[id(tc)] = r
        return out

    @staticmethod
    def _idx(grp):
        # The volume group's rows are already 0..N-1; avoid a useless gather.
        return None if grp.kind == "volume" else grp.elem1

    def loss(self, candidate: NetworkSet | None, lambdas) -> LossBreakdown:
        res = self.candidate_residuals(candidate)
        comps = []
        for tc in self.term_ctxs:
            if tc.group is None:
                comps.append(0.0)
                continue
            r = res[id(tc)]
            comps.append(float(np.real(np.sum(tc.group.w * np.abs(r) ** 2))))
        return LossBreakdown(self.term_names(), np.array(comps),
                             np.asarray(lambdas, float))

    # -- Gram assembly --------------------------------------------------------

    def _rows(self, tc, basis1, basis2):
        def apply(coefs, basis):
            out = None
            for entry, coef in coefs.items():
                arr = basis.get(entry)
                if entry == "grad":
                    piece = np.einsum("kpnd,kpd->kpn", arr, coef)
                else:
                    piece = coef[:, :, None] * arr
                out = piece if out is None else out + piece
            return out
        rows1 = apply(tc.coef1, basis1)
        rows2 = apply(tc.coef2, basis2) if tc.coef2 is not None else None
        return rows1, rows2

    def assemble(self, candidate: NetworkSet) -> GramSystem:
        """Per-term normal-equation pieces and the (unweighted) term matrices.

        Stores (M_i, h_i) on each term context; combine with ``system_for``.
        """
        n = candidate.width
        N = self.mesh.n_elements
        size = N * n
        skip_interior = candidate.family.annihilates_interior()
        iarange = np.arange(n)

        for tc in self.term_ctxs:
            tc.mat = None
            tc.h = np.zeros(size, dtype=self.dtype)

        for grp in self.groups:
            if not grp.terms:
                continue
            if skip_interior and all(tc.term.domain == "volume" for tc in grp.terms):
                for tc in grp.terms:
                    tc.mat = scipy.sparse.csr_array((size, size), dtype=self.dtype)
                continue
            basis1 = candidate.basis(grp.pts, self._idx(grp), grp.needs)
            basis2 = (candidate.basis(grp.pts, grp.elem2, grp.needs)
                      if grp.kind == "pair" else None)
            for tc in grp.terms:
                rows1, rows2 = self._rows(tc, basis1, basis2)
                w = grp.w
                if grp.kind == "pair":
                    e1, e2 = grp.elem1, grp.elem2
                    blocks = []
                    for (ea, ra), (eb, rb) in (
                        ((e1, rows1), (e1, rows1)),
                        ((e1, rows1), (e2, rows2)),
                        ((e2, rows2), (e1, rows1)),
                        ((e2, rows2), (e2, rows2)),
                    ):
                        vals = np.einsum("kp,kpi,kpj->kij", w, np.conj(ra), rb)
                        blocks.append((ea, eb, vals))
                    data, rows_i, cols_i = [], [], []
                    for ea, eb, vals in blocks:
                        K = ea.size
                        ri = (ea[:, None, None] * n + iarange[None, :, None])
                        ci = (eb[:, None, None] * n + iarange[None, None, :])
                        data.append(vals.reshape(-1))
                        rows_i.append(np.broadcast_to(ri, vals.shape).reshape(-1))
                        cols_i.append(np.broadcast_to(ci, vals.shape).reshape(-1))
                    mat = scipy.sparse.coo_array(
                        (np.concatenate(data),
                         (np.concatenate(rows_i), np.concatenate(cols_i))),
                        shape=(size, size)).tocsr()
                    hv = np.zeros(size, dtype=self.dtype)
                    np.add.at(hv.reshape(N, n), e1,
                              np.einsum("kp,kpi->ki", w * tc.base, np.conj(rows1)))
                    np.add.at(hv.reshape(N, n), e2,
                              np.einsum("kp,kpi->ki", w * tc.base, np.conj(rows2)))
                else:
                    e1 = grp.elem1
                    vals = np.einsum("kp,kpi,kpj->kij", w, np.conj(rows1), rows1)
                    ri = (e1[:, None, None] * n + iarange[None, :, None])
                    ci = (e1[:, None, None] * n + iarange[None, None, :])
                    mat = scipy.sparse.coo_array(
                        (vals.reshape(-1),
                         (np.broadcast_to(ri, vals.shape).reshape(-1),
                          np.broadcast_to(ci, vals.shape).reshape(-1))),
                        shape=(size, size)).tocsr()
                    hv = np.zeros(size, dtype=self.dtype)
                    np.add.at(hv.reshape(N, n), e1,
                              np.einsum("kp,kpi->ki", w * tc.base, np.conj(rows1)))
                tc.mat = mat
                tc.h = hv

        self._assembled_for = candidate
        return self.system_for(np.ones(len(self.term_ctxs)))

    def system_for(self, lambdas) -> GramSystem:
        """Weighted global system from the last assembled per-term pieces."""
        lam = np.asarray(lambdas, float)
        n = self._assembled_for.width
        N = self.mesh.n_elements
        size = N * n
        M = None
        rhs = np.zeros(size, dtype=self.dtype)
        for tc, li in zip(self.term_ctxs, lam):
            if tc.mat is None:
                continue
            M = li * tc.mat if M is None else M + li * tc.mat
            rhs -= li * tc.h
        if M is None:
            M = scipy.sparse.csr_array((size, size), dtype=self.dtype)
        return GramSystem(M, rhs, width=n, n_elements=N)

    # -- algebraic loss/gradients at the assembled basis ----------------------

    def term_losses_at(self, cflat) -> np.ndarray:
        """Unweighted component losses as quadratics in the coefficients."""
        comps = []
        for tc in self.term_ctxs:
            if tc.group is None:
                comps.append(0.0)
                continue
            val = tc.const
            if tc.mat is not None:
                val = (np.real(np.vdot(cflat, tc.mat @ cflat))
                       + 2.0 * np.real(np.vdot(cflat, tc.h)) + tc.const)
            comps.append(float(val))
        return np.array(comps)

    def coeff_gradients(self, cflat) -> list[np.ndarray]:
        """Per-term gradients over the linear coefficients, 2 (M_i c + h_i)."""
        out = []
        for tc in self.term_ctxs:
            if tc.mat is None:
                out.append(np.zeros_like(cflat))
            else:
                out.append(2.0 * (tc.mat @ cflat + tc.h))
        return out

    # -- parameter gradients ---------------------------------------------------

    def kernel_for(self, candidate, residuals, weights) -> list[KernelTerm]:
        """Weighted residual kernel of the current candidate state."""
        kern = []
        skip_interior = candidate.family.annihilates_interior()
        for tc, wt in zip(self.term_ctxs, weights):
            if tc.group is None or wt == 0.0:
                continue
            if skip_interior and tc.term.domain == "volume":
                continue
            r = residuals[id(tc)]
            grp = tc.group
            kern.append(KernelTerm(grp.pts, wt * grp.w, r, tc.coef1,
                                   self._idx(grp)))
            if tc.coef2 is not None:
                kern.append(KernelTerm(grp.pts, wt * grp.w, r, tc.coef2, grp.elem2))
        return kern

    def param_grad(self, candidate, lambdas, residuals=None) -> dict:
        """Gradient of the weighted loss over the candidate's nonlinear params."""
        if not candidate.family.trainable:
            return {}
        if residuals is None:
            residuals = self.candidate_residuals(candidate)
        kern = self.kernel_for(candidate, residuals, np.asarray(lambdas, float))
        return param_gradient(candidate, kern)

    def per_term_param_grads(self, candidate, residuals) -> list[dict]:
        out = []
        for i, tc in enumerate(self.term_ctxs):
            sel = np.zeros(len(self.term_ctxs))
            sel[i] = 1.0
            if not candidate.family.trainable or tc.group is None:
                out.append({})
                continue
            kern = self.kernel_for(candidate, residuals, sel)
            out.append(param_gradient(candidate, kern) if kern else {})
        return out


# -- free functions ------------------------------------------------------------


def _as_components(solution):
    if solution is None:
        return []
    comps = getattr(solution, "components", None)
    if comps is not None:
        return list(comps)
    if isinstance(solution, (list, tuple)):
        return list(solution)
    return [solution]


def evaluate_loss(solution, candidate, model, mesh, lambdas=None,
                  points_per_axis=None) -> LossBreakdown:
    """Quadrature evaluation of every loss term for v = solution + candidate.

    When every component of the candidate annihilates the interior operator
    (certified Trefftz family), the candidate's interior contribution is
    skipped; the interior term then reduces to the frozen part's constant.
    """
    ws = Workspace(model, mesh, points_per_axis)
    ws.set_components(_as_components(solution))
    lam = model.lambda_init if lambdas is None else lambdas
    return ws.loss(candidate, lam)


def assemble_gram(frozen, basis: NetworkSet, model, mesh, lambdas=None,
                  points_per_axis=None) -> tuple[GramSystem, Workspace]:
    """Normal equations a(phi_p, phi_q) c = L(phi_q) - a(u_frozen, phi_q)."""
    ws = Workspace(model, mesh, points_per_axis)
    ws.set_components(_as_components(frozen))
    lam = model.lambda_init if lambdas is None else lambdas
    ws.assemble(basis)
    return ws.system_for(lam), ws


def solve_linear(system: GramSystem, ridge: float | None = None) -> SolveResult:
    """Direct Hermitian solve with escalating ridge regularization.

    The shift is relative to the mean diagonal, starting at 1e-12 and
    escalating tenfold up to 1e-6; a solve is accepted when the relative
    residual against the unridged matrix is below 1e-6.
    """
    M, rhs = system.matrix, system.rhs
    size = system.size
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return SolveResult(np.zeros((system.n_elements, system.width),
                                    dtype=rhs.dtype), np.zeros_like(rhs), 0.0, 0.0)

    diag = M.diagonal()
    mean_diag = float(np.mean(np.abs(diag)))
    if mean_diag == 0.0:
        mean_diag = 1.0
    if ridge is not None:
        deltas = [ridge]
    else:
        deltas = [RIDGE_START * mean_diag * 10.0 ** k
                  for k in range(int(np.log10(RIDGE_MAX / RIDGE_START)) + 1)]

    best = None
    eye = scipy.sparse.identity(size, dtype=M.dtype, format="csr")
    for delta in deltas:
        Mr = M + delta * eye
        try:
            if size <= DENSE_LIMIT:
                Md = Mr.toarray()
                cf = scipy.linalg.cho_factor(Md, check_finite=False)
                c = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
            else:
                lu = scipy.sparse.linalg.splu(Mr.tocsc())
                c = lu.solve(rhs)
        except (scipy.linalg.LinAlgError, RuntimeError, ValueError):
            continue
        if not np.all(np.isfinite(c)):
            continue
        res = float(np.linalg.norm(M @ c - rhs) / rhs_norm)
        if best is None or res < best[0]:
            best = (res, c, delta)
        if res <= RESIDUAL_ACCEPT:
            break
    if best is None:
        raise ConditioningError(
            f"Gram solve failed for size {size}: no factorization succeeded "
            f"after ridge schedule up to {deltas[-1]:.3e}")
    res, c, delta = best
    return SolveResult(c.reshape(system.n_elements, system.width), c, res, delta)


def _pairwise_form(u_comps, v_comps, model, mesh, lambdas, points_per_axis,
                   with_data: bool):
    ws = Workspace(model, mesh, points_per_axis)
    lam = np.asarray(model.lambda_init if lambdas is None else lambdas, float)
    total = 0.0 + 0.0j
    for grp in ws.groups:
        def op_values(comps, tc):
            out = None
            for comp in comps:
                b1 = comp.eval_bundle(grp.pts, grp.elem1, ws.needs)
                v = apply_coeffs(tc.coef1, b1)
                if tc.coef2 is not None:
                    b2 = comp.eval_bundle(grp.pts, grp.elem2, ws.needs)
                    v = v + apply_coeffs(tc.coef2, b2)
                out = v if out is None else out + v
            if out is None:
                out = np.zeros(grp.pts.shape[:2], dtype=ws.dtype)
            return out

        for tc in grp.terms:
            opv = op_values(v_comps, tc)
            if with_data:
                if tc.data is None:
                    continue
                total += lam[tc.index] * np.sum(grp.w * tc.data * np.conj(opv))
            else:
                opu = op_values(u_comps, tc)
                total += lam[tc.index] * np.sum(grp.w * opu * np.conj(opv))
    return total


def bilinear_form(u, v, model, mesh, lambdas=None, points_per_axis=None) -> complex:
    """a(u, v): the Hermitian form whose diagonal is the homogeneous loss."""
    return complex(_pairwise_form(_as_components(u), _as_components(v), model,
                                  mesh, lambdas, points_per_axis, with_data=False))


def linear_form(v, model, mesh, lambdas=None, points_per_axis=None) -> complex:
    """L(v): data terms paired against the operators of v."""
    return complex(_pairwise_form(None, _as_components(v), model, mesh,
                                  lambdas, points_per_axis, with_data=True))


def data_constant(model, mesh, lambdas=None, points_per_axis=None) -> float:
    """sum_i lambda_i ||data_i||^2, the constant in J(v) = a(v,v) - 2 Re L(v) + const."""
    ws = Workspace(model, mesh, points_per_axis)
    lam = np.asarray(model.lambda_init if lambdas is None else lambdas, float)
    total = 0.0
    for tc in ws.term_ctxs:
        if tc.group is None or tc.data is None:
            continue
        total += lam[tc.index] * float(np.sum(tc.group.w * np.abs(tc.data) ** 2))
    return total
