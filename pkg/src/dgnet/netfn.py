"""Element-wise activation families: values, PDE derivatives, parameter gradients.

Four families are implemented:

* ``sigmoid-1-layer``: one hidden layer of complex sigmoid neurons.
* ``sigmoid-2-layer``: two hidden layers; the basis functions are the second
  layer's outputs.
* ``plane-wave``: exp(i w d.x) with unit directions d(theta); annihilates the
  constant-coefficient Helmholtz interior operator.
* ``poly-wave``: monomials Q_l(d.x - c t) of a traveling-wave argument;
  annihilates the constant-wavespeed wave interior operator.

All evaluation is batched over elements and quadrature points.  Parameter
gradients are exact for the quadrature-discretized loss and are computed by
hand-written reverse mode; complex parameters use the Wirtinger convention
grad = 2 dJ/d(conj p), so a real loss decreases along the negative gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Geometry",
    "EvalBundle",
    "Family",
    "SigmoidOneLayer",
    "SigmoidTwoLayer",
    "PlaneWave",
    "PolyWave",
    "NetworkSet",
    "ElementNetwork",
    "KernelTerm",
    "param_gradient",
    "trefftz_residual",
    "apply_coeffs",
    "add_bundles",
    "SigmoidPoleError",
    "ConfigurationError",
    "make_family",
]

POLE_TOL = 1e-12


class SigmoidPoleError(ArithmeticError):
    """Complex sigmoid evaluated too close to a pole i(pi + 2 pi k)."""


class ConfigurationError(ValueError):
    """Family and model disagree on derivative requirements or pairing."""


@dataclass(frozen=True)
class Geometry:
    """Which point coordinates are space and which (if any) is time."""

    space_axes: tuple[int, ...]
    time_axis: int | None = None

    @property
    def dim(self) -> int:
        return len(self.space_axes) + (self.time_axis is not None)

    @property
    def ds(self) -> int:
        return len(self.space_axes)


@dataclass
class EvalBundle:
    """Value and the PDE derivatives of a function at one or many points.

    ``grad`` collects derivatives along the space axes only; ``dt``/``dtt``
    are first/second time derivatives and stay None for stationary problems.
    For basis-mode evaluation the entries gain a trailing basis axis
    (value: (..., n), grad: (..., n, ds)).
    """

    value: np.ndarray | None = None
    grad: np.ndarray | None = None
    lap: np.ndarray | None = None
    dt: np.ndarray | None = None
    dtt: np.ndarray | None = None

    ENTRIES = ("value", "grad", "lap", "dt", "dtt")

    def get(self, name):
        return getattr(self, name)


def add_bundles(a: EvalBundle | None, b: EvalBundle) -> EvalBundle:
    if a is None:
        return b
    out = {}
    for name in EvalBundle.ENTRIES:
        x, y = getattr(a, name), getattr(b, name)
        if x is None:
            out[name] = y
        elif y is None:
            out[name] = x
        else:
            out[name] = x + y
    return EvalBundle(**out)


def _sigmoid_orders(xi: np.ndarray, nmax: int) -> list[np.ndarray]:
    """sigma and its first nmax derivatives, via s' = s(1-s)."""
    if np.iscomplexobj(xi):
        with np.errstate(over="ignore", invalid="ignore"):
            den = 1.0 + np.exp(-xi)
        amin = np.abs(den).min() if den.size else np.inf
        if amin < POLE_TOL:
            raise SigmoidPoleError(
                f"sigmoid argument within {amin:.2e} of a pole (tol {POLE_TOL:g})"
            )
        s = 1.0 / den
    else:
        # Stable real path: no overflow for large |xi|.
        s = np.empty_like(xi)
        pos = xi >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-xi[pos]))
        e = np.exp(xi[~pos])
        s[~pos] = e / (1.0 + e)
    out = [s]
    if nmax >= 1:
        s1 = s * (1.0 - s)
        out.append(s1)
    if nmax >= 2:
        s2 = s1 * (1.0 - 2.0 * s)
        out.append(s2)
    if nmax >= 3:
        out.append(s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1)
    return out


def _needs_tuple(needs) -> tuple[str, ...]:
    needs = tuple(needs)
    for n in needs:
        if n not in EvalBundle.ENTRIES:
            raise ValueError(f"unknown bundle entry {n!r}")
    return needs


class Family:
    """Stateless behavior of one activation family over a fixed geometry."""

    tag: str = ""
    trainable: tuple[str, ...] = ()

    def __init__(self, geometry: Geometry):
        self.geometry = geometry

    # Subclasses implement basis/field/vjp with params carrying a leading
    # element axis K that matches pts (K, P, dim).
    def basis(self, params, pts, needs) -> EvalBundle:
        raise NotImplementedError

    def field(self, params, coeffs, pts, needs) -> EvalBundle:
        raise NotImplementedError

    def vjp(self, params, coeffs, pts, cot: EvalBundle) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def width_of(self, params) -> int:
        raise NotImplementedError

    def annihilates_interior(self) -> bool:
        """True for Trefftz families paired with their model."""
        return False


class SigmoidOneLayer(Family):
    tag = "sigmoid-1-layer"
    trainable = ("W", "b")

    def width_of(self, params) -> int:
        return params["b"].shape[-1]

    def _prep(self, params, pts, nmax):
        W, b = params["W"], params["b"]
        xi = np.einsum("knd,kpd->kpn", W, pts) + b[:, None, :]
        return W, _sigmoid_orders(xi, nmax)

    def basis(self, params, pts, needs) -> EvalBundle:
        needs = _needs_tuple(needs)
        g = self.geometry
        sp = list(g.space_axes)
        nmax = 2 if any(n in needs for n in ("lap", "dtt")) else (
            1 if any(n in needs for n in ("grad", "dt")) else 0)
        W, s = self._prep(params, pts, nmax)
        out = {}
        if "value" in needs:
            out["value"] = s[0]
        if "grad" in needs:
            out["grad"] = s[1][..., None] * W[:, None, :, :][..., sp]
        if "lap" in needs:
            S = (W[:, :, sp] ** 2).sum(-1)
            out["lap"] = s[2] * S[:, None, :]
        if g.time_axis is not None:
            Wt = W[:, :, g.time_axis]
            if "dt" in needs:
                out["dt"] = s[1] * Wt[:, None, :]
            if "dtt" in needs:
                out["dtt"] = s[2] * (Wt ** 2)[:, None, :]
        return EvalBundle(**out)

    def field(self, params, coeffs, pts, needs) -> EvalBundle:
        needs = _needs_tuple(needs)
        g = self.geometry
        sp = list(g.space_axes)
        nmax = 2 if any(n in needs for n in ("lap", "dtt")) else (
            1 if any(n in needs for n in ("grad", "dt")) else 0)
        W, s = self._prep(params, pts, nmax)
        c = coeffs
        out = {}
        if "value" in needs:
            out["value"] = np.einsum("kpn,kn->kp", s[0], c)
        if "grad" in needs:
            out["grad"] = np.einsum("kpn,knd->kpd", s[1] * c[:, None, :], W[:, :, sp])
        if "lap" in needs:
            S = (W[:, :, sp] ** 2).sum(-1)
            out["lap"] = np.einsum("kpn,kn->kp", s[2], c * S)
        if g.time_axis is not None:
            Wt = W[:, :, g.time_axis]
            if "dt" in needs:
                out["dt"] = np.einsum("kpn,kn->kp", s[1], c * Wt)
            if "dtt" in needs:
                out["dtt"] = np.einsum("kpn,kn->kp", s[2], c * Wt ** 2)
        return EvalBundle(**out)

    def vjp(self, params, coeffs, pts, cot: EvalBundle) -> dict[str, np.ndarray]:
        g = self.geometry
        sp = list(g.space_axes)
        W, s = self._prep(params, pts, 3)
        c = coeffs
        cb = c[:, None, :]
        tau = g.time_axis
        Wt = W[:, :, tau] if tau is not None else None
        S = (W[:, :, sp] ** 2).sum(-1)

        dtype = np.result_type(W, pts, c, cot.value if cot.value is not None else 0.0)
        gW = np.zeros_like(W, dtype=dtype)
        xi_bar = np.zeros(s[0].shape, dtype=dtype)

        if cot.value is not None:
            xi_bar += np.conj(cot.value)[:, :, None] * cb * s[1]
        if cot.grad is not None:
            wg = np.conj(cot.grad)
            xi_bar += np.einsum("kps,kns->kpn", wg, W[:, :, sp]) * cb * s[2]
            gW[:, :, sp] += np.einsum("kps,kpn->kns", wg, cb * s[1])
        if cot.lap is not None:
            wl = np.conj(cot.lap)
            xi_bar += wl[:, :, None] * (c * S)[:, None, :] * s[3]
            gS = np.einsum("kp,kpn->kn", wl, cb * s[2])
            gW[:, :, sp] += 2.0 * W[:, :, sp] * gS[:, :, None]
        if cot.dt is not None:
            wdt = np.conj(cot.dt)
            xi_bar += wdt[:, :, None] * (c * Wt)[:, None, :] * s[2]
            gW[:, :, tau] += np.einsum("kp,kpn->kn", wdt, cb * s[1])
        if cot.dtt is not None:
            wdtt = np.conj(cot.dtt)
            xi_bar += wdtt[:, :, None] * (c * Wt ** 2)[:, None, :] * s[3]
            gW[:, :, tau] += 2.0 * Wt * np.einsum("kp,kpn->kn", wdtt, cb * s[2])

        gW += np.einsum("kpn,kpd->knd", xi_bar, pts)
        gb = xi_bar.sum(axis=1)
        return {"W": np.conj(gW), "b": np.conj(gb)}


class SigmoidTwoLayer(Family):
    tag = "sigmoid-2-layer"
    trainable = ("W1", "b1", "W2", "b2")

    def width_of(self, params) -> int:
        return params["b2"].shape[-1]

    def _forward(self, params, pts, nmax):
        g = self.geometry
        sp = list(g.space_axes)
        W1, b1 = params["W1"], params["b1"]
        W2, b2 = params["W2"], params["b2"]
        U1 = np.einsum("ksd,kpd->kps", W1, pts) + b1[:, None, :]
        s1 = _sigmoid_orders(U1, nmax)
        U2 = np.einsum("kls,kps->kpl", W2, s1[0]) + b2[:, None, :]
        s2 = _sigmoid_orders(U2, nmax)
        A = np.einsum("kls,kps,ksd->kpld", W2, s1[1], W1)
        P = (W1[:, :, sp] ** 2).sum(-1)
        G = np.einsum("kls,kps,ks->kpl", W2, s1[2], P)
        cache = {"W1": W1, "W2": W2, "s1": s1, "s2": s2, "A": A, "P": P, "G": G}
        if g.time_axis is not None:
            Wt = W1[:, :, g.time_axis]
            cache["Wt"] = Wt
            cache["H"] = np.einsum("kls,kps,ks->kpl", W2, s1[2], Wt ** 2)
        return cache

    def basis(self, params, pts, needs) -> EvalBundle:
        needs = _needs_tuple(needs)
        g = self.geometry
        sp = list(g.space_axes)
        f = self._forward(params, pts, 2)
        s2, A = f["s2"], f["A"]
        out = {}
        if "value" in needs:
            out["value"] = s2[0]
        if "grad" in needs:
            out["grad"] = s2[1][..., None] * A[..., sp]
        if "lap" in needs:
            SA = (A[..., sp] ** 2).sum(-1)
            out["lap"] = s2[2] * SA + s2[1] * f["G"]
        if g.time_axis is not None:
            At = A[..., g.time_axis]
            if "dt" in needs:
                out["dt"] = s2[1] * At
            if "dtt" in needs:
                out["dtt"] = s2[2] * At ** 2 + s2[1] * f["H"]
        return EvalBundle(**out)

    def field(self, params, coeffs, pts, needs) -> EvalBundle:
        basis = self.basis(params, pts, needs)
        return _contract_basis(basis, coeffs)

    def vjp(self, params, coeffs, pts, cot: EvalBundle) -> dict[str, np.ndarray]:
        g = self.geometry
        sp = list(g.space_axes)
        tau = g.time_axis
        f = self._forward(params, pts, 3)
        W1, W2, s1, s2, A, P, G = (
            f["W1"], f["W2"], f["s1"], f["s2"], f["A"], f["P"], f["G"])
        c = coeffs[:, None, :]

        dtype = np.result_type(W1, W2, pts, coeffs, cot.value if cot.value is not None else 0.0)
        U2_bar = np.zeros(s2[0].shape, dtype=dtype)
        A_bar = np.zeros(A.shape, dtype=dtype)
        G_bar = None
        H_bar = None

        if cot.value is not None:
            U2_bar += np.conj(cot.value)[:, :, None] * c * s2[1]
        if cot.grad is not None:
            wg = np.conj(cot.grad)
            U2_bar += np.einsum("kpt,kplt->kpl", wg, A[..., sp]) * c * s2[2]
            A_bar[..., sp] += wg[:, :, None, :] * (c * s2[1])[..., None]
        if cot.lap is not None:
            wl = np.conj(cot.lap)
            SA = (A[..., sp] ** 2).sum(-1)
            U2_bar += wl[:, :, None] * c * (s2[3] * SA + s2[2] * G)
            A_bar[..., sp] += wl[:, :, None, None] * (c * s2[2])[..., None] * 2.0 * A[..., sp]
            G_bar = wl[:, :, None] * c * s2[1]
        if cot.dt is not None:
            wdt = np.conj(cot.dt)
            U2_bar += wdt[:, :, None] * c * s2[2] * A[..., tau]
            A_bar[..., tau] += wdt[:, :, None] * c * s2[1]
        if cot.dtt is not None:
            wdtt = np.conj(cot.dtt)
            At = A[..., tau]
            U2_bar += wdtt[:, :, None] * c * (s2[3] * At ** 2 + s2[2] * f["H"])
            A_bar[..., tau] += wdtt[:, :, None] * c * s2[2] * 2.0 * At
            H_bar = wdtt[:, :, None] * c * s2[1]

        gW2 = np.einsum("kpld,kps,ksd->kls", A_bar, s1[1], W1)
        s1p_bar = np.einsum("kpld,kls,ksd->kps", A_bar, W2, W1)
        gW1 = np.einsum("kpld,kls,kps->ksd", A_bar, W2, s1[1])
        s1pp_bar = np.zeros(s1[0].shape, dtype=dtype)
        if G_bar is not None:
            gW2 += np.einsum("kpl,kps,ks->kls", G_bar, s1[2], P)
            s1pp_bar += np.einsum("kpl,kls,ks->kps", G_bar, W2, P)
            P_bar = np.einsum("kpl,kls,kps->ks", G_bar, W2, s1[2])
            gW1[:, :, sp] += 2.0 * W1[:, :, sp] * P_bar[:, :, None]
        if H_bar is not None:
            Wt = f["Wt"]
            gW2 += np.einsum("kpl,kps,ks->kls", H_bar, s1[2], Wt ** 2)
            s1pp_bar += np.einsum("kpl,kls,ks->kps", H_bar, W2, Wt ** 2)
            gW1[:, :, tau] += 2.0 * Wt * np.einsum("kpl,kls,kps->ks", H_bar, W2, s1[2])

        gW2 += np.einsum("kpl,kps->kls", U2_bar, s1[0])
        gb2 = U2_bar.sum(axis=1)
        z1_bar = np.einsum("kpl,kls->kps", U2_bar, W2)
        U1_bar = z1_bar * s1[1] + s1p_bar * s1[2] + s1pp_bar * s1[3]
        gW1 += np.einsum("kps,kpd->ksd", U1_bar, pts)
        gb1 = U1_bar.sum(axis=1)
        return {
            "W1": np.conj(gW1),
            "b1": np.conj(gb1),
            "W2": np.conj(gW2),
            "b2": np.conj(gb2),
        }


class PlaneWave(Family):
    """exp(i w d.x) with d = (cos theta, sin theta); Trefftz for Helmholtz rho=1."""

    tag = "plane-wave"
    trainable = ("theta",)

    def __init__(self, geometry: Geometry, omega: float):
        if geometry.time_axis is not None or geometry.ds != 2:
            raise ConfigurationError("plane-wave family requires 2 space axes, no time")
        super().__init__(geometry)
        self.omega = float(omega)

    def width_of(self, params) -> int:
        return params["theta"].shape[-1]

    def annihilates_interior(self) -> bool:
        return True

    def _dirs(self, theta):
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    def basis(self, params, pts, needs) -> EvalBundle:
        needs = _needs_tuple(needs)
        w = self.omega
        d = self._dirs(params["theta"])
        E = np.exp(1j * w * np.einsum("knd,kpd->kpn", d, pts))
        out = {}
        if "value" in needs:
            out["value"] = E
        if "grad" in needs:
            out["grad"] = 1j * w * E[..., None] * d[:, None, :, :]
        if "lap" in needs:
            out["lap"] = -(w ** 2) * E
        return EvalBundle(**out)

    def field(self, params, coeffs, pts, needs) -> EvalBundle:
        return _contract_basis(self.basis(params, pts, needs), coeffs)

    def vjp(self, params, coeffs, pts, cot: EvalBundle) -> dict[str, np.ndarray]:
        w = self.omega
        theta = params["theta"]
        d = self._dirs(theta)
        dperp = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
        E = np.exp(1j * w * np.einsum("knd,kpd->kpn", d, pts))
        T = 1j * w * np.einsum("knd,kpd->kpn", dperp, pts) * E
        Ec, Tc = np.conj(E), np.conj(T)

        acc = np.zeros(E.shape, dtype=complex)
        if cot.value is not None:
            acc += cot.value[:, :, None] * Tc
        if cot.lap is not None:
            acc += -(w ** 2) * cot.lap[:, :, None] * Tc
        if cot.grad is not None:
            gdp = np.einsum("kps,kns->kpn", cot.grad, dperp)
            gd = np.einsum("kps,kns->kpn", cot.grad, d)
            acc += -1j * w * (gdp * Ec + gd * Tc)
        g = np.einsum("kn,kpn->kn", np.conj(coeffs), acc)
        return {"theta": g.real}


class PolyWave(Family):
    """Polynomials of the traveling-wave argument d x - c t in one space dim.

    Per degree l the direction set is {+1} for l = 0 and {+1, -1} for l >= 1,
    so degrees 0..p give width 2p + 1.  The d'Alembert structure makes every
    member annihilate the constant-wavespeed wave operator; there are no
    trainable nonlinear parameters (the unit "circle" in one space dimension
    is the discrete set {-1, +1}).

    Each element evaluates the degree-l monomial on its own affinely
    rescaled argument: d x - c t centered at the element and divided by the
    argument half-width.  The per-element span is unchanged, but raw
    monomials of d x - c t are numerically collinear on elements far from
    the argument origin and ruin the Gram conditioning.  The optional
    ``params['center']`` (n_elements, 2) holds the centers; not trainable.
    """

    tag = "poly-wave"
    trainable = ()

    def __init__(self, geometry: Geometry, wavespeed: float, max_degree: int,
                 arg_halfwidth: float = 1.0):
        if geometry.time_axis is None or geometry.ds != 1:
            raise ConfigurationError("poly-wave family requires 1 space axis plus time")
        super().__init__(geometry)
        self.wavespeed = float(wavespeed)
        self.max_degree = int(max_degree)
        self.arg_halfwidth = float(arg_halfwidth)
        degrees = [0]
        dirs = [1.0]
        for l in range(1, self.max_degree + 1):
            degrees += [l, l]
            dirs += [1.0, -1.0]
        self.degrees = np.array(degrees)
        self.dirs = np.array(dirs)

    @property
    def width(self) -> int:
        return self.degrees.size

    def width_of(self, params) -> int:
        return self.width

    def annihilates_interior(self) -> bool:
        return True

    def basis(self, params, pts, needs) -> EvalBundle:
        needs = _needs_tuple(needs)
        g = self.geometry
        x = pts[..., g.space_axes[0]]
        t = pts[..., g.time_axis]
        c = self.wavespeed
        center = params.get("center")
        if center is not None:
            extra = (1,) * (x.ndim - center.ndim + 1)
            x = x - center[..., 0].reshape(center.shape[:-1] + extra)
            t = t - center[..., 1].reshape(center.shape[:-1] + extra)
        h = self.arg_halfwidth
        s = (self.dirs * x[..., None] - c * t[..., None]) / h

        shape = s.shape
        val = np.empty(shape)
        d1 = np.zeros(shape)
        d2 = np.zeros(shape)
        for l in np.unique(self.degrees):
            cols = np.nonzero(self.degrees == l)[0]
            sl = s[..., cols]
            val[..., cols] = sl ** l
            if l >= 1:
                d1[..., cols] = (l / h) * sl ** (l - 1)
            if l >= 2:
                d2[..., cols] = (l * (l - 1) / h ** 2) * sl ** (l - 2)
        out = {}
        if "value" in needs:
            out["value"] = val
        if "grad" in needs:
            out["grad"] = (d1 * self.dirs)[..., None]
        if "lap" in needs:
            out["lap"] = d2
        if "dt" in needs:
            out["dt"] = -c * d1
        if "dtt" in needs:
            out["dtt"] = c * c * d2
        return EvalBundle(**out)

    def field(self, params, coeffs, pts, needs) -> EvalBundle:
        return _contract_basis(self.basis(params, pts, needs), coeffs)

    def vjp(self, params, coeffs, pts, cot: EvalBundle) -> dict[str, np.ndarray]:
        return {}


def _contract_basis(basis: EvalBundle, coeffs) -> EvalBundle:
    out = {}
    for name in EvalBundle.ENTRIES:
        arr = getattr(basis, name)
        if arr is None:
            continue
        if name == "grad":
            out[name] = np.einsum("kpnd,kn->kpd", arr, coeffs)
        else:
            out[name] = np.einsum("kpn,kn->kp", arr, coeffs)
    return EvalBundle(**out)


def make_family(tag: str, geometry: Geometry, *, omega=None, wavespeed=None,
                max_degree=None, arg_halfwidth=1.0) -> Family:
    if tag == SigmoidOneLayer.tag:
        return SigmoidOneLayer(geometry)
    if tag == SigmoidTwoLayer.tag:
        return SigmoidTwoLayer(geometry)
    if tag == PlaneWave.tag:
        if omega is None:
            raise ConfigurationError("plane-wave family needs a wavenumber")
        return PlaneWave(geometry, omega)
    if tag == PolyWave.tag:
        if wavespeed is None or max_degree is None:
            raise ConfigurationError("poly-wave family needs wavespeed and max degree")
        return PolyWave(geometry, wavespeed, max_degree, arg_halfwidth)
    raise ConfigurationError(f"unknown activation family {tag!r}")


@dataclass
class NetworkSet:
    """All elements' networks of one candidate: stacked parameters plus coefficients.

    ``params`` arrays carry a leading element axis; ``coeffs`` is the
    (n_elements, width) array of linear output coefficients.
    """

    family: Family
    params: dict
    coeffs: np.ndarray
    n_elements: int

    @classmethod
    def create(cls, family: Family, params: dict, n_elements: int,
               complex_coeffs: bool) -> "NetworkSet":
        width = family.width_of(params)
        dtype = complex if complex_coeffs else float
        return cls(family, params, np.zeros((n_elements, width), dtype=dtype), n_elements)

    @property
    def width(self) -> int:
        return self.family.width_of(self.params)

    def _gather(self, elem_idx):
        if elem_idx is None:
            return self.params, self.coeffs
        return ({k: v[elem_idx] for k, v in self.params.items()},
                self.coeffs[elem_idx])

    def basis(self, pts, elem_idx, needs) -> EvalBundle:
        p, _ = self._gather(elem_idx)
        return self.family.basis(p, pts, needs)

    def field(self, pts, elem_idx, needs) -> EvalBundle:
        p, c = self._gather(elem_idx)
        return self.family.field(p, c, pts, needs)

    # Solution-component protocol, shared with spectral and analytic fields.
    def eval_bundle(self, pts, elem_idx, needs) -> EvalBundle:
        return self.field(pts, elem_idx, needs)

    def vjp_rows(self, pts, elem_idx, cot: EvalBundle) -> dict[str, np.ndarray]:
        """Per-row parameter gradients; the caller scatter-adds by element."""
        p, c = self._gather(elem_idx)
        return self.family.vjp(p, c, pts, cot)

    def zero_param_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(self.params[k]) for k in self.family.trainable}

    def copy(self) -> "NetworkSet":
        return NetworkSet(self.family, {k: v.copy() for k, v in self.params.items()},
                          self.coeffs.copy(), self.n_elements)

    def param_inf_diff(self, other: "NetworkSet") -> float:
        keys = self.family.trainable
        if not keys:
            return 0.0
        return max(
            (float(np.abs(self.params[k] - other.params[k]).max()) for k in keys),
            default=0.0,
        )

    def stepped(self, grads: dict, alpha: float) -> dict:
        """New params dict with trainable entries moved along -alpha * grads."""
        out = dict(self.params)
        for k in self.family.trainable:
            out[k] = self.params[k] - alpha * grads[k]
        return out


@dataclass
class ElementNetwork:
    """One element's trainable function: a single row of a NetworkSet."""

    family: Family
    params: dict            # per-element shapes, no leading element axis
    coeffs: np.ndarray

    def _lifted(self):
        return {k: v[None, ...] for k, v in self.params.items()}

    def eval(self, point) -> EvalBundle:
        """Value and all derivatives the paired model needs, at one point."""
        pts = np.asarray(point, dtype=float)[None, None, :]
        g = self.family.geometry
        needs = ["value", "grad", "lap"]
        if g.time_axis is not None:
            needs += ["dt", "dtt"]
        out = self.family.field(self._lifted(), self.coeffs[None, :], pts, needs)
        return EvalBundle(**{
            name: (getattr(out, name)[0, 0] if getattr(out, name) is not None else None)
            for name in EvalBundle.ENTRIES
        })

    def as_set(self) -> NetworkSet:
        return NetworkSet(self.family, self._lifted(), self.coeffs[None, :], 1)


@dataclass
class KernelTerm:
    """One quadrature-discretized residual term of a loss kernel.

    The residual at each point is r = sum_e coeffs[e] * bundle_e of the
    network field plus whatever frozen/data part produced ``residual``; the
    kernel value is sum_p weights * |residual|^2.
    """

    pts: np.ndarray                  # (K, P, dim)
    weights: np.ndarray              # (K, P)
    residual: np.ndarray             # (K, P)
    coeffs: dict                     # bundle entry -> (K, P) or (K, P, ds)
    elem_idx: np.ndarray | None = None   # rows -> element indices; None = identity


def param_gradient(networks: NetworkSet, kernel) -> dict[str, np.ndarray]:
    """Gradient of a weighted residual kernel over the nonlinear parameters.

    Exact for the given quadrature discretization.  Complex parameters follow
    the Wirtinger-conjugate convention; gradients of terms whose rows map to
    elements are scatter-added into full (n_elements, ...) arrays.
    """
    grads = networks.zero_param_grads()
    for term in kernel:
        wr = 2.0 * term.weights * term.residual
        cot = {}
        for entry, coef in term.coeffs.items():
            if entry == "grad":
                cot[entry] = wr[..., None] * np.conj(coef)
            else:
                cot[entry] = wr * np.conj(coef)
        rows = networks.vjp_rows(term.pts, term.elem_idx, EvalBundle(
            value=cot.get("value"), grad=cot.get("grad"), lap=cot.get("lap"),
            dt=cot.get("dt"), dtt=cot.get("dtt")))
        for k, g in rows.items():
            if term.elem_idx is None:
                grads[k] += g
            else:
                np.add.at(grads[k], term.elem_idx, g)
    return grads


def trefftz_residual(net, model, sample_points) -> float:
    """max |A(net)| over the samples, A being the model's interior operator.

    Zero (to roundoff) certifies the Trefftz property of wave families paired
    with their constant-coefficient model.
    """
    pts = np.asarray(sample_points, dtype=float)
    nset = net.as_set() if isinstance(net, ElementNetwork) else net
    if pts.ndim == 2:
        # Same samples for every element row of the set.
        pts = np.broadcast_to(pts, (nset.n_elements,) + pts.shape).copy()
    bundle = nset.field(pts, None, model.needs)
    coeffs = model.interior_term.coeffs(pts, None, 1.0)
    res = apply_coeffs(coeffs, bundle)
    return float(np.abs(res).max())


def apply_coeffs(coeffs: dict, bundle: EvalBundle):
    """sum_e coef_e * bundle_e for field-mode bundles.

    Gradient coefficients are arrays over the space axes and contract with
    the bundle's gradient; all other entries multiply pointwise.
    """
    out = None
    for entry, coef in coeffs.items():
        arr = bundle.get(entry)
        if arr is None:
            raise ConfigurationError(f"operator needs bundle entry {entry!r} "
                                     "the family does not provide")
        if entry == "grad":
            piece = (np.asarray(coef) * arr).sum(axis=-1)
        else:
            piece = coef * arr
        out = piece if out is None else out + piece
    return out
