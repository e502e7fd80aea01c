"""PDE model registry: operators, data, exact solutions, relaxation weights.

Each model is a bundle of quadratic-loss terms.  A term applies a linear
operator to the evaluation bundle of a trial function on one integration
domain (elements, a boundary/initial face set, or one interior face
category) and subtracts its data; the loss is the weighted sum of the
squared term residuals.  Operators are stored as coefficient maps
entry -> coefficient so that loss evaluation, Gram assembly, and parameter
gradients all share one mechanical path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mesh as meshmod
from .netfn import EvalBundle, Geometry

__all__ = [
    "LossTerm",
    "ExactSolution",
    "AnalyticField",
    "PDEModel",
    "poisson_2d",
    "helmholtz_2d",
    "wave_1p1d",
    "model_by_name",
    "validate_model",
]


@dataclass(frozen=True)
class LossTerm:
    """One residual term of the quadratic loss.

    ``coeffs(pts, normal, sign)`` returns the operator's coefficient map; on
    interior faces it is called once per side with that side's outward normal
    and sign (+1 for the normal-owning neighbor, -1 for the other).  ``data``
    is None for homogeneous interface terms.  ``predicate`` filters boundary
    faces (e.g. a Dirichlet subset).
    """

    name: str
    domain: str
    coeffs: Callable
    data: Callable | None = None
    predicate: Callable | None = None


@dataclass(frozen=True)
class ExactSolution:
    value: Callable
    grad: Callable
    lap: Callable
    dt: Callable | None = None
    dtt: Callable | None = None

    def bundle(self, pts, needs) -> EvalBundle:
        out = {}
        for name in needs:
            fn = getattr(self, name)
            if fn is None:
                raise ValueError(f"exact solution provides no {name!r}")
            out[name] = fn(pts)
        return EvalBundle(**out)


class AnalyticField:
    """Solution component wrapping closed-form callables (exact-function wrapper)."""

    def __init__(self, solution: ExactSolution):
        self.solution = solution

    def eval_bundle(self, pts, elem_idx, needs) -> EvalBundle:
        return self.solution.bundle(pts, needs)


@dataclass
class PDEModel:
    """Operator bundle, coefficients, data, and exact solution of one experiment."""

    name: str
    kind: str
    variant: str
    box: np.ndarray
    geometry: Geometry
    is_complex: bool
    needs: tuple[str, ...]
    terms: tuple[LossTerm, ...]
    lambda_init: np.ndarray
    exact: ExactSolution
    omega: float = 0.0
    rho: Callable | None = None
    wavespeed: Callable | None = None
    wavespeed_mean: float | None = None

    @property
    def interior_term(self) -> LossTerm:
        return self.terms[0]

    @property
    def dim(self) -> int:
        return self.box.shape[0]

    def exact_field(self) -> AnalyticField:
        return AnalyticField(self.exact)


def poisson_2d() -> PDEModel:
    """2D Poisson: -lap(u) = f on the unit square, Dirichlet trace data.

    Manufactured solution u = x cos y, for which f = x cos y as well.
    """
    exact = ExactSolution(
        value=lambda p: p[..., 0] * np.cos(p[..., 1]),
        grad=lambda p: np.stack(
            [np.cos(p[..., 1]), -p[..., 0] * np.sin(p[..., 1])], axis=-1),
        lap=lambda p: -p[..., 0] * np.cos(p[..., 1]),
    )
    f = exact.value
    terms = (
        LossTerm("interior", "volume",
                 lambda pts, n, s: {"lap": -1.0},
                 data=lambda pts, n: f(pts)),
        LossTerm("dirichlet", meshmod.BOUNDARY,
                 lambda pts, n, s: {"value": 1.0},
                 data=lambda pts, n: exact.value(pts)),
        LossTerm("jump_value", meshmod.INTERIOR_TIME,
                 lambda pts, n, s: {"value": s}),
        LossTerm("jump_grad", meshmod.INTERIOR_TIME,
                 lambda pts, n, s: {"grad": n}),
    )
    lam = np.array([1.0, 200.0 * math.pi, 200.0 * math.pi, 1.0])
    return PDEModel(
        name="poisson", kind="poisson", variant="constant",
        box=np.array([[0.0, 1.0], [0.0, 1.0]]),
        geometry=Geometry(space_axes=(0, 1)),
        is_complex=False,
        needs=("value", "grad", "lap"),
        terms=terms, lambda_init=lam, exact=exact,
    )


def helmholtz_2d(rho="constant", omega: float = 4.0 * math.pi) -> PDEModel:
    """2D Helmholtz with impedance boundary: -lap(u) - w^2 rho u = f.

    rho = 1 pairs with u = w x cos y + y sin(w x); rho = x^2 + y^2 with
    u = y sin(w x).  Data g = (d/dn + i w) u on the boundary.
    """
    w = float(omega)
    if callable(rho):
        raise ValueError("pass rho='constant' or rho='variable'")
    if rho in ("constant", 1, 1.0):
        variant = "constant"
        rho_fn = lambda p: np.ones(p.shape[:-1])
        exact = ExactSolution(
            value=lambda p: w * p[..., 0] * np.cos(p[..., 1])
            + p[..., 1] * np.sin(w * p[..., 0]),
            grad=lambda p: np.stack([
                w * np.cos(p[..., 1]) + w * p[..., 1] * np.cos(w * p[..., 0]),
                -w * p[..., 0] * np.sin(p[..., 1]) + np.sin(w * p[..., 0]),
            ], axis=-1),
            lap=lambda p: -(w ** 2) * p[..., 1] * np.sin(w * p[..., 0])
            - w * p[..., 0] * np.cos(p[..., 1]),
        )
        f = lambda p: (1.0 - w ** 2) * w * p[..., 0] * np.cos(p[..., 1])
    elif rho == "variable":
        variant = "variable"
        rho_fn = lambda p: p[..., 0] ** 2 + p[..., 1] ** 2
        exact = ExactSolution(
            value=lambda p: p[..., 1] * np.sin(w * p[..., 0]),
            grad=lambda p: np.stack([
                w * p[..., 1] * np.cos(w * p[..., 0]),
                np.sin(w * p[..., 0]),
            ], axis=-1),
            lap=lambda p: -(w ** 2) * p[..., 1] * np.sin(w * p[..., 0]),
        )
        f = lambda p: (w ** 2) * p[..., 1] * np.sin(w * p[..., 0]) * (1.0 - rho_fn(p))
    else:
        raise ValueError(f"unsupported rho choice {rho!r}")

    def g(pts, n):
        return (exact.grad(pts) * n).sum(-1) + 1j * w * exact.value(pts)

    terms = (
        LossTerm("interior", "volume",
                 lambda pts, n, s: {"lap": -1.0, "value": -(w ** 2) * rho_fn(pts)},
                 data=lambda pts, n: f(pts)),
        LossTerm("impedance", meshmod.BOUNDARY,
                 lambda pts, n, s: {"grad": n, "value": 1j * w},
                 data=g),
        LossTerm("jump_value", meshmod.INTERIOR_TIME,
                 lambda pts, n, s: {"value": s}),
        LossTerm("jump_grad", meshmod.INTERIOR_TIME,
                 lambda pts, n, s: {"grad": n}),
    )
    lam = np.array([1.0, w ** 2, w ** 4, w ** 2])
    return PDEModel(
        name=f"helmholtz-{variant}", kind="helmholtz", variant=variant,
        box=np.array([[0.0, 1.0], [0.0, 1.0]]),
        geometry=Geometry(space_axes=(0, 1)),
        is_complex=True,
        needs=("value", "grad", "lap"),
        terms=terms, lambda_init=lam, exact=exact, omega=w, rho=rho_fn,
    )


def wave_1p1d(c=10.0) -> PDEModel:
    """(1+1)D scalar wave -u_xx + c^-2 u_tt = f on (0,1)x(0,1), Gamma_D = dOmega.

    Exact solution u = sin(pi x) sin(sqrt(2) pi t); the Dirichlet operator is
    the time derivative trace, the (empty) Neumann set carries the negative
    space-normal derivative.
    """
    if isinstance(c, str):
        if c.replace(" ", "") != "x+1":
            raise ValueError(f"unsupported wavespeed choice {c!r}")
        variant = "variable"
        c_fn = lambda p: p[..., 0] + 1.0
        c_mean = 1.5
    elif callable(c):
        raise ValueError("pass a constant wavespeed or the string 'x+1'")
    else:
        variant = "constant"
        c_val = float(c)
        c_fn = lambda p: np.full(p.shape[:-1], c_val)
        c_mean = c_val

    rt2pi = math.sqrt(2.0) * math.pi
    exact = ExactSolution(
        value=lambda p: np.sin(math.pi * p[..., 0]) * np.sin(rt2pi * p[..., 1]),
        grad=lambda p: (math.pi * np.cos(math.pi * p[..., 0])
                        * np.sin(rt2pi * p[..., 1]))[..., None],
        lap=lambda p: -(math.pi ** 2) * np.sin(math.pi * p[..., 0])
        * np.sin(rt2pi * p[..., 1]),
        dt=lambda p: rt2pi * np.sin(math.pi * p[..., 0]) * np.cos(rt2pi * p[..., 1]),
        dtt=lambda p: -(rt2pi ** 2) * np.sin(math.pi * p[..., 0])
        * np.sin(rt2pi * p[..., 1]),
    )

    def f(pts, n):
        return -exact.lap(pts) + exact.dtt(pts) / c_fn(pts) ** 2

    terms = (
        LossTerm("interior", "volume",
                 lambda pts, n, s: {"lap": -1.0, "dtt": c_fn(pts) ** -2},
                 data=f),
        LossTerm("dirichlet", meshmod.BOUNDARY,
                 lambda pts, n, s: {"dt": 1.0},
                 data=lambda pts, n: exact.dt(pts)),
        LossTerm("neumann", meshmod.BOUNDARY,
                 lambda pts, n, s: {"grad": -n[..., :1]},
                 data=lambda pts, n: -(exact.grad(pts) * n[..., :1]).sum(-1),
                 predicate=lambda face: False),
        LossTerm("initial_value", meshmod.INITIAL,
                 lambda pts, n, s: {"value": 1.0},
                 data=lambda pts, n: exact.value(pts)),
        LossTerm("initial_velocity", meshmod.INITIAL,
                 lambda pts, n, s: {"dt": 1.0},
                 data=lambda pts, n: exact.dt(pts)),
        LossTerm("jump_value_n", meshmod.INTERIOR_TIME,
                 lambda pts, n, s: {"value": n[..., 0]}),
        LossTerm("jump_dt_n", meshmod.INTERIOR_TIME,
                 lambda pts, n, s: {"dt": n[..., 0]}),
        LossTerm("jump_flux_n", meshmod.INTERIOR_TIME,
                 lambda pts, n, s: {"grad": -n[..., :1]}),
        LossTerm("jump_value_t", meshmod.INTERIOR_SPACE,
                 lambda pts, n, s: {"value": s}),
        LossTerm("jump_dt_t", meshmod.INTERIOR_SPACE,
                 lambda pts, n, s: {"dt": s}),
        LossTerm("jump_flux_t", meshmod.INTERIOR_SPACE,
                 lambda pts, n, s: {"grad": -s * np.ones(1)}),
    )
    # Weights follow the dimensional ladder pi^(2(1-order)): the interior
    # operator (order 2) gets 1/pi^2, every first-derivative trace operator
    # gets 1, and the three value-trace operators (initial value and the two
    # value jumps) get pi^2.  The same ladder with omega in place of pi
    # reproduces the Helmholtz weights exactly.  The empty Neumann set keeps
    # weight 1.
    pi2 = math.pi ** 2
    lam = np.array([1.0 / pi2, 1.0, 1.0, pi2, 1.0, pi2, 1.0, 1.0, pi2, 1.0, 1.0])
    return PDEModel(
        name=f"wave-{variant}", kind="wave", variant=variant,
        box=np.array([[0.0, 1.0], [0.0, 1.0]]),
        geometry=Geometry(space_axes=(0,), time_axis=1),
        is_complex=False,
        needs=("value", "grad", "lap", "dt", "dtt"),
        terms=terms, lambda_init=lam, exact=exact,
        wavespeed=c_fn, wavespeed_mean=c_mean,
    )


def model_by_name(name: str, **kwargs) -> PDEModel:
    if name == "poisson":
        return poisson_2d()
    if name == "helmholtz":
        return helmholtz_2d(**kwargs)
    if name == "wave":
        return wave_1p1d(**kwargs)
    raise ValueError(f"unknown model {name!r}; choose poisson, helmholtz, or wave")


def validate_model(model: PDEModel, n_samples: int = 1000, seed: int = 0,
                   tol: float = 1e-9) -> float:
    """Check that every residual operator annihilates the exact solution.

    Samples interior points for the volume operator, box sides for the
    boundary/initial operators, and synthetic two-sided traces for the jump
    operators.  Returns the largest relative residual found; raises if it
    exceeds ``tol``.
    """
    rng = np.random.default_rng(seed)
    box = model.box
    dim = model.dim
    pts = box[:, 0] + rng.random((1, n_samples, dim)) * (box[:, 1] - box[:, 0])
    needs = model.needs
    exact = model.exact
    worst = 0.0

    from .netfn import apply_coeffs

    def rel_residual(term, p, normal, pair):
        nonlocal worst
        bundle = exact.bundle(p, needs)
        if pair:
            r = apply_coeffs(term.coeffs(p, normal, 1.0), bundle)
            r = r + apply_coeffs(term.coeffs(p, -normal, -1.0), bundle)
            scale = np.abs(apply_coeffs(term.coeffs(p, normal, 1.0), bundle)).max()
        else:
            r = apply_coeffs(term.coeffs(p, normal, 1.0), bundle)
            if term.data is not None:
                r = r - term.data(p, normal)
            scale = max(np.abs(term.data(p, normal)).max() if term.data else 0.0, 1.0)
        val = float(np.abs(r).max() / max(scale, 1.0))
        worst = max(worst, val)
        return val

    for term in model.terms:
        if term.domain == "volume":
            rel_residual(term, pts, None, pair=False)
        elif term.domain in (meshmod.BOUNDARY, meshmod.INITIAL):
            for axis in range(dim):
                if term.domain == meshmod.INITIAL and axis != model.geometry.time_axis:
                    continue
                if term.domain == meshmod.BOUNDARY and axis == model.geometry.time_axis:
                    continue
                for end, sgn in ((0, -1.0), (1, 1.0)):
                    if term.domain == meshmod.INITIAL and end == 1:
                        continue
                    p = pts.copy()
                    p[..., axis] = box[axis, end]
                    normal = np.zeros(dim)
                    normal[axis] = sgn
                    rel_residual(term, p, normal, pair=False)
        else:
            axes = ([model.geometry.time_axis] if term.domain == meshmod.INTERIOR_SPACE
                    else [a for a in range(dim) if a != model.geometry.time_axis])
            for axis in axes:
                normal = np.zeros(dim)
                normal[axis] = 1.0
                rel_residual(term, pts, normal, pair=True)

    if worst > tol:
        raise ValueError(f"model {model.name}: exact solution leaves residual {worst:.3e}")
    return worst
