import numpy as np
import pytest

from dgnet import models
from dgnet.mesh import build_mesh
from dgnet.metrics import error_norms
from dgnet.trainer import init_candidate

rng = np.random.default_rng(5)


def test_exact_wrapper_has_zero_error():
    model = models.poisson_2d()
    mesh = build_mesh(model.box, [3, 3])
    err = error_norms([model.exact_field()], model, mesh)
    assert err.rel_l2 == pytest.approx(0.0, abs=1e-14)
    assert err.rel_h1_space == pytest.approx(0.0, abs=1e-14)


def test_zero_solution_has_unit_relative_error():
    model = models.helmholtz_2d("constant")
    mesh = build_mesh(model.box, [3, 3])
    err = error_norms([], model, mesh)
    assert err.rel_l2 == pytest.approx(1.0)
    assert err.rel_h1_space == pytest.approx(1.0)


def test_spacetime_reports_time_seminorm():
    model = models.wave_1p1d(10.0)
    mesh = build_mesh(model.box, [3, 3], time_axis=1)
    err = error_norms([], model, mesh)
    assert err.rel_h1_time == pytest.approx(1.0)
    assert err.rel_h1_spacetime == pytest.approx(1.0)
    stationary = error_norms([], models.poisson_2d(), build_mesh([[0, 1], [0, 1]], [2, 2]))
    assert stationary.rel_h1_time is None


def test_quadrature_against_denser_oracle():
    model = models.poisson_2d()
    mesh = build_mesh(model.box, [4, 4])
    cand = init_candidate(model, mesh, "sigmoid-1-layer", 4, 1, seed=0)
    cand.coeffs = rng.standard_normal(cand.coeffs.shape)
    base = error_norms([cand], model, mesh)
    dense = error_norms([cand], model, mesh, points_per_axis=30)
    assert base.rel_l2 == pytest.approx(dense.rel_l2, rel=1e-8)
    assert base.rel_h1_space == pytest.approx(dense.rel_h1_space, rel=1e-8)


def test_triangle_sanity_for_added_correction():
    # || err(u0 + xi) - err(u0) || <= ||xi|| in the same quadrature norm.
    model = models.poisson_2d()
    mesh = build_mesh(model.box, [3, 3])
    u0 = init_candidate(model, mesh, "sigmoid-1-layer", 3, 1, seed=1)
    u0.coeffs = 0.1 * rng.standard_normal(u0.coeffs.shape)
    xi = init_candidate(model, mesh, "sigmoid-1-layer", 3, 2, seed=2)
    xi.coeffs = 0.1 * rng.standard_normal(xi.coeffs.shape)

    e_u0 = error_norms([u0], model, mesh)
    e_both = error_norms([u0, xi], model, mesh)
    zero = models.poisson_2d()
    # norm of xi alone relative to the exact-solution norm
    from dgnet.quadrature import element_rule

    rule = element_rule(mesh.elements[0], 10)
    offs = mesh.elements[:, :, 0] - mesh.elements[0, :, 0]
    pts = rule.points[None] + offs[:, None, :]
    xi_vals = xi.eval_bundle(pts, np.arange(mesh.n_elements), ("value",)).value
    xi_norm = np.sqrt(np.sum(rule.weights[None] * np.abs(xi_vals) ** 2))
    rel_xi = xi_norm / e_u0.exact_l2
    assert abs(e_both.rel_l2 - e_u0.rel_l2) <= rel_xi + 1e-12


def test_zero_exact_norm_rejected():
    import dgnet.mesh as meshmod
    from dgnet.models import ExactSolution, LossTerm, PDEModel
    from dgnet.netfn import Geometry

    exact = ExactSolution(
        value=lambda p: np.zeros(p.shape[:-1]),
        grad=lambda p: np.zeros(p.shape[:-1] + (2,)),
        lap=lambda p: np.zeros(p.shape[:-1]),
    )
    model = PDEModel(
        name="null", kind="poisson", variant="constant",
        box=np.array([[0.0, 1.0], [0.0, 1.0]]),
        geometry=Geometry(space_axes=(0, 1)), is_complex=False,
        needs=("value", "grad", "lap"),
        terms=(LossTerm("interior", "volume", lambda pts, n, s: {"lap": -1.0},
                        data=lambda pts, n: np.zeros(pts.shape[:-1])),),
        lambda_init=np.ones(1), exact=exact)
    mesh = build_mesh(model.box, [2, 2])
    with pytest.raises(ValueError):
        error_norms([], model, mesh)
