import numpy as np
import pytest

from dgnet import models
from dgnet.netfn import (ConfigurationError, ElementNetwork, EvalBundle,
                         Geometry, KernelTerm, NetworkSet, PlaneWave, PolyWave,
                         SigmoidOneLayer, SigmoidPoleError, SigmoidTwoLayer,
                         apply_coeffs, make_family, param_gradient,
                         trefftz_residual)

G2 = Geometry(space_axes=(0, 1))
GT = Geometry(space_axes=(0,), time_axis=1)
rng = np.random.default_rng(42)


def sigmoid1_net(n=1, W=None, b=None, c=None, geometry=G2):
    fam = SigmoidOneLayer(geometry)
    W = np.zeros((n, geometry.dim)) if W is None else np.asarray(W, float)
    b = np.zeros(n) if b is None else np.asarray(b, float)
    c = np.ones(n) if c is None else np.asarray(c)
    return ElementNetwork(fam, {"W": W, "b": b}, c)


def test_sigmoid_constant_input():
    net = sigmoid1_net()
    out = net.eval([0.7, 0.2])
    assert out.value == pytest.approx(0.5)
    np.testing.assert_allclose(out.grad, [0.0, 0.0])
    assert out.lap == pytest.approx(0.0)


def test_plane_wave_at_origin():
    w = 4 * np.pi
    fam = PlaneWave(G2, omega=w)
    net = ElementNetwork(fam, {"theta": np.zeros(1)}, np.ones(1, dtype=complex))
    out = net.eval([0.0, 0.0])
    assert out.value == pytest.approx(1.0)
    np.testing.assert_allclose(out.grad, [1j * w, 0.0], atol=1e-14)
    assert out.lap == pytest.approx(-w**2)


def test_two_layer_laplacian_vs_five_point_difference():
    fam = SigmoidTwoLayer(G2)
    m1, m2 = 3, 4
    params = {
        "W1": rng.standard_normal((1, m1, 2)),
        "b1": rng.standard_normal((1, m1)),
        "W2": rng.standard_normal((1, m2, m1)),
        "b2": rng.standard_normal((1, m2)),
    }
    c = rng.standard_normal(m2)
    net = ElementNetwork(fam, {k: v[0] for k, v in params.items()}, c)
    x0 = np.array([0.31, 0.47])
    h = 1e-4

    def val(p):
        return net.eval(p).value

    fd = (val(x0 + [h, 0]) + val(x0 - [h, 0]) + val(x0 + [0, h])
          + val(x0 - [0, h]) - 4 * val(x0)) / h**2
    lap = net.eval(x0).lap
    assert abs(lap - fd) / abs(fd) < 1e-6


def test_two_layer_laplacian_term_decomposition():
    # The Laplacian equals the two-term chain-rule decomposition computed
    # term by term from the cached forward quantities.
    fam = SigmoidTwoLayer(G2)
    m1, m2 = 2, 3
    params = {
        "W1": rng.standard_normal((1, m1, 2)),
        "b1": rng.standard_normal((1, m1)),
        "W2": rng.standard_normal((1, m2, m1)),
        "b2": rng.standard_normal((1, m2)),
    }
    pts = rng.random((1, 5, 2))
    basis = fam.basis(params, pts, ("lap",))

    from dgnet.netfn import _sigmoid_orders

    U1 = np.einsum("ksd,kpd->kps", params["W1"], pts) + params["b1"][:, None, :]
    s1 = _sigmoid_orders(U1, 2)
    U2 = np.einsum("kls,kps->kpl", params["W2"], s1[0]) + params["b2"][:, None, :]
    s2 = _sigmoid_orders(U2, 2)
    A = np.einsum("kls,kps,ksd->kpld", params["W2"], s1[1], params["W1"])
    term1 = s2[2] * (A**2).sum(-1)
    term2 = s2[1] * np.einsum("kls,kps,ks->kpl", params["W2"], s1[2],
                              (params["W1"]**2).sum(-1))
    np.testing.assert_allclose(basis.lap, term1 + term2, rtol=1e-13)


def test_real_parameters_give_real_bundles():
    net = sigmoid1_net(3, W=rng.standard_normal((3, 2)),
                       b=rng.standard_normal(3), c=rng.standard_normal(3))
    out = net.eval([0.2, 0.9])
    for entry in ("value", "grad", "lap"):
        assert not np.iscomplexobj(getattr(out, entry))


def test_eval_homogeneous_in_coefficients():
    W = rng.standard_normal((4, 2))
    b = rng.standard_normal(4)
    c = rng.standard_normal(4)
    a = sigmoid1_net(4, W, b, c).eval([0.3, 0.4])
    bC = sigmoid1_net(4, W, b, 2.5 * c).eval([0.3, 0.4])
    assert bC.value == pytest.approx(2.5 * a.value)
    np.testing.assert_allclose(bC.grad, 2.5 * a.grad)
    assert bC.lap == pytest.approx(2.5 * a.lap)


def test_sigmoid_pole_guard():
    fam = SigmoidOneLayer(G2)
    # xi = i*pi at the evaluation point puts 1 + e^{-xi} at zero.
    net = ElementNetwork(fam, {"W": np.zeros((1, 2), dtype=complex),
                               "b": np.array([1j * np.pi])},
                         np.ones(1, dtype=complex))
    with pytest.raises(SigmoidPoleError):
        net.eval([0.5, 0.5])


# -- parameter gradients -------------------------------------------------------


def _kernel_loss(nset, pts, w, base, coefs):
    needs = [e for e in EvalBundle.ENTRIES if e in coefs]
    bundle = nset.field(pts, None, needs)
    r = base + apply_coeffs(coefs, bundle)
    return float(np.sum(w * np.abs(r) ** 2).real)


def _fd_entry(nset, pts, w, base, coefs, key, idx, delta, h=1e-6):
    def at(eps):
        p = {k: v.copy() for k, v in nset.params.items()}
        p[key] = p[key].copy()
        p[key][idx] += eps * delta
        return _kernel_loss(NetworkSet(nset.family, p, nset.coeffs,
                                       nset.n_elements), pts, w, base, coefs)
    return (at(h) - at(-h)) / (2 * h)


def _analytic_gradient(nset, pts, w, base, coefs):
    needs = [e for e in EvalBundle.ENTRIES if e in coefs]
    bundle = nset.field(pts, None, needs)
    r = base + apply_coeffs(coefs, bundle)
    return param_gradient(nset, [KernelTerm(pts, w, r, coefs, None)])


def _gradient_case(fam, params, coeffs, complex_loss, timed, seed):
    lrng = np.random.default_rng(seed)
    K = params[next(iter(params))].shape[0] if params else 2
    nset = NetworkSet(fam, params, coeffs, K)
    P = 6
    pts = lrng.random((K, P, 2))
    w = lrng.random((K, P)) + 0.5
    coefs = {
        "value": lrng.random((K, P)) + (1j * lrng.random((K, P)) if complex_loss else 0.0),
        "grad": lrng.random((K, P, fam.geometry.ds)),
        "lap": 0.3 * lrng.random((K, P)),
    }
    if timed:
        coefs["dt"] = lrng.random((K, P))
        coefs["dtt"] = lrng.random((K, P))
    base = lrng.random((K, P)) + (1j * lrng.random((K, P)) if complex_loss else 0.0)
    grads = _analytic_gradient(nset, pts, w, base, coefs)

    # Oracle: central finite differences of the quadrature-discretized loss,
    # checked entrywise in norm over sampled entries.
    fd_vec, an_vec = [], []
    for key in fam.trainable:
        arr = nset.params[key]
        flat = [tuple(idx) for idx in np.ndindex(*arr.shape)]
        sample = flat if len(flat) <= 24 else [
            flat[i] for i in lrng.choice(len(flat), 24, replace=False)]
        for idx in sample:
            g = grads[key][idx]
            fd_re = _fd_entry(nset, pts, w, base, coefs, key, idx, 1.0)
            if np.iscomplexobj(arr):
                fd_im = _fd_entry(nset, pts, w, base, coefs, key, idx, 1.0j)
                fd_vec += [fd_re, fd_im]
                an_vec += [g.real, g.imag]
            else:
                fd_vec.append(fd_re)
                an_vec.append(np.real(g))
    fd_vec, an_vec = np.array(fd_vec), np.array(an_vec)
    return np.linalg.norm(an_vec - fd_vec) / np.linalg.norm(fd_vec)


def test_gradient_sigmoid1_real():
    fam = SigmoidOneLayer(G2)
    params = {"W": rng.standard_normal((2, 4, 2)), "b": rng.standard_normal((2, 4))}
    err = _gradient_case(fam, params, rng.standard_normal((2, 4)), False, False, 1)
    assert err < 1e-6


def test_gradient_sigmoid1_complex():
    fam = SigmoidOneLayer(G2)
    params = {"W": rng.standard_normal((2, 4, 2)) + 1j * rng.standard_normal((2, 4, 2)),
              "b": rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))}
    c = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
    err = _gradient_case(fam, params, c, True, False, 2)
    assert err < 1e-6


def test_gradient_sigmoid1_spacetime():
    fam = SigmoidOneLayer(GT)
    params = {"W": rng.standard_normal((2, 4, 2)), "b": rng.standard_normal((2, 4))}
    err = _gradient_case(fam, params, rng.standard_normal((2, 4)), False, True, 3)
    assert err < 1e-6


def test_gradient_sigmoid2_complex():
    fam = SigmoidTwoLayer(G2)
    m1, m2 = 3, 5
    params = {
        "W1": rng.standard_normal((2, m1, 2)) + 0j,
        "b1": np.ones((2, m1), dtype=complex),
        "W2": 1j * rng.standard_normal((2, m2, m1)),
        "b2": np.ones((2, m2), dtype=complex),
    }
    c = rng.standard_normal((2, m2)) + 1j * rng.standard_normal((2, m2))
    err = _gradient_case(fam, params, c, True, False, 4)
    assert err < 1e-6


def test_gradient_sigmoid2_real_spacetime():
    fam = SigmoidTwoLayer(GT)
    m1, m2 = 3, 5
    params = {
        "W1": rng.standard_normal((2, m1, 2)),
        "b1": np.ones((2, m1)),
        "W2": rng.standard_normal((2, m2, m1)),
        "b2": np.ones((2, m2)),
    }
    err = _gradient_case(fam, params, rng.standard_normal((2, m2)), False, True, 5)
    assert err < 1e-6


def test_gradient_plane_wave():
    fam = PlaneWave(G2, omega=4 * np.pi)
    params = {"theta": 2 * np.pi * rng.random((2, 5))}
    c = rng.standard_normal((2, 5)) + 1j * rng.standard_normal((2, 5))
    err = _gradient_case(fam, params, c, True, False, 6)
    assert err < 1e-6


def test_gradient_zero_at_stationary_point():
    # Zero residual at every quadrature point gives a zero gradient.
    fam = SigmoidOneLayer(G2)
    params = {"W": rng.standard_normal((1, 3, 2)), "b": rng.standard_normal((1, 3))}
    nset = NetworkSet(fam, params, rng.standard_normal((1, 3)), 1)
    pts = rng.random((1, 5, 2))
    w = np.ones((1, 5))
    coefs = {"value": np.ones((1, 5))}
    r = np.zeros((1, 5))
    grads = param_gradient(nset, [KernelTerm(pts, w, r, coefs, None)])
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0)


def test_gradient_linear_in_quadrature_weights():
    fam = SigmoidOneLayer(G2)
    params = {"W": rng.standard_normal((1, 3, 2)), "b": rng.standard_normal((1, 3))}
    nset = NetworkSet(fam, params, rng.standard_normal((1, 3)), 1)
    pts = rng.random((1, 5, 2))
    w = rng.random((1, 5)) + 0.1
    coefs = {"value": np.ones((1, 5)), "lap": 0.5 * np.ones((1, 5))}
    bundle = nset.field(pts, None, ("value", "lap"))
    r = 1.0 + apply_coeffs(coefs, bundle)
    g1 = param_gradient(nset, [KernelTerm(pts, w, r, coefs, None)])
    g2 = param_gradient(nset, [KernelTerm(pts, 2.0 * w, r, coefs, None)])
    for k in g1:
        np.testing.assert_allclose(g2[k], 2.0 * g1[k], rtol=1e-13)


# -- Trefftz families ----------------------------------------------------------


def test_plane_wave_annihilates_helmholtz():
    model = models.helmholtz_2d("constant")
    fam = PlaneWave(model.geometry, omega=model.omega)
    net = ElementNetwork(fam, {"theta": 2 * np.pi * rng.random(5)},
                         rng.standard_normal(5) + 1j * rng.standard_normal(5))
    pts = rng.random((100, 2))
    assert trefftz_residual(net, model, pts) < 1e-12 * model.omega**2


def test_poly_wave_annihilates_wave_operator():
    model = models.wave_1p1d(10.0)
    fam = PolyWave(model.geometry, wavespeed=10.0, max_degree=5)
    net = ElementNetwork(fam, {"center": np.array([0.5, 0.5])},
                         rng.standard_normal(fam.width))
    pts = rng.random((100, 2))
    assert trefftz_residual(net, model, pts) < 1e-10


def test_sigmoid_is_not_trefftz():
    model = models.helmholtz_2d("constant")
    fam = SigmoidOneLayer(model.geometry)
    net = ElementNetwork(
        fam,
        {"W": 1j * model.omega * rng.standard_normal((4, 2)),
         "b": np.ones(4, dtype=complex)},
        np.ones(4, dtype=complex))
    pts = rng.random((100, 2))
    assert trefftz_residual(net, model, pts) > 1.0


def test_family_model_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        PlaneWave(GT, omega=1.0)
    with pytest.raises(ConfigurationError):
        PolyWave(G2, wavespeed=1.0, max_degree=2)
    with pytest.raises(ConfigurationError):
        make_family("no-such-family", G2)


def test_operator_missing_bundle_entry_is_configuration_error():
    fam = PlaneWave(G2, omega=1.0)
    nset = NetworkSet(fam, {"theta": np.zeros((1, 2))},
                      np.ones((1, 2), dtype=complex), 1)
    bundle = nset.field(np.zeros((1, 3, 2)), None, ("value",))
    with pytest.raises(ConfigurationError):
        apply_coeffs({"dt": 1.0}, bundle)
