"""Alternating training loop and the outer residual-correction iteration.

Each outer iteration initializes a fresh candidate set of element networks
from the model's template, then alternates: (1) a Galerkin least-squares
solve for the linear coefficients with the nonlinear weights frozen, (2) an
adaptive rebalance of the relaxation weights from gradient statistics, and
(3) monotone gradient-descent steps on the nonlinear weights with
backtracking.  The resulting correction is frozen and added to the
accumulated approximation; the loop stops on the loss/error tolerance, the
iteration cap, or schedule exhaustion.

Every state change is accepted only if it does not increase the loss as
measured at the moment of the change, so the recorded loss trace is
nonincreasing across epochs and iterations.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass, field as dfield

import numpy as np

from . import initseed
from .assembly import Workspace, solve_linear
from .metrics import error_norms
from .netfn import ConfigurationError, NetworkSet, apply_coeffs, make_family

__all__ = [
    "WidthSchedule",
    "TrainConfig",
    "DGSolution",
    "ConvergenceRecord",
    "init_candidate",
    "inner_epoch",
    "galerkin_iterate",
    "run_training",
]


@dataclass(frozen=True)
class WidthSchedule:
    """Candidate width per outer iteration r = 1, 2, ...

    Supported forms: "a r + b" (e.g. "2r+9"), "(r+a)^2", a constant, or an
    explicit comma list (which can be exhausted).
    """

    kind: str
    a: int = 0
    b: int = 0
    items: tuple[int, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "WidthSchedule":
        s = str(text).strip().replace(" ", "")
        m = re.fullmatch(r"(\d+)\*?r([+-]\d+)?", s)
        if m:
            return cls("linear", a=int(m.group(1)), b=int(m.group(2) or 0))
        m = re.fullmatch(r"\(r\+(\d+)\)\^2", s)
        if m:
            return cls("square", a=int(m.group(1)))
        if re.fullmatch(r"\d+", s):
            return cls("linear", a=0, b=int(s))
        if re.fullmatch(r"\d+(,\d+)*", s):
            return cls("list", items=tuple(int(x) for x in s.split(",")))
        raise ValueError(f"cannot parse width schedule {text!r}")

    def width(self, r: int) -> int | None:
        if self.kind == "linear":
            return self.a * r + self.b
        if self.kind == "square":
            return (r + self.a) ** 2
        if self.kind == "list":
            return self.items[r - 1] if r <= len(self.items) else None
        raise ValueError(self.kind)


@dataclass
class TrainConfig:
    """Hyperparameters of the alternating training loop."""

    schedule: WidthSchedule = dfield(default_factory=lambda: WidthSchedule.parse("2r+9"))
    family: str = "sigmoid-1-layer"
    m1: int | str | WidthSchedule | None = None   # fixed, or a schedule like "2r+3"
    maxit: int = 15
    traincount: int = 2
    rho: float = 1e-4
    tol: float = 1e-3
    beta: float = 0.1
    grad_steps: int = 50
    lr: float = 1e-2
    backtrack_max: int = 30
    step3: str = "gd"                   # gd | projected
    seed: int = 0
    init: str = "zero"                  # zero | spectral | exact
    spectral_order: int | None = None
    spectral_constrained: bool = True
    fictitious_scale: float = 1.1
    points_per_axis: int | None = None
    ridge: float | None = None
    lambda_override: tuple | None = None

    def validate(self):
        if not (0.0 < self.beta <= 1.0):
            raise ValueError("beta must be in (0, 1]")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if self.maxit < 0 or self.traincount < 1:
            raise ValueError("maxit must be >= 0 and traincount >= 1")
        widths = [self.schedule.width(r) for r in range(1, max(self.maxit, 1) + 1)]
        widths = [w for w in widths if w is not None]
        if any(w <= 0 for w in widths):
            raise ValueError("width schedule must produce positive widths")
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError("width schedule must be nondecreasing")


class DGSolution:
    """Accumulated approximation: an initializer field plus frozen corrections."""

    def __init__(self, model, initializer=None, label: str = "zero"):
        self.model = model
        self.initializer = initializer
        self.label = label
        self.corrections: list[NetworkSet] = []

    @property
    def components(self) -> list:
        head = [self.initializer] if self.initializer is not None else []
        return head + self.corrections

    def with_candidate(self, candidate) -> list:
        return self.components + [candidate]

    def add_correction(self, candidate: NetworkSet):
        self.corrections.append(candidate)


@dataclass
class ConvergenceRecord:
    """Per-epoch and per-iteration trace of one training run."""

    term_names: tuple[str, ...]
    rows: list = dfield(default_factory=list)
    status: str = ""
    on_row: object = None

    def add(self, **kw):
        self.rows.append(kw)
        if self.on_row is not None:
            self.on_row(kw)

    def iteration_rows(self):
        return [r for r in self.rows if r["kind"] == "iteration"]

    def epoch_rows(self):
        return [r for r in self.rows if r["kind"] == "epoch"]

    def j_trace(self):
        return [r["J"] for r in self.rows]

    def last(self):
        return self.rows[-1]


def resolve_m1(m1, r: int) -> int | None:
    """First-layer width for iteration r; accepts a constant or a schedule."""
    if m1 is None:
        return None
    if isinstance(m1, str):
        m1 = WidthSchedule.parse(m1)
    if isinstance(m1, WidthSchedule):
        return m1.width(r)
    return int(m1)


def _haar_orthogonal(m: int, rng) -> np.ndarray:
    A = rng.standard_normal((m, m))
    Q, R = np.linalg.qr(A)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


def _unit_circle(n: int) -> np.ndarray:
    theta = 2.0 * math.pi * np.arange(1, n + 1) / n
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def init_candidate(model, mesh, family_tag: str, width: int, r: int, seed: int,
                   m1: int | None = None) -> NetworkSet:
    """Fresh candidate networks per the model's initialization template.

    Identical seeds give bitwise-identical parameters; the random orthogonal
    factor of two-layer templates is drawn once per outer iteration and
    shared by all elements.
    """
    rng = np.random.default_rng([int(seed), int(r)])
    N = mesh.n_elements
    dim = model.dim
    dtype = complex if model.is_complex else float

    if family_tag == "sigmoid-1-layer":
        family = make_family(family_tag, model.geometry)
        dirs = _unit_circle(width)
        scale = 1j * model.omega if model.kind == "helmholtz" else 1.0
        W = np.broadcast_to(scale * dirs, (N, width, dim)).astype(dtype).copy()
        b = np.ones((N, width), dtype=dtype)
        params = {"W": W, "b": b}
    elif family_tag == "sigmoid-2-layer":
        if m1 is None:
            raise ValueError("two-layer template needs m1")
        m2 = width
        if m2 < m1:
            raise ValueError(f"template requires m2 >= m1, got m2={m2} < m1={m1}")
        family = make_family(family_tag, model.geometry)
        dirs = _unit_circle(m1)
        Q = _haar_orthogonal(m2, rng)[:, :m1]
        if model.kind == "helmholtz":
            W2_one = 1j * model.omega * Q
        elif model.kind == "wave":
            W2_one = -model.wavespeed_mean * Q
        else:
            W2_one = Q
        params = {
            "W1": np.broadcast_to(dirs, (N, m1, dim)).astype(dtype).copy(),
            "b1": np.ones((N, m1), dtype=dtype),
            "W2": np.broadcast_to(W2_one, (N, m2, m1)).astype(dtype).copy(),
            "b2": np.ones((N, m2), dtype=dtype),
        }
    elif family_tag == "plane-wave":
        if model.kind != "helmholtz" or model.variant != "constant":
            raise ConfigurationError(
                "plane-wave candidates pair with the constant-coefficient Helmholtz model")
        family = make_family(family_tag, model.geometry, omega=model.omega)
        theta = 2.0 * math.pi * np.arange(1, width + 1) / width
        params = {"theta": np.broadcast_to(theta, (N, width)).copy()}
    elif family_tag == "poly-wave":
        if model.kind != "wave" or model.variant != "constant":
            raise ConfigurationError(
                "poly-wave candidates pair with the constant-wavespeed wave model")
        if width % 2 != 1:
            raise ValueError(f"poly-wave widths are odd (2p+1), got {width}")
        p = (width - 1) // 2
        widths = mesh.element_widths
        halfwidth = 0.5 * (widths[model.geometry.space_axes[0]]
                           + model.wavespeed_mean * widths[model.geometry.time_axis])
        family = make_family(family_tag, model.geometry,
                             wavespeed=model.wavespeed_mean, max_degree=p,
                             arg_halfwidth=halfwidth)
        params = {"center": mesh.elements.mean(axis=-1)}
    else:
        raise ConfigurationError(f"unknown activation family {family_tag!r}")

    cand = NetworkSet.create(family, params, N, complex_coeffs=model.is_complex)
    if not params:
        cand.n_elements = N
    if family.annihilates_interior():
        _certify_trefftz(cand, model, rng)
    return cand


def _certify_trefftz(candidate: NetworkSet, model, rng, rel_tol: float = 1e-9):
    """Spot-check that the candidate family annihilates the interior operator."""
    box = model.box
    pts = box[:, 0] + rng.random((1, 32, model.dim)) * (box[:, 1] - box[:, 0])
    pts = np.broadcast_to(pts, (candidate.n_elements,) + pts.shape[1:]).copy()
    probe = candidate.copy()
    probe.coeffs = np.ones_like(probe.coeffs)
    bundle = probe.field(pts, None, model.needs)
    coeffs = model.interior_term.coeffs(pts, None, 1.0)
    scale = 1.0
    for entry, coef in coeffs.items():
        arr = bundle.get(entry)
        mag = np.abs(np.asarray(coef) * (arr if entry != "grad" else arr.sum(-1)))
        scale = max(scale, float(mag.max()))
    res = float(np.abs(apply_coeffs(coeffs, bundle)).max())
    if res > rel_tol * scale:
        raise ConfigurationError(
            f"family {candidate.family.tag} is not Trefftz for {model.name}: "
            f"residual {res:.3e} vs scale {scale:.3e}")


def _j_of(comps, lam) -> float:
    return float(np.asarray(lam) @ np.asarray(comps))


def galerkin_lsq_step(ws: Workspace, candidate: NetworkSet, lam, ridge=None):
    """Step 1: solve the normal equations; keep the old coefficients if the
    (ridged) solution fails to decrease the loss."""
    ws.assemble(candidate)
    system = ws.system_for(lam)
    sol = solve_linear(system, ridge)
    old = ws.term_losses_at(candidate.coeffs.reshape(-1))
    new = ws.term_losses_at(sol.flat)
    if _j_of(new, lam) <= _j_of(old, lam):
        candidate.coeffs = sol.coeffs
        return new, sol
    return old, sol


def update_lambdas(ws: Workspace, candidate: NetworkSet, lam, beta: float):
    """Step 2: blend each weight towards lambda_0 max|grad L_R| / mean|grad L_i|.

    Gradient statistics run over all trainable parameters (linear and
    nonlinear) at the current iterate.  The update is skipped entirely when
    the interior reference gradient vanishes, when a component's mean
    gradient is zero (that entry only), or when the reweighting would
    increase the current loss value (preserving the monotone loss trace).
    """
    lam = np.asarray(lam, float)
    residuals = ws.candidate_residuals(candidate)
    cflat = candidate.coeffs.reshape(-1)
    cgrads = ws.coeff_gradients(cflat)
    pgrads = ws.per_term_param_grads(candidate, residuals)
    mags = []
    for cg, pg in zip(cgrads, pgrads):
        parts = [np.abs(cg).ravel()] + [np.abs(v).ravel() for v in pg.values()]
        mags.append(np.concatenate(parts))
    num = float(mags[0].max()) if mags[0].size else 0.0
    if num == 0.0:
        return lam, False
    new = lam.copy()
    for i in range(1, len(lam)):
        mean = float(mags[i].mean()) if mags[i].size else 0.0
        if mean == 0.0:
            continue
        new[i] = (1.0 - beta) * lam[i] + beta * (lam[0] * num / mean)
    # Reject updates that would inflate the current loss value.  The raw
    # statistics form a positive feedback loop (terms the solve satisfies
    # get lighter gradients, hence ever-larger boosts) that measurably
    # destabilizes training when allowed to run; benign rebalances pass.
    comps = ws.term_losses_at(cflat)
    if _j_of(comps, new) > _j_of(comps, lam):
        return lam, False
    return new, True


def descent_phase(ws: Workspace, candidate: NetworkSet, lam, cfg: TrainConfig,
                  j_start: float, comps_start):
    """Step 3: monotone gradient descent on the nonlinear parameters.

    Each step restarts from the configured learning rate and halves it until
    the loss strictly decreases; an exhausted line search aborts the phase
    with the parameters unchanged (best-so-far kept).

    ``cfg.step3 = "projected"`` evaluates each trial on the projected
    functional min_c J(Phi, c), re-solving the least-squares coefficients
    inside the line search.  The gradient is unchanged (the envelope theorem
    makes the partial gradient at the solved coefficients the gradient of
    the projected functional); what changes is the landscape the line search
    sees.  With the coefficients frozen, large near-cancelling coefficient
    vectors give the loss an enormous curvature along the gradient and
    backtracking collapses to null steps; the projected path retunes the
    coefficients and takes real steps.  It costs one assembly per trial, so
    it suits the small two-layer configurations.
    """
    j_cur, comps_cur = float(j_start), np.asarray(comps_start, float)
    grad_inf, steps, aborted = 0.0, 0, False
    if not candidate.family.trainable:
        return j_cur, comps_cur, steps, grad_inf, aborted
    # Each projected trial costs a full assembly; past ~12 halvings the step
    # is 4000x below the lr-sized start and further probing is pointless.
    max_halvings = min(cfg.backtrack_max, 12) if cfg.step3 == "projected" \
        else cfg.backtrack_max
    # Re-measure the starting loss on the quadrature path so the line search
    # compares like with like (the assembled-quadratic value differs by a few
    # ulps, which would mask genuinely accepted small steps).  Projected
    # trials compare algebraic values, for which j_start already is one.
    if cfg.step3 != "projected":
        lb0 = ws.loss(candidate, lam)
        if np.isfinite(lb0.total) and lb0.total <= j_cur + 1e-9 * max(1.0, j_cur):
            j_cur, comps_cur = lb0.total, lb0.components
    for _ in range(cfg.grad_steps):
        residuals = ws.candidate_residuals(candidate)
        grads = ws.param_grad(candidate, lam, residuals)
        grad_inf = max((float(np.abs(g).max()) for g in grads.values()), default=0.0)
        if grad_inf == 0.0:
            break
        # The loss carries heterogeneous relaxation weights (up to omega^4),
        # so raw gradient magnitudes dwarf the O(1) parameters; normalizing
        # the initial rate makes the first trial a lr-sized parameter step,
        # which backtracking then refines.
        alpha = cfg.lr / max(1.0, grad_inf)
        accepted = False
        for _ in range(max_halvings + 1):
            trial_params = candidate.stepped(grads, alpha)
            trial = NetworkSet(candidate.family, trial_params, candidate.coeffs,
                               candidate.n_elements)
            if cfg.step3 == "projected":
                tcomps, _ = galerkin_lsq_step(ws, trial, lam, cfg.ridge)
                jt = _j_of(tcomps, lam)
                comps_t = np.asarray(tcomps, float)
            else:
                lb = ws.loss(trial, lam)
                jt, comps_t = lb.total, lb.components
            if np.isfinite(jt) and jt < j_cur:
                candidate.params = trial_params
                if cfg.step3 == "projected":
                    candidate.coeffs = trial.coeffs
                j_cur, comps_cur = jt, comps_t
                accepted = True
                steps += 1
                break
            alpha *= 0.5
        if not accepted:
            aborted = True
            break
    return j_cur, comps_cur, steps, grad_inf, aborted


def inner_epoch(ws: Workspace, candidate: NetworkSet, lam, cfg: TrainConfig):
    """One epoch: LS solve, relaxation update, gradient descent.

    Returns (info, new_lam); ``info['phi_diff']`` is the sup-norm parameter
    change the stagnation test uses.
    """
    before = {k: candidate.params[k].copy() for k in candidate.family.trainable}
    comps1, sol = galerkin_lsq_step(ws, candidate, lam, cfg.ridge)
    lam, lam_moved = update_lambdas(ws, candidate, lam, cfg.beta)
    j1 = _j_of(comps1, lam)
    j_end, comps, steps, grad_inf, aborted = descent_phase(
        ws, candidate, lam, cfg, j1, comps1)
    phi_diff = 0.0
    for k in candidate.family.trainable:
        phi_diff = max(phi_diff, float(np.abs(candidate.params[k] - before[k]).max()))
    info = {
        "J": j_end,
        "components": np.asarray(comps, float),
        "grad_inf": grad_inf,
        "phi_diff": phi_diff,
        "gd_steps": steps,
        "gd_aborted": aborted,
        "lambda_moved": lam_moved,
        "solve_residual": sol.residual,
        "ridge": sol.ridge,
    }
    return info, lam


def _neurons(candidate: NetworkSet) -> int:
    if candidate.family.tag == "sigmoid-2-layer":
        return candidate.n_elements * (candidate.params["b1"].shape[-1]
                                       + candidate.params["b2"].shape[-1])
    return candidate.n_elements * candidate.width


def _error_row(components, model, mesh, q):
    err = error_norms(components, model, mesh, q)
    return {
        "rel_l2": err.rel_l2,
        "h1_space": err.rel_h1_space,
        "h1_time": err.rel_h1_time,
        "h1_spacetime": err.rel_h1_spacetime,
    }


def galerkin_iterate(solution: DGSolution, model, mesh, cfg: TrainConfig,
                     r: int = 1, lam=None, ws: Workspace | None = None,
                     record: ConvergenceRecord | None = None,
                     cum_epoch: int = 0, t0: float | None = None):
    """One outer iteration: train a fresh candidate, freeze it, record errors.

    Returns (lam, iteration_row, cum_epoch).  ``maxit = 0`` runs are handled
    by ``run_training`` (which then never calls this).
    """
    if ws is None:
        ws = Workspace(model, mesh, cfg.points_per_axis)
        ws.set_components(solution.components)
    if lam is None:
        lam = np.asarray(cfg.lambda_override or model.lambda_init, float)
    if record is None:
        record = ConvergenceRecord(term_names=ws.term_names())
    if t0 is None:
        t0 = time.perf_counter()

    width = cfg.schedule.width(r)
    if width is None:
        return lam, None, cum_epoch
    candidate = init_candidate(model, mesh, cfg.family, width, r, cfg.seed,
                               resolve_m1(cfg.m1, r))

    epochs_run = 0
    for epoch in range(cfg.traincount):
        info, lam = inner_epoch(ws, candidate, lam, cfg)
        cum_epoch += 1
        epochs_run += 1
        row = {
            "kind": "epoch", "iteration": r, "epoch": epoch + 1,
            "J": info["J"], "components": info["components"], "lambdas": lam.copy(),
            "width": width, "dofs": mesh.n_elements * width,
            "neurons": _neurons(candidate), "cum_epoch": cum_epoch,
            "grad_inf": info["grad_inf"], "phi_diff": info["phi_diff"],
            "gd_steps": info["gd_steps"],
            "solve_residual": info["solve_residual"], "ridge": info["ridge"],
            "wall_ms": 1000.0 * (time.perf_counter() - t0),
        }
        row.update(_error_row(solution.with_candidate(candidate), model, mesh,
                              cfg.points_per_axis))
        record.add(**row)
        if info["phi_diff"] < cfg.rho:
            break

    # Re-solve once with the final nonlinear weights so the frozen correction
    # carries their optimal coefficients (guarded: never increases the loss).
    comps, sol = galerkin_lsq_step(ws, candidate, lam, cfg.ridge)

    solution.add_correction(candidate)
    ws.add_component(candidate)
    j_now = _j_of(comps, lam)
    row = {
        "kind": "iteration", "iteration": r, "epoch": epochs_run + 1,
        "J": j_now, "components": np.asarray(comps, float), "lambdas": lam.copy(),
        "width": width, "dofs": mesh.n_elements * width,
        "neurons": _neurons(candidate), "cum_epoch": cum_epoch,
        "grad_inf": np.nan, "phi_diff": np.nan, "gd_steps": 0,
        "solve_residual": sol.residual, "ridge": sol.ridge,
        "wall_ms": 1000.0 * (time.perf_counter() - t0),
    }
    row.update(_error_row(solution.components, model, mesh, cfg.points_per_axis))
    record.add(**row)
    return lam, row, cum_epoch


def make_initializer(model, mesh, cfg: TrainConfig):
    if cfg.init == "zero":
        return None
    if cfg.init == "spectral":
        if model.kind == "helmholtz":
            return initseed.spectral_init_helmholtz(
                model, mesh, order=cfg.spectral_order or 3,
                scale=cfg.fictitious_scale)
        if model.kind == "wave":
            return initseed.spectral_init_wave(
                model, mesh, order=cfg.spectral_order or 5,
                scale=cfg.fictitious_scale,
                constrained=cfg.spectral_constrained)
        raise ValueError(f"no spectral initializer for model kind {model.kind!r}")
    if cfg.init == "exact":
        return model.exact_field()
    raise ValueError(f"unknown initializer {cfg.init!r}")


def run_training(model, mesh, cfg: TrainConfig, on_row=None):
    """Full outer loop from a configured initial field.

    Returns (solution, record); ``record.status`` is one of converged,
    maxit, schedule-exhausted, or no-iterations.  ``on_row`` is called with
    each record row as it is produced (the CLI streams rows to disk).
    """
    cfg.validate()
    initializer = make_initializer(model, mesh, cfg)
    solution = DGSolution(model, initializer, label=cfg.init)

    ws = Workspace(model, mesh, cfg.points_per_axis)
    ws.set_components(solution.components)
    lam = np.asarray(cfg.lambda_override or model.lambda_init, float).copy()
    record = ConvergenceRecord(term_names=ws.term_names(), on_row=on_row)
    t0 = time.perf_counter()

    base = ws.base_loss(lam)
    row = {
        "kind": "iteration", "iteration": 0, "epoch": 0,
        "J": base.total, "components": base.components, "lambdas": lam.copy(),
        "width": 0, "dofs": 0, "neurons": 0, "cum_epoch": 0,
        "grad_inf": np.nan, "phi_diff": np.nan, "gd_steps": 0,
        "solve_residual": np.nan, "ridge": np.nan,
        "wall_ms": 1000.0 * (time.perf_counter() - t0),
    }
    row.update(_error_row(solution.components, model, mesh, cfg.points_per_axis))
    record.add(**row)

    cum_epoch = 0
    status = "maxit"
    for r in range(1, cfg.maxit + 1):
        if cfg.schedule.width(r) is None:
            status = "schedule-exhausted"
            break
        lam, itrow, cum_epoch = galerkin_iterate(
            solution, model, mesh, cfg, r=r, lam=lam, ws=ws, record=record,
            cum_epoch=cum_epoch, t0=t0)
        # The dual stopping test: relative L2 error when an exact solution is
        # registered (all bundled experiments), otherwise the loss value.
        stop_value = itrow["rel_l2"] if model.exact is not None else itrow["J"]
        if stop_value < cfg.tol:
            status = "converged"
            break
    if cfg.maxit == 0:
        status = "no-iterations"
    record.status = status
    return solution, record
