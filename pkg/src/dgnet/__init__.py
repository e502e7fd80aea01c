"""Discontinuous Galerkin networks for PDEs.

Element-local shallow networks are glued weakly through interface-jump
penalties in a quadratic least-squares loss.  The solver alternates a
Galerkin least-squares solve for the linear output coefficients with
gradient descent on the nonlinear weights, wrapped in an outer
residual-correction iteration that freezes each trained correction and
widens the next candidate set.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "mesh",
    "quadrature",
    "netfn",
    "models",
    "assembly",
    "trainer",
    "initseed",
    "metrics",
    "cli",
)


def __getattr__(name):
    # Lazy imports keep `import dgnet` light so the CLI can pin BLAS thread
    # counts before numpy comes in.
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
