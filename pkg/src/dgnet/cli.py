"""Experiment runner: configs, bundled experiments, convergence CSVs.

Configs are flat INI files; every bundled experiment ships as one under
``dgnet/configs``.  A run writes ``convergence.csv`` (one row per training
epoch plus a closing row per outer iteration, append-ordered by iteration
then epoch) and ``summary.csv`` (final neurons, DOFs, relative L2 error).

Set ``DGNET_THREADS`` to pin the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

__all__ = ["ExperimentConfig", "parse_config", "bundled_names", "run_experiment",
           "list_experiments", "main"]

_CONFIG_DIR = Path(__file__).parent / "configs"


def _apply_thread_env():
    n = os.environ.get("DGNET_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _parse_number(text: str) -> float:
    """Floats with an optional 'pi' factor or a fraction: '4pi', '1/12', '1e-3'."""
    s = str(text).strip().lower().replace(" ", "")
    if s.endswith("pi"):
        head = s[:-2].rstrip("*")
        return (float(head) if head else 1.0) * math.pi
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


@dataclass
class ExperimentConfig:
    name: str
    model: str
    variant: str
    omega: float | None
    wavespeed: object
    cells: tuple[int, ...]
    time_axis: int | None
    family: str
    widths: str
    m1: str | None
    init: str
    spectral_order: int | None
    spectral_constrained: bool
    fictitious_scale: float
    maxit: int
    traincount: int
    tol: float
    rho: float
    beta: float
    grad_steps: int
    lr: float
    step3: str
    seed: int
    points_per_axis: int | None
    lambda_override: tuple | None
    out_dir: str


def bundled_names() -> list[str]:
    return sorted(p.stem for p in _CONFIG_DIR.glob("*.ini"))


def _resolve_path(spec: str) -> Path:
    p = Path(spec)
    if p.is_file():
        return p
    bundled = _CONFIG_DIR / f"{spec}.ini"
    if bundled.is_file():
        return bundled
    raise FileNotFoundError(
        f"no config file or bundled experiment named {spec!r}; "
        f"bundled names: {', '.join(bundled_names())}")


def parse_config(spec: str) -> ExperimentConfig:
    path = _resolve_path(spec)
    cp = configparser.ConfigParser()
    cp.read(path)

    exp = cp["experiment"]
    msh = cp["mesh"] if cp.has_section("mesh") else {}
    net = cp["network"] if cp.has_section("network") else {}
    trn = cp["train"] if cp.has_section("train") else {}

    model = exp.get("model")
    if model not in ("poisson", "helmholtz", "wave"):
        raise ValueError(f"unknown model {model!r} in {path}")
    variant = exp.get("variant", "constant")

    if "cells" in msh:
        cells = tuple(int(x) for x in msh["cells"].split())
    elif "h" in msh:
        h = msh["h"]
        n = round(1.0 / _parse_number(h))
        cells = (n, n)
    else:
        raise ValueError(f"[mesh] needs 'cells' or 'h' in {path}")

    lam = trn.get("lambda_init") if hasattr(trn, "get") else None
    lam_tuple = tuple(_parse_number(x) for x in lam.split(",")) if lam else None

    def geti(section, key, default):
        v = section.get(key) if hasattr(section, "get") else None
        return int(v) if v not in (None, "") else default

    def getf(section, key, default):
        v = section.get(key) if hasattr(section, "get") else None
        return _parse_number(v) if v not in (None, "") else default

    return ExperimentConfig(
        name=exp.get("name", path.stem),
        model=model,
        variant=variant,
        omega=getf(exp, "omega", None) if "omega" in exp else None,
        wavespeed=exp.get("wavespeed", None),
        cells=cells,
        time_axis=1 if model == "wave" else None,
        family=net.get("family", "sigmoid-1-layer"),
        widths=net.get("widths", "2r+9"),
        m1=net.get("m1", None) if hasattr(net, "get") else None,
        init=trn.get("init", "zero") if hasattr(trn, "get") else "zero",
        spectral_order=geti(trn, "spectral_order", None),
        spectral_constrained=str(trn.get("spectral_constrained", "true")).lower()
        not in ("false", "0", "no") if hasattr(trn, "get") else True,
        fictitious_scale=getf(trn, "fictitious_scale", 1.1),
        maxit=geti(trn, "maxit", 15),
        traincount=geti(trn, "traincount", 2),
        tol=getf(trn, "tol", 1e-3),
        rho=getf(trn, "rho", 1e-4),
        beta=getf(trn, "beta", 0.1),
        grad_steps=geti(trn, "grad_steps", 50),
        lr=getf(trn, "lr", 1e-2),
        step3=trn.get("step3", "gd") if hasattr(trn, "get") else "gd",
        seed=geti(trn, "seed", 0),
        points_per_axis=geti(trn, "points_per_axis", None),
        lambda_override=lam_tuple,
        out_dir=exp.get("out", "out"),
    )


def _build(cfgx: ExperimentConfig):
    from . import models
    from .mesh import build_mesh
    from .trainer import TrainConfig, WidthSchedule

    if cfgx.model == "poisson":
        model = models.poisson_2d()
    elif cfgx.model == "helmholtz":
        kwargs = {"rho": cfgx.variant}
        if cfgx.omega is not None:
            kwargs["omega"] = cfgx.omega
        model = models.helmholtz_2d(**kwargs)
    else:
        c = cfgx.wavespeed
        if c is None:
            c = "x+1" if cfgx.variant == "variable" else 10.0
        elif c != "x+1":
            c = _parse_number(c)
        model = models.wave_1p1d(c=c)

    mesh = build_mesh(model.box, cfgx.cells, time_axis=model.geometry.time_axis)
    tc = TrainConfig(
        schedule=WidthSchedule.parse(cfgx.widths),
        family=cfgx.family, m1=cfgx.m1, maxit=cfgx.maxit,
        traincount=cfgx.traincount, rho=cfgx.rho, tol=cfgx.tol, beta=cfgx.beta,
        grad_steps=cfgx.grad_steps, lr=cfgx.lr, step3=cfgx.step3,
        seed=cfgx.seed, init=cfgx.init,
        spectral_order=cfgx.spectral_order,
        spectral_constrained=cfgx.spectral_constrained,
        fictitious_scale=cfgx.fictitious_scale,
        points_per_axis=cfgx.points_per_axis, lambda_override=cfgx.lambda_override,
    )
    return model, mesh, tc


def _csv_row(row, timed: bool):
    vals = [str(row["iteration"]), str(row["epoch"]), repr(row["J"])]
    vals += [repr(float(x)) for x in row["components"]]
    vals += [repr(float(x)) for x in row["lambdas"]]
    vals += [repr(row["rel_l2"]), repr(row["h1_space"])]
    if timed:
        vals += [repr(row["h1_time"]), repr(row["h1_spacetime"])]
    vals += [str(row["width"]), str(row["dofs"]), str(row["neurons"]),
             str(row["cum_epoch"]), f"{row['wall_ms']:.3f}"]
    return vals


def run_experiment(spec: str, out_dir: str | None = None, seed: int | None = None,
                   dry_run: bool = False, stream=None) -> int:
    """Run one experiment; returns a process exit status."""
    stream = stream or sys.stdout
    try:
        cfgx = parse_config(spec)
    except (FileNotFoundError, ValueError, KeyError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if seed is not None:
        cfgx.seed = seed
    if out_dir is not None:
        cfgx.out_dir = out_dir

    try:
        model, mesh, tc = _build(cfgx)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if dry_run:
        print(f"experiment {cfgx.name}: model={model.name} "
              f"cells={'x'.join(map(str, cfgx.cells))} family={cfgx.family} "
              f"init={cfgx.init} seed={cfgx.seed}", file=stream)
        print("  r  width  dofs  neurons", file=stream)
        from .trainer import resolve_m1
        for r in range(1, tc.maxit + 1):
            w = tc.schedule.width(r)
            if w is None:
                print(f"  schedule exhausted at r={r}", file=stream)
                break
            m1 = resolve_m1(tc.m1, r) or 0
            neurons = mesh.n_elements * (m1 + w if cfgx.family == "sigmoid-2-layer" else w)
            print(f"  {r}  {w}  {mesh.n_elements * w}  {neurons}", file=stream)
        return 0

    from .trainer import run_training

    out = Path(cfgx.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    conv_path = out / f"{cfgx.name}-convergence.csv"
    summary_path = out / f"{cfgx.name}-summary.csv"
    timed = cfgx.model == "wave"

    solution, record = _run_streaming(model, mesh, tc, conv_path, timed)

    final = record.iteration_rows()[-1]
    with open(summary_path, "w") as fh:
        fh.write("name,status,iterations,neurons,dofs,rel_l2\n")
        fh.write(f"{cfgx.name},{record.status},{final['iteration']},"
                 f"{final['neurons']},{final['dofs']},{final['rel_l2']!r}\n")
    print(f"{cfgx.name}: status={record.status} iterations={final['iteration']} "
          f"neurons={final['neurons']} dofs={final['dofs']} "
          f"rel_l2={final['rel_l2']:.4e}", file=stream)
    print(f"wrote {conv_path} and {summary_path}", file=stream)
    return 0


def _run_streaming(model, mesh, tc, conv_path, timed):
    """Train while flushing CSV rows as they are produced (partial on abort)."""
    from .trainer import run_training

    with open(conv_path, "w") as fh:
        state = {"header": False}

        def on_row(row):
            if not state["header"]:
                cols = ["iteration", "epoch", "J"]
                cols += [f"loss_{n}" for n in term_names]
                cols += [f"lambda_{i}" for i in range(len(row["lambdas"]))]
                cols += ["rel_l2", "h1_space"]
                if timed:
                    cols += ["h1_time", "h1_spacetime"]
                cols += ["width", "dofs", "neurons", "cum_epoch", "wall_ms"]
                fh.write(",".join(cols) + "\n")
                state["header"] = True
            fh.write(",".join(_csv_row(row, timed)) + "\n")
            fh.flush()

        term_names = tuple(t.name for t in model.terms)
        solution, record = run_training(model, mesh, tc, on_row=on_row)
    return solution, record


def list_experiments(porcelain: bool = False, stream=None) -> int:
    stream = stream or sys.stdout
    names = bundled_names()
    if porcelain:
        for n in names:
            print(n, file=stream)
        return 0
    print("bundled experiments:", file=stream)
    for n in names:
        cfgx = parse_config(n)
        print(f"  {n:24s} model={cfgx.model}-{cfgx.variant} family={cfgx.family} "
              f"cells={'x'.join(map(str, cfgx.cells))} init={cfgx.init}", file=stream)
    return 0


def main(argv=None) -> int:
    _apply_thread_env()
    parser = argparse.ArgumentParser(
        prog="dgnet",
        description="Train element-local networks on the bundled PDE experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config or bundled name")
    p_run.add_argument("config", help="path to a config file or a bundled name")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the seed")
    p_run.add_argument("--dry-run", action="store_true",
                       help="print the resolved schedule and DOF forecast only")

    p_list = sub.add_parser("list", help="list bundled experiments")
    p_list.add_argument("--porcelain", action="store_true",
                        help="machine-readable: one name per line")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_experiment(args.config, out_dir=args.out, seed=args.seed,
                              dry_run=args.dry_run)
    return list_experiments(porcelain=args.porcelain)


if __name__ == "__main__":
    raise SystemExit(main())
