"""Command-line driver: ``msfrecon <command> --config run.toml [overrides]``.

Exit status is 0 on success, 2 for configuration errors, 3 for numerical
failures and 4 for I/O errors.  Failures also print one JSON object on
stderr.  ``MSFRECON_OUTPUT_DIR`` overrides the configured output directory
(a ``--output-dir`` flag overrides both).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .analytic import fbp
from .config import ConfigError, build_config, load_config
from .geometry import GeometryError, geometry_for
from .io import export_slices_png, read_sinogram, read_volume, write_sinogram, write_volume
from .mbir import ConvergenceError, reconstruct_mbir
from .metrics import MetricError, nrmse, psnr, ssim
from .pipeline import (Experiment, compare_methods, estimate_weights, tune_sigmas,
                       write_tuning_table)
from .solver import AgentError, build_bm4d_agents, build_msf_agents, run_pnp

ENV_OUTPUT = "MSFRECON_OUTPUT_DIR"
COMMANDS = ("phantom", "project", "fbp", "mbir", "pnp-bm4d", "msf", "metrics", "compare", "tune")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msfrecon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", type=Path, help="TOML experiment file (defaults when omitted)")
        c.add_argument("--output-dir", type=Path)
        c.add_argument("--threads", type=int, help="worker threads, 0 = one per CPU")
        c.add_argument("--seed", type=int)
        c.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
        c.add_argument("-v", "--verbose", action="store_true")
        if name in ("fbp", "mbir", "pnp-bm4d", "msf"):
            c.add_argument("--sinogram", type=Path,
                           help="reconstruct this stored sinogram instead of simulating one")
        if name in ("pnp-bm4d", "msf", "compare", "tune"):
            c.add_argument("--max-iter", type=int)
            c.add_argument("--rho", type=float)
        if name in ("msf", "compare", "tune"):
            c.add_argument("--sigma-xy", type=float)
            c.add_argument("--sigma-yz", type=float)
            c.add_argument("--sigma-xz", type=float)
        if name in ("pnp-bm4d", "compare", "tune"):
            c.add_argument("--sigma-bm4d", type=float)
        if name in ("mbir", "compare"):
            c.add_argument("--beta", type=float)
        if name == "tune":
            c.add_argument("--method", choices=("msf", "pnp-bm4d"), default="msf")
        if name == "metrics":
            c.add_argument("--estimate", type=Path, required=True)
            c.add_argument("--truth", type=Path, required=True)
    return p


def _apply_overrides(cfg, args):
    """Command-line values win over the file; returns the effective config."""
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 0:
            raise ConfigError("threads must be >= 0", "threads")
        kw["threads"] = args.threads or (os.cpu_count() or 1)
    env = os.environ.get(ENV_OUTPUT)
    if args.output_dir is not None:
        kw["output_dir"] = str(args.output_dir)
    elif env:
        kw["output_dir"] = env
    sig = list(cfg.msf_sigmas)
    for i, name in enumerate(("sigma_xy", "sigma_yz", "sigma_xz")):
        value = getattr(args, name, None)
        if value is not None:
            sig[i] = value
    kw["msf_sigmas"] = tuple(sig)
    if getattr(args, "sigma_bm4d", None) is not None:
        kw["bm4d_sigma"] = args.sigma_bm4d
    if getattr(args, "beta", None) is not None:
        kw["mrf"] = replace(cfg.mrf, beta=args.beta)
    pnp = cfg.pnp
    if getattr(args, "max_iter", None) is not None:
        pnp = replace(pnp, max_iter=args.max_iter)
    if getattr(args, "rho", None) is not None:
        pnp = replace(pnp, rho=args.rho)
    kw["pnp"] = pnp
    # sigmas given on the command line replace any tuning grid
    if any(getattr(args, n, None) is not None for n in ("sigma_xy", "sigma_yz", "sigma_xz")):
        kw["msf_grid"] = ()
    if getattr(args, "sigma_bm4d", None) is not None:
        kw["bm4d_grid"] = ()
    try:
        cfg = replace(cfg, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.pnp.rho <= 0:
        raise ConfigError("rho must be > 0", "pnp.rho")
    if cfg.pnp.max_iter < 1:
        raise ConfigError("max_iter must be >= 1", "pnp.max_iter")
    return cfg


def _atomic_json(path: Path, payload: dict):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    os.replace(tmp, path)


class _Run:
    """Collects stage timings and produced files for the manifest."""

    def __init__(self, out: Path):
        self.out = out
        self.timings: dict[str, float] = {}
        self.files: list[str] = []

    def stage(self, name, fn, *a, **kw):
        t0 = time.perf_counter()
        result = fn(*a, **kw)
        self.timings[name] = round(time.perf_counter() - t0, 6)
        return result

    def add(self, *paths):
        for p in paths:
            self.files.append(str(Path(p).relative_to(self.out)))

    def add_tree(self):
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                rel = str(p.relative_to(self.out))
                if rel not in self.files:
                    self.files.append(rel)


def _read(fn, path):
    """Load a stored array; malformed files count as I/O errors."""
    try:
        return fn(path)
    except (ValueError, KeyError) as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def _external(args, cfg):
    """Sinogram, weights and geometry from ``--sinogram`` (weights estimated by MAD)."""
    sino = _read(read_sinogram, args.sinogram)
    geom = geometry_for(sino, slice_stride=cfg.slice_factor)
    return sino, estimate_weights(sino, "mad"), geom


def _reconstruct(args, cfg, run: _Run):
    name = args.command
    out = run.out
    trace = None
    if getattr(args, "sinogram", None) is not None:
        sino, W, geom = run.stage("load", _external, args, cfg)
        shape = geom.default_grid()
        if name == "fbp":
            vol = run.stage("fbp", fbp, sino, geom, cfg.filter, shape=shape)
        else:
            x0 = run.stage("mbir", reconstruct_mbir, sino, W, geom, cfg.mrf, cfg.mbir_cg, shape=shape)
            vol = x0
            if name != "mbir":
                pnp = replace(cfg.pnp, threads=cfg.threads)
                if name == "msf":
                    agents = build_msf_agents(sino, W, geom, cfg.msf_sigmas, cfg.bm3d_config,
                                              cfg.prox_cg, cfg.threads)
                else:
                    agents = build_bm4d_agents(sino, W, geom, cfg.bm4d_sigma, cfg.bm4d_config,
                                               cfg.prox_cg)
                x, trace = run.stage(name, run_pnp, agents, x0.data, pnp)
                vol = x0.like(x)
        metrics = None
    else:
        exp = run.stage("synthesize", Experiment, cfg)
        if name == "fbp":
            vol = run.stage("fbp", exp.fbp)
        elif name == "mbir":
            vol = run.stage("mbir", exp.mbir)
        else:
            if cfg.x0 == "mbir":
                run.stage("mbir", exp.mbir)
            fn = exp.msf if name == "msf" else exp.bm4d
            arg = cfg.msf_sigmas if name == "msf" else cfg.bm4d_sigma
            vol, trace = run.stage(name, fn, arg)
        r = exp.score(vol)
        metrics = {"nrmse": r.nrmse, "psnr_db": r.psnr, "ssim": r.ssim}
        _atomic_json(out / f"metrics_{name}.json", metrics)
        run.add(out / f"metrics_{name}.json")
    run.add(*write_volume(out / "volumes" / name, vol))
    run.add(*export_slices_png(out / "png" / name, vol, cfg.png_window))
    if trace is not None:
        trace.to_csv(out / f"trace_{name}.csv")
        run.add(out / f"trace_{name}.csv")
        if not trace.converged:
            logging.getLogger("msfrecon").warning(
                "%s stopped at max_iter before meeting the residual rule", name)
    return {"metrics": metrics, "converged": None if trace is None else trace.converged}


def _execute(args, cfg, run: _Run) -> dict:
    out = run.out
    cmd = args.command
    if cmd == "phantom":
        exp = run.stage("phantom", Experiment, cfg)
        run.add(*write_volume(out / "volumes" / "truth", exp.truth))
        run.add(*export_slices_png(out / "png" / "truth", exp.truth, cfg.png_window))
        return {}
    if cmd == "project":
        exp = run.stage("synthesize", Experiment, cfg)
        run.add(*write_sinogram(out / "sinogram", exp.sino))
        run.add(*write_volume(out / "volumes" / "truth", exp.truth))
        return {"n_views": exp.sino.n_views, "n_slices": exp.sino.n_slices}
    if cmd in ("fbp", "mbir", "pnp-bm4d", "msf"):
        return _reconstruct(args, cfg, run)
    if cmd == "metrics":
        est = _read(read_volume, args.estimate)
        truth = _read(read_volume, args.truth)
        values = {"nrmse": nrmse(est, truth, cfg.nrmse_normalize), "psnr_db": psnr(est, truth),
                  "ssim": ssim(est, truth)}
        _atomic_json(out / "metrics.json", values)
        run.add(out / "metrics.json")
        print(json.dumps(values))
        return values
    if cmd == "compare":
        report = run.stage("compare", compare_methods, cfg, out)
        run.add_tree()
        print((out / "metrics.csv").read_text(), end="")
        return {"settings": report.settings,
                "status": {m: r.status for m, r in report.results.items()}}
    if cmd == "tune":
        exp = run.stage("synthesize", Experiment, cfg)
        if cfg.x0 == "mbir":
            run.stage("mbir", exp.mbir)
        if args.method == "msf":
            grid = cfg.msf_grid or (cfg.msf_sigmas,)
        else:
            grid = cfg.bm4d_grid or (cfg.bm4d_sigma,)
        best, table = run.stage("tune", tune_sigmas, exp, grid, cfg.tune_metric, args.method,
                                cfg.tune_max_iter)
        path = out / f"tuning_{args.method}.csv"
        write_tuning_table(path, table)
        run.add(path)
        print(json.dumps({"best": best}))
        return {"best": best}
    raise ConfigError(f"unknown command {cmd!r}")


def _fail(code: int, kind: str, exc: BaseException, field: str | None = None) -> int:
    payload = {"error": kind, "message": str(exc)}
    if field:
        payload["field"] = field
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            cfg, payload = load_config(args.config)
        else:
            cfg, payload = build_config({}), b""
        cfg = _apply_overrides(cfg, args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc, exc.field)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    if args.dry_run:
        print(json.dumps({"ok": True, "command": args.command, "config": cfg.to_dict()}))
        return EXIT_OK
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        run = _Run(out)
        t0 = time.perf_counter()
        extra = _execute(args, cfg, run)
        run.timings["total"] = round(time.perf_counter() - t0, 6)
        manifest = {
            "command": args.command,
            "config_hash": hashlib.sha256(payload).hexdigest(),
            "config_path": None if args.config is None else str(args.config),
            "seed": cfg.seed,
            "version": __version__,
            "effective_config": cfg.to_dict(),
            "timings_s": run.timings,
            "outputs": run.files,
            "result": extra,
        }
        _atomic_json(out / "manifest.json", manifest)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc, exc.field)
    except (ConvergenceError, AgentError, FloatingPointError, MetricError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except GeometryError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
