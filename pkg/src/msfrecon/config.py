"""Strict TOML experiment configuration."""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

from .analytic import FilterSpec
from .denoise import BlockMatchConfig
from .mbir import CGParams, MrfSpec
from .pipeline import ExperimentConfig
from .solver import PnPConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


_BM_KEYS = {"patch_size", "search_radius", "match_threshold", "max_group_size", "step",
            "stage", "hard_threshold_lambda"}

SCHEMA = {
    "seed": int,
    "output_dir": str,
    "threads": int,
    "phantom": {"kind": str, "dims": list},
    "acquisition": {"full_views": int, "view_factor": int, "slice_factor": int,
                    "noise_pct": float, "weights": str},
    "fbp": {"filter": str, "cutoff": float},
    "mbir": {"beta": float, "neighborhood": int, "edge_weights": list, "cg_tol": float,
             "cg_max_iter": int},
    "pnp": {"rho": float, "stop_frac": float, "max_iter": int, "require_both": bool,
            "x0": str, "prox_cg_tol": float, "prox_cg_max_iter": int},
    "msf": {"sigma_xy": float, "sigma_yz": float, "sigma_xz": float, "grid": list,
            **{k: object for k in _BM_KEYS}},
    "bm4d": {"sigma": float, "grid": list, **{k: object for k in _BM_KEYS}},
    "tune": {"max_iter": int, "metric": str},
    "metrics": {"nrmse_normalize": str, "png_window": list},
    "methods": list,
}


def _check(table: dict, schema: dict, prefix: str = ""):
    for key, value in table.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}", path)
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a table", path)
            _check(value, expected, path + ".")
        elif expected is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{path!r} must be a number", path)
        elif expected is not object and not isinstance(value, expected) or (
                expected is int and isinstance(value, bool)):
            raise ConfigError(f"{path!r} must be of type {expected.__name__}", path)


def _bm(table: dict, base: BlockMatchConfig) -> BlockMatchConfig:
    kw = {k: table[k] for k in _BM_KEYS if k in table}
    return replace(base, **kw) if kw else base


def build_config(raw: dict) -> ExperimentConfig:
    """Turn a parsed TOML mapping into an :class:`ExperimentConfig`."""
    _check(raw, SCHEMA)
    g = raw.get
    ph, acq, fb = g("phantom", {}), g("acquisition", {}), g("fbp", {})
    mb, pn, msf, b4 = g("mbir", {}), g("pnp", {}), g("msf", {}), g("bm4d", {})
    tune, met = g("tune", {}), g("metrics", {})
    d = ExperimentConfig()
    kw = {}
    try:
        kw["phantom"] = ph.get("kind", d.phantom)
        kw["dims"] = tuple(ph.get("dims", d.dims))
        kw["seed"] = g("seed", d.seed)
        kw["output_dir"] = g("output_dir", d.output_dir)
        kw["threads"] = g("threads", d.threads)
        if "methods" in raw:
            kw["methods"] = tuple(raw["methods"])
        for key in ("full_views", "view_factor", "slice_factor", "noise_pct", "weights"):
            kw[key] = acq.get(key, getattr(d, key))
        kw["filter"] = FilterSpec(fb.get("filter", d.filter.kind), fb.get("cutoff", d.filter.cutoff))
        ew = mb.get("edge_weights")
        kw["mrf"] = MrfSpec(mb.get("beta", d.mrf.beta), mb.get("neighborhood", d.mrf.neighborhood),
                            None if ew is None else tuple(float(w) for w in ew))
        kw["mbir_cg"] = CGParams(mb.get("cg_tol", d.mbir_cg.tol),
                                 mb.get("cg_max_iter", d.mbir_cg.max_iter))
        kw["prox_cg"] = CGParams(pn.get("prox_cg_tol", d.prox_cg.tol),
                                 pn.get("prox_cg_max_iter", d.prox_cg.max_iter))
        kw["pnp"] = PnPConfig(rho=pn.get("rho", d.pnp.rho),
                              stop_frac=pn.get("stop_frac", d.pnp.stop_frac),
                              max_iter=pn.get("max_iter", d.pnp.max_iter),
                              require_both=pn.get("require_both", d.pnp.require_both))
        kw["x0"] = pn.get("x0", d.x0)
        kw["msf_sigmas"] = (msf.get("sigma_xy", d.msf_sigmas[0]), msf.get("sigma_yz", d.msf_sigmas[1]),
                            msf.get("sigma_xz", d.msf_sigmas[2]))
        kw["msf_grid"] = tuple(tuple(t) for t in msf.get("grid", ()))
        kw["bm3d_config"] = _bm(msf, d.bm3d_config)
        kw["bm4d_sigma"] = b4.get("sigma", d.bm4d_sigma)
        kw["bm4d_grid"] = tuple(b4.get("grid", ()))
        kw["bm4d_config"] = _bm(b4, d.bm4d_config)
        kw["tune_max_iter"] = tune.get("max_iter", d.tune_max_iter)
        kw["tune_metric"] = tune.get("metric", d.tune_metric)
        kw["nrmse_normalize"] = met.get("nrmse_normalize", d.nrmse_normalize)
        kw["png_window"] = tuple(met.get("png_window", d.png_window))
        cfg = ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), _guess_field(str(exc))) from exc
    if cfg.pnp.rho <= 0:
        raise ConfigError("pnp.rho must be > 0", "pnp.rho")
    if cfg.pnp.max_iter < 1:
        raise ConfigError("pnp.max_iter must be >= 1", "pnp.max_iter")
    return cfg


_FIELD_HINTS = {
    "view_factor": "acquisition.view_factor",
    "slice_factor": "acquisition.slice_factor",
    "full_views": "acquisition.full_views",
    "noise_pct": "acquisition.noise_pct",
    "weights": "acquisition.weights",
    "dims": "phantom.dims",
    "beta": "mbir.beta",
    "neighborhood": "mbir.neighborhood",
    "edge weights": "mbir.edge_weights",
    "filter kind": "fbp.filter",
    "cutoff": "fbp.cutoff",
    "msf_sigmas": "msf.sigma_xy/sigma_yz/sigma_xz",
    "MSF sigmas": "msf.grid",
    "bm4d_sigma": "bm4d.sigma",
    "methods": "methods",
    "x0": "pnp.x0",
    "tune_metric": "tune.metric",
    "nrmse_normalize": "metrics.nrmse_normalize",
    "patch_size": "patch_size",
    "search_radius": "search_radius",
    "max_group_size": "max_group_size",
    "step": "step",
    "stage": "stage",
}


def _guess_field(message: str) -> str | None:
    for hint, path in _FIELD_HINTS.items():
        if hint in message:
            return path
    return None


def load_config(path) -> tuple[ExperimentConfig, bytes]:
    """Parse ``path``; returns the config and the raw file bytes (for hashing)."""
    payload = Path(path).read_bytes()
    try:
        raw = tomllib.loads(payload.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return build_config(raw), payload
