"""Simulated sparse-view experiments: synthesis, reconstruction, tuning and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .analytic import FilterSpec, fbp
from .denoise import BlockMatchConfig
from .geometry import GeometryError, ScanGeometry, Sinogram, Volume, WeightMap, project
from .io import export_slices_png, write_volume
from .mbir import CGParams, ConvergenceError, MrfSpec, reconstruct_mbir
from .metrics import MetricError, nrmse, psnr, ssim
from .phantom import generate_phantom
from .solver import PnPConfig, ResidualTrace, build_bm4d_agents, build_msf_agents, run_pnp

log = logging.getLogger(__name__)

METHODS = ("fbp", "mbir", "pnp-bm4d", "msf")
MAD_TO_SIGMA = 0.6745          # median |N(0, 1)|
SECOND_DIFF_VAR = 6.0          # var(x[i+1] - 2 x[i] + x[i-1]) / var(x) for white noise


@dataclass
class ExperimentConfig:
    """Everything that defines one simulated comparison.

    ``msf_grid`` and ``bm4d_grid`` are the candidate strengths searched by
    :func:`tune_sigmas`; when empty, ``msf_sigmas`` / ``bm4d_sigma`` are used
    as given.  ``tune_max_iter`` caps the consensus iterations of each
    tuning run (``None`` uses ``pnp.max_iter``).
    """

    phantom: str = "shepp3d"
    dims: tuple[int, int, int] = (8, 64, 64)
    seed: int = 0
    full_views: int = 200
    view_factor: int = 10
    slice_factor: int = 2
    noise_pct: float = 1.0
    weights: str = "known_sigma"
    methods: tuple[str, ...] = METHODS
    filter: FilterSpec = field(default_factory=FilterSpec)
    mrf: MrfSpec = field(default_factory=lambda: MrfSpec(beta=30.0))
    mbir_cg: CGParams = field(default_factory=lambda: CGParams(tol=1e-6, max_iter=200))
    prox_cg: CGParams = field(default_factory=lambda: CGParams(tol=1e-6, max_iter=100))
    pnp: PnPConfig = field(default_factory=PnPConfig)
    msf_sigmas: tuple[float, float, float] = (0.1, 0.1, 0.1)
    bm4d_sigma: float = 0.1
    msf_grid: tuple[tuple[float, float, float], ...] = ()
    bm4d_grid: tuple[float, ...] = ()
    tune_max_iter: int | None = None
    tune_metric: str = "psnr"
    bm3d_config: BlockMatchConfig = field(default_factory=BlockMatchConfig.default_2d)
    bm4d_config: BlockMatchConfig = field(default_factory=BlockMatchConfig.default_3d)
    x0: str = "mbir"
    nrmse_normalize: str = "estimate"
    png_window: tuple[float, float] = (0.0, 1.0)
    output_dir: str = "out"
    threads: int = 1

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        for name in ("view_factor", "slice_factor", "full_views"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_pct < 0:
            raise ValueError(f"noise_pct must be >= 0, got {self.noise_pct}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.weights not in ("known_sigma", "mad"):
            raise ValueError("weights must be 'known_sigma' or 'mad'")
        if self.x0 not in ("mbir", "fbp", "zero"):
            raise ValueError("x0 must be 'mbir', 'fbp' or 'zero'")
        if self.tune_metric not in ("psnr", "ssim", "nrmse"):
            raise ValueError("tune_metric must be 'psnr', 'ssim' or 'nrmse'")
        if self.nrmse_normalize not in ("estimate", "truth"):
            raise ValueError("nrmse_normalize must be 'estimate' or 'truth'")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        self.msf_sigmas = tuple(float(s) for s in self.msf_sigmas)
        self.msf_grid = tuple(tuple(float(s) for s in t) for t in self.msf_grid)
        self.bm4d_grid = tuple(float(s) for s in self.bm4d_grid)
        if len(self.msf_sigmas) != 3 or any(len(t) != 3 for t in self.msf_grid):
            raise ValueError("MSF sigmas come in (xy, yz, xz) triples")
        if min(self.msf_sigmas) <= 0:
            raise ValueError(f"msf_sigmas must be > 0, got {self.msf_sigmas}")
        if self.bm4d_sigma <= 0:
            raise ValueError(f"bm4d_sigma must be > 0, got {self.bm4d_sigma}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def subsample_geometry(geom_full: ScanGeometry, view_factor: int, slice_factor: int) -> ScanGeometry:
    """Keep every ``view_factor``-th view and every ``slice_factor``-th slice.

    Counts that are not multiples are truncated: ``ceil(n / factor)`` entries
    survive, starting from index 0.
    """
    if view_factor < 1 or slice_factor < 1:
        raise GeometryError("subsample factors must be >= 1")
    if view_factor > geom_full.n_views:
        raise GeometryError(f"view factor {view_factor} exceeds {geom_full.n_views} views")
    if slice_factor > geom_full.n_slices:
        raise GeometryError(f"slice factor {slice_factor} exceeds {geom_full.n_slices} slices")
    n_slices = len(range(0, geom_full.n_slices, slice_factor))
    return replace(geom_full, angles=geom_full.angles[::view_factor], n_slices=n_slices,
                   slice_stride=geom_full.slice_stride * slice_factor)


def full_geometry(cfg: ExperimentConfig) -> ScanGeometry:
    nz, ny, nx = cfg.dims
    return ScanGeometry.uniform(cfg.full_views, max(nx, ny), n_slices=nz)


def noise_sigma(clean: np.ndarray, noise_pct: float) -> float:
    return noise_pct / 100.0 * float(np.mean(np.abs(clean)))


def synthesize(vol: Volume, geom_full: ScanGeometry, cfg: ExperimentConfig):
    """Project with the full geometry, subsample, add white Gaussian noise.

    The noise standard deviation is ``noise_pct`` percent of the mean
    absolute value of the subsampled clean sinogram.  Returns the noisy
    sinogram and matching weights ``1 / sigma**2`` (all ones when noiseless).
    """
    clean = project(vol, geom_full)
    sub = subsample_geometry(geom_full, cfg.view_factor, cfg.slice_factor)
    data = clean.data[::cfg.view_factor, ::cfg.slice_factor]
    sigma = noise_sigma(data, cfg.noise_pct)
    if sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        data = data + sigma * rng.standard_normal(data.shape)
    sino = Sinogram(data, sub.angles, clean.channel_spacing,
                    clean.slice_spacing * cfg.slice_factor)
    weights = WeightMap.uniform(sino, 1.0 / sigma ** 2 if sigma > 0 else 1.0)
    return sino, weights


def estimate_weights(sino: Sinogram, noise_model: str = "mad", sigma: float | None = None) -> WeightMap:
    """Uniform weights ``1 / sigma**2`` from a known or estimated noise level.

    ``mad`` estimates sigma from the median absolute deviation of second
    differences along the channel axis, which cancel locally linear signal.
    A zero estimate falls back to unit weights.
    """
    if noise_model == "known_sigma":
        if sigma is None or not sigma > 0:
            raise ValueError("known_sigma needs sigma > 0")
        return WeightMap.uniform(sino, 1.0 / sigma ** 2)
    if noise_model != "mad":
        raise ValueError(f"unknown noise model {noise_model!r}")
    if sino.n_channels < 3:
        raise GeometryError("mad estimate needs at least 3 channels")
    d2 = np.diff(sino.data, n=2, axis=-1).ravel()
    mad = np.median(np.abs(d2 - np.median(d2)))
    est = mad / MAD_TO_SIGMA / math.sqrt(SECOND_DIFF_VAR)
    if est == 0:
        return WeightMap.uniform(sino, 1.0)
    return WeightMap.uniform(sino, 1.0 / est ** 2)


@dataclass
class MethodResult:
    nrmse: float = math.nan
    psnr: float = math.nan
    ssim: float = math.nan
    status: str = "ok"
    iterations: int = 0
    converged: bool | None = None


@dataclass
class MetricsReport:
    """Per-method scores; methods that failed carry a non-``ok`` status and NaN scores."""

    results: dict[str, MethodResult] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def __getitem__(self, method) -> MethodResult:
        return self.results[method]

    def nrmse(self, method) -> float:
        return self.results[method].nrmse

    def psnr(self, method) -> float:
        return self.results[method].psnr

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "nrmse", "psnr_db", "ssim", "iterations", "converged", "status"])
            for m, r in self.results.items():
                w.writerow([m, repr(r.nrmse), repr(r.psnr), repr(r.ssim), r.iterations,
                            "" if r.converged is None else str(r.converged).lower(), r.status])

    def to_json(self, path):
        payload = {"methods": {m: asdict(r) for m, r in self.results.items()},
                   "settings": self.settings}
        Path(path).write_text(json.dumps(payload, indent=2, allow_nan=True))


class Experiment:
    """One synthesized dataset plus cached reconstructions.

    This is the handle passed to :func:`tune_sigmas`.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.truth = generate_phantom(cfg.phantom, cfg.dims, seed=cfg.seed)
        self.geom_full = full_geometry(cfg)
        self.sino, known = synthesize(self.truth, self.geom_full, cfg)
        self.geom = subsample_geometry(self.geom_full, cfg.view_factor, cfg.slice_factor)
        self.weights = known if cfg.weights == "known_sigma" else estimate_weights(self.sino, "mad")
        self._cache: dict[str, Volume] = {}
        self._runs: dict[tuple, tuple[Volume, ResidualTrace]] = {}

    @property
    def shape(self):
        return self.truth.shape

    def score(self, vol: Volume) -> MethodResult:
        return MethodResult(nrmse(vol, self.truth, self.cfg.nrmse_normalize),
                            psnr(vol, self.truth), ssim(vol, self.truth))

    def fbp(self) -> Volume:
        if "fbp" not in self._cache:
            self._cache["fbp"] = fbp(self.sino, self.geom, self.cfg.filter, shape=self.shape)
        return self._cache["fbp"]

    def mbir(self) -> Volume:
        if "mbir" not in self._cache:
            self._cache["mbir"] = reconstruct_mbir(self.sino, self.weights, self.geom, self.cfg.mrf,
                                                   self.cfg.mbir_cg, shape=self.shape)
        return self._cache["mbir"]

    def initial(self) -> np.ndarray:
        if self.cfg.x0 == "zero":
            return np.zeros(self.shape)
        return (self.mbir() if self.cfg.x0 == "mbir" else self.fbp()).data

    def _pnp(self, key, make_agents, max_iter):
        # runs are deterministic, so a tuning run doubles as the final one
        pnp = self.cfg.pnp if max_iter is None else replace(self.cfg.pnp, max_iter=max_iter)
        pnp = replace(pnp, threads=self.cfg.threads)
        key = key + (pnp.max_iter,)
        if key not in self._runs:
            x, trace = run_pnp(make_agents(), self.initial(), pnp)
            self._runs[key] = (self.truth.like(x), trace)
        return self._runs[key]

    def msf(self, sigmas, max_iter: int | None = None) -> tuple[Volume, ResidualTrace]:
        sigmas = tuple(float(s) for s in sigmas)
        return self._pnp(("msf", sigmas), lambda: build_msf_agents(
            self.sino, self.weights, self.geom, sigmas, self.cfg.bm3d_config, self.cfg.prox_cg,
            self.cfg.threads), max_iter)

    def bm4d(self, sigma, max_iter: int | None = None) -> tuple[Volume, ResidualTrace]:
        sigma = float(sigma)
        return self._pnp(("bm4d", sigma), lambda: build_bm4d_agents(
            self.sino, self.weights, self.geom, sigma, self.cfg.bm4d_config, self.cfg.prox_cg),
            max_iter)


_METRIC_SIGN = {"psnr": 1.0, "ssim": 1.0, "nrmse": -1.0}


def tune_sigmas(exp: Experiment, grid, metric: str = "psnr", method: str = "msf",
                max_iter: int | None = None):
    """Grid search of denoiser strengths.

    ``method="msf"`` expects ``(xy, yz, xz)`` triples, ``method="pnp-bm4d"``
    plain numbers.  Returns ``(best, table)``; ``table`` lists one dict per
    grid point, failed runs carry their error and are never selected.  Ties
    go to the earliest grid point.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("tuning grid is empty")
    if metric not in _METRIC_SIGN:
        raise ValueError(f"unknown metric {metric!r}")
    run = exp.msf if method == "msf" else exp.bm4d
    table, best, best_score = [], None, -math.inf
    for point in grid:
        row = {"sigma": point}
        try:
            vol, trace = run(point, max_iter)
            r = exp.score(vol)
            row.update(nrmse=r.nrmse, psnr=r.psnr, ssim=r.ssim, iterations=len(trace), status="ok")
            score = _METRIC_SIGN[metric] * row[metric]
            if score > best_score:
                best, best_score = point, score
        except (ValueError, RuntimeError, MetricError) as exc:
            log.warning("tuning run %s failed: %s", point, exc)
            row.update(status=f"error: {exc}")
        table.append(row)
    if best is None:
        raise RuntimeError("every tuning run failed")
    return best, table


def write_tuning_table(path, table):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "nrmse", "psnr_db", "ssim", "iterations", "status"])
        for row in table:
            sig = row["sigma"]
            sig = " ".join(repr(float(s)) for s in sig) if isinstance(sig, tuple) else repr(float(sig))
            w.writerow([sig, repr(row.get("nrmse", math.nan)), repr(row.get("psnr", math.nan)),
                        repr(row.get("ssim", math.nan)), row.get("iterations", 0), row["status"]])


def compare_methods(cfg: ExperimentConfig, output_dir=None, write_images: bool = True) -> MetricsReport:
    """Run the configured methods on one synthesized dataset and write the reports.

    The MBIR reconstruction initializes both plug-and-play runs (unless
    ``cfg.x0`` says otherwise).  Files written under ``output_dir``:
    ``metrics.csv``, ``metrics.json``, ``trace_<method>.csv``,
    ``tuning_<method>.csv``, ``volumes/<method>.{raw,json}`` and
    ``png/<method>/slice_###.png``.
    """
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment(cfg)
    report = MetricsReport(settings={"msf_sigmas": list(cfg.msf_sigmas),
                                     "bm4d_sigma": cfg.bm4d_sigma})
    volumes = {"truth": exp.truth}

    def record(method, fn):
        try:
            vol, trace = fn()
            res = exp.score(vol)
            if trace is not None:
                res.iterations = len(trace)
                res.converged = trace.converged
                trace.to_csv(out / f"trace_{method}.csv")
            report.results[method] = res
            volumes[method] = vol
        except (GeometryError, ConvergenceError, MetricError, ValueError, RuntimeError) as exc:
            log.error("%s failed: %s", method, exc)
            report.results[method] = MethodResult(status=f"error: {exc}")

    for method in cfg.methods:
        if method == "fbp":
            record(method, lambda: (exp.fbp(), None))
        elif method == "mbir":
            record(method, lambda: (exp.mbir(), None))
        elif method == "pnp-bm4d":
            sigma = cfg.bm4d_sigma
            if cfg.bm4d_grid:
                sigma, table = tune_sigmas(exp, cfg.bm4d_grid, cfg.tune_metric, "pnp-bm4d",
                                           max_iter=cfg.tune_max_iter)
                write_tuning_table(out / "tuning_pnp-bm4d.csv", table)
            report.settings["bm4d_sigma"] = sigma
            record(method, lambda: exp.bm4d(sigma))
        elif method == "msf":
            sigmas = cfg.msf_sigmas
            if cfg.msf_grid:
                sigmas, table = tune_sigmas(exp, cfg.msf_grid, cfg.tune_metric, "msf",
                                            max_iter=cfg.tune_max_iter)
                write_tuning_table(out / "tuning_msf.csv", table)
            report.settings["msf_sigmas"] = list(sigmas)
            record(method, lambda: exp.msf(sigmas))

    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    for name, vol in volumes.items():
        write_volume(out / "volumes" / name, vol)
        if write_images:
            export_slices_png(out / "png" / name, vol, cfg.png_window)
    return report
