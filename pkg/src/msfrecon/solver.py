"""Consensus ADMM (plug-and-play) with multiple proximal / denoising agents.

For agents ``F_1 .. F_L`` the iteration is

    x   <- mean_l (z_l - u_l)
    z_l <- F_l(x + u_l)
    u_l <- u_l + x - z_l

where ``F_1`` is the data-fidelity proximal map and the others are proximal
maps of priors or plug-in denoisers.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .denoise import PLANES, BlockMatchConfig, DenoiserSpec, apply_denoiser
from .geometry import GeometryError, ProjectionOperator, ScanGeometry, Sinogram, Volume, WeightMap
from .mbir import CGParams, MrfSpec, conjugate_gradient, mrf_prox

log = logging.getLogger(__name__)

AGENT_KINDS = ("data-fidelity", "bm3d-plane", "bm4d", "mrf-prox", "custom")


class AgentError(RuntimeError):
    def __init__(self, index: int, kind: str, cause: Exception):
        super().__init__(f"agent {index} ({kind}) failed: {cause}")
        self.index = index
        self.kind = kind


def data_fidelity_prox(v, y: Sinogram, W: WeightMap, geom: ScanGeometry, rho: float,
                       cg: CGParams = CGParams(), warm: np.ndarray | None = None,
                       op: ProjectionOperator | None = None):
    """``argmin_z 0.5 ||y - A z||_W^2 + rho/2 ||z - v||^2`` by CG.

    ``v`` may be a :class:`Volume` or a plain array of the reconstruction
    grid's shape.  ``warm`` is the starting iterate (``v`` when omitted).
    """
    if not rho > 0:
        raise ValueError("rho must be > 0")
    data = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)
    if op is None:
        spacing = v.spacing_xy if isinstance(v, Volume) else None
        op = ProjectionOperator(geom, data.shape, spacing)
    w = W.data
    b = op.adjoint(w * y.data) + rho * data
    z, _, _ = conjugate_gradient(lambda x: op.normal(x, w) + rho * x, b,
                                 data if warm is None else warm, cg.tol, cg.max_iter)
    return v.like(z) if isinstance(v, Volume) else z


@dataclass
class AgentSpec:
    """One equilibrium agent.

    ``kind`` selects the map: ``data-fidelity`` (needs ``y``, ``weights``,
    ``geom``), ``bm3d-plane`` (``plane``, ``sigma``), ``bm4d`` (``sigma``),
    ``mrf-prox`` (``mrf``) or ``custom`` (``fn(v, rho, warm)``).
    """

    kind: str
    plane: str | None = None
    sigma: float | None = None
    bm_config: BlockMatchConfig | None = None
    mrf: MrfSpec | None = None
    y: Sinogram | None = None
    weights: WeightMap | None = None
    geom: ScanGeometry | None = None
    cg: CGParams = field(default_factory=lambda: CGParams(tol=1e-6, max_iter=100))
    fn: Callable | None = None
    threads: int = 1
    spacing_xy: float = 1.0
    spacing_z: float = 1.0

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")
        if self.kind == "bm3d-plane" and self.plane not in PLANES:
            raise ValueError(f"bm3d-plane agent needs a plane in {PLANES}")
        if self.kind in ("bm3d-plane", "bm4d") and not (self.sigma and self.sigma > 0):
            raise ValueError(f"{self.kind} agent needs sigma > 0")
        if self.kind == "mrf-prox" and self.mrf is None:
            raise ValueError("mrf-prox agent needs an MrfSpec")
        if self.kind == "data-fidelity" and (self.y is None or self.weights is None
                                             or self.geom is None):
            raise ValueError("data-fidelity agent needs y, weights and geom")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom agent needs fn")
        self._op = None

    @property
    def label(self) -> str:
        return self.plane if self.kind == "bm3d-plane" else self.kind

    def denoiser(self) -> DenoiserSpec:
        plane = self.plane if self.kind == "bm3d-plane" else "VOLUME"
        return DenoiserSpec(plane, self.sigma, self.bm_config)

    def __call__(self, v: np.ndarray, rho: float, warm: np.ndarray | None = None) -> np.ndarray:
        """Evaluate the agent on the array ``v``; pure given its arguments."""
        if self.kind == "data-fidelity":
            if self._op is None or self._op.shape != v.shape:
                self._op = ProjectionOperator(self.geom, v.shape, self.spacing_xy)
            return data_fidelity_prox(v, self.y, self.weights, self.geom, rho, self.cg,
                                      warm=warm, op=self._op)
        if self.kind == "mrf-prox":
            return mrf_prox(v, self.mrf, rho, self.cg)
        if self.kind == "custom":
            return np.asarray(self.fn(v, rho, warm), dtype=np.float64)
        vol = Volume(v, self.spacing_xy, self.spacing_z)
        return apply_denoiser(vol, self.denoiser(), self.threads).data


@dataclass
class ConsensusState:
    x: np.ndarray
    z: list[np.ndarray]
    u: list[np.ndarray]
    rho: float
    k: int = 0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if len(self.z) != len(self.u):
            raise ValueError("z and u must have one entry per agent")
        if any(a.shape != self.x.shape for a in self.z + self.u):
            raise ValueError("all state volumes must share the shape of x")

    @classmethod
    def initial(cls, x0: np.ndarray, n_agents: int, rho: float) -> "ConsensusState":
        x0 = np.asarray(x0, dtype=np.float64)
        return cls(x0.copy(), [x0.copy() for _ in range(n_agents)],
                   [np.zeros_like(x0) for _ in range(n_agents)], rho)


@dataclass
class ResidualTrace:
    primal: list[float] = field(default_factory=list)
    dual: list[float] = field(default_factory=list)
    converged: bool = False

    def append(self, primal: float, dual: float):
        if not (np.isfinite(primal) and np.isfinite(dual)) or primal < 0 or dual < 0:
            raise ValueError(f"invalid residuals ({primal}, {dual})")
        self.primal.append(float(primal))
        self.dual.append(float(dual))

    def __len__(self):
        return len(self.primal)

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "primal", "dual"])
            for k, (p, d) in enumerate(zip(self.primal, self.dual), start=1):
                w.writerow([k, repr(p), repr(d)])

    @classmethod
    def from_csv(cls, path) -> "ResidualTrace":
        tr = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                tr.append(float(row["primal"]), float(row["dual"]))
        return tr


def _evaluate(agents, inputs, rho, warm, threads):
    def run(i):
        try:
            return agents[i](inputs[i], rho, warm[i])
        except Exception as exc:  # noqa: BLE001 - re-raised with the agent index
            raise AgentError(i, agents[i].kind, exc) from exc

    if threads > 1 and len(agents) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(agents))) as pool:
            return list(pool.map(run, range(len(agents))))
    return [run(i) for i in range(len(agents))]


def consensus_step(state: ConsensusState, agents, threads: int = 1) -> ConsensusState:
    """One consensus-ADMM iteration; every agent sees the same ``(x, u)`` snapshot."""
    n = len(agents)
    if n != len(state.z):
        raise ValueError(f"{n} agents for a state with {len(state.z)} copies")
    x = sum(z - u for z, u in zip(state.z, state.u)) / n
    inputs = [x + u for u in state.u]
    z = _evaluate(agents, inputs, state.rho, state.z, threads)
    u = [ul + x - zl for ul, zl in zip(state.u, z)]
    return ConsensusState(x, z, u, state.rho, state.k + 1)


def residuals(state: ConsensusState, prev_state: ConsensusState) -> tuple[float, float]:
    """Primal ``sqrt(sum_l rho ||x - z_l||^2)`` and dual ``||sum_l rho (z_l - z_l_prev)||``."""
    rho = state.rho
    primal = np.sqrt(sum(rho * np.vdot(state.x - z, state.x - z) for z in state.z))
    dual = np.linalg.norm(sum(rho * (z - zp) for z, zp in zip(state.z, prev_state.z)))
    return float(primal), float(dual)


@dataclass
class PnPConfig:
    rho: float = 50.0
    stop_frac: float = 0.05
    max_iter: int = 200
    require_both: bool = True
    threads: int = 1


def run_pnp(agents, x0: np.ndarray, config: PnPConfig = PnPConfig(),
            callback: Callable | None = None) -> tuple[np.ndarray, ResidualTrace]:
    """Iterate :func:`consensus_step` from ``z_l = x0``, ``u_l = 0``.

    Stops once the residuals fall to ``stop_frac`` times their first-iteration
    values (both of them unless ``require_both`` is false) or after
    ``max_iter`` iterations, in which case ``trace.converged`` is False and a
    warning is logged.
    """
    kinds = [a.kind for a in agents]
    if kinds.count("data-fidelity") != 1:
        raise ValueError("exactly one data-fidelity agent is required")
    if len(agents) < 2:
        raise ValueError("at least two agents are required")
    x0 = x0.data if isinstance(x0, Volume) else np.asarray(x0, dtype=np.float64)
    state = ConsensusState.initial(x0, len(agents), config.rho)
    trace = ResidualTrace()
    for _ in range(config.max_iter):
        new = consensus_step(state, agents, config.threads)
        primal, dual = residuals(new, state)
        trace.append(primal, dual)
        state = new
        if callback is not None:
            callback(state, trace)
        p_ok = primal <= config.stop_frac * trace.primal[0]
        d_ok = dual <= config.stop_frac * trace.dual[0]
        if (p_ok and d_ok) if config.require_both else (p_ok or d_ok):
            trace.converged = True
            break
    if not trace.converged:
        log.warning("run_pnp stopped at max_iter=%d before the residual rule was met",
                    config.max_iter)
    return state.x, trace


def _fidelity_agent(y, W, geom, cg, spacing_xy, spacing_z):
    return AgentSpec("data-fidelity", y=y, weights=W, geom=geom, cg=cg,
                     spacing_xy=spacing_xy, spacing_z=spacing_z)


def build_msf_agents(y: Sinogram, W: WeightMap, geom: ScanGeometry, sigmas,
                     bm_config: BlockMatchConfig | None = None,
                     cg: CGParams = CGParams(tol=1e-6, max_iter=100), threads: int = 1,
                     spacing_xy: float = 1.0, spacing_z: float = 1.0) -> list[AgentSpec]:
    """Data-fidelity agent plus XY, YZ and XZ BM3D agents with their own strengths.

    ``sigmas`` is ``(sigma_xy, sigma_yz, sigma_xz)``.
    """
    sigmas = tuple(float(s) for s in sigmas)
    if len(sigmas) != 3:
        raise ValueError("need three sigmas (xy, yz, xz)")
    if min(sigmas) <= 0:
        raise ValueError("all sigmas must be > 0")
    agents = [_fidelity_agent(y, W, geom, cg, spacing_xy, spacing_z)]
    for plane, s in zip(PLANES, sigmas):
        agents.append(AgentSpec("bm3d-plane", plane=plane, sigma=s, bm_config=bm_config,
                                threads=threads, spacing_xy=spacing_xy, spacing_z=spacing_z))
    return agents


def build_bm4d_agents(y: Sinogram, W: WeightMap, geom: ScanGeometry, sigma: float,
                      bm_config: BlockMatchConfig | None = None,
                      cg: CGParams = CGParams(tol=1e-6, max_iter=100),
                      spacing_xy: float = 1.0, spacing_z: float = 1.0) -> list[AgentSpec]:
    """Data-fidelity agent plus one volumetric BM4D agent."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return [_fidelity_agent(y, W, geom, cg, spacing_xy, spacing_z),
            AgentSpec("bm4d", sigma=float(sigma), bm_config=bm_config,
                      spacing_xy=spacing_xy, spacing_z=spacing_z)]
