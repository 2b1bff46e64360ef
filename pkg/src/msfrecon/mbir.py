"""Weighted least squares with a quadratic Markov random field prior."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, ProjectionOperator, ScanGeometry, Sinogram, Volume, WeightMap


class ConvergenceError(RuntimeError):
    """An iterative solve produced a non-finite iterate."""


@dataclass(frozen=True)
class CGParams:
    tol: float = 1e-6
    max_iter: int = 200


def conjugate_gradient(apply, b: np.ndarray, x0: np.ndarray | None = None, tol: float = 1e-6,
                       max_iter: int = 200):
    """Solve ``apply(x) = b`` for a symmetric positive (semi)definite operator.

    Stops once ``||b - apply(x)|| <= tol * ||b||``.  Returns ``(x, n_iter,
    relative_residual)``.
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    r = b - apply(x) if x0 is not None else b.copy()
    d = r.copy()
    rr = np.vdot(r, r)
    if not (np.isfinite(bnorm) and np.isfinite(rr)):
        raise ConvergenceError("conjugate gradient started from a non-finite residual")
    it = 0
    while it < max_iter and np.sqrt(rr) > tol * bnorm:
        q = apply(d)
        dq = np.vdot(d, q)
        if dq <= 0:
            break
        alpha = rr / dq
        x += alpha * d
        r -= alpha * q
        rr_new = np.vdot(r, r)
        d = r + (rr_new / rr) * d
        rr = rr_new
        it += 1
        if not np.isfinite(rr):
            raise ConvergenceError(f"conjugate gradient diverged at iteration {it}")
    if not np.all(np.isfinite(x)):
        raise ConvergenceError("conjugate gradient produced a non-finite iterate")
    return x, it, float(np.sqrt(rr) / bnorm)


@dataclass(frozen=True)
class MrfSpec:
    """Quadratic MRF: ``beta * sum_{pairs} w_ij (x_i - x_j)^2 / 2``.

    ``edge_weights`` gives one weight per neighbor class (face, edge, corner);
    by default weights are inverse distances normalized to sum to one over a
    full neighborhood.
    """

    beta: float = 1.0
    neighborhood: int = 26
    edge_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.neighborhood not in (6, 26):
            raise ValueError("neighborhood must be 6 or 26")
        if self.edge_weights is not None and any(w <= 0 for w in self.edge_weights):
            raise ValueError("edge weights must be positive")

    def class_weights(self) -> dict[int, float]:
        """Weight keyed by squared offset length (1 face, 2 edge, 3 corner)."""
        classes = (1,) if self.neighborhood == 6 else (1, 2, 3)
        if self.edge_weights is not None:
            if len(self.edge_weights) != len(classes):
                raise ValueError(f"expected {len(classes)} edge weights")
            return dict(zip(classes, self.edge_weights))
        counts = {1: 6, 2: 12, 3: 8}
        raw = {c: 1.0 / np.sqrt(c) for c in classes}
        total = sum(counts[c] * raw[c] for c in classes)
        return {c: raw[c] / total for c in classes}

    def pairs(self):
        """``(offset, weight)`` for each forward neighbor offset (each pair counted once)."""
        weights = self.class_weights()
        for off in itertools.product((-1, 0, 1), repeat=3):
            n2 = sum(o * o for o in off)
            if n2 == 0 or n2 not in weights or off <= (0, 0, 0):
                continue
            yield off, weights[n2]


def _overlap(shape, off):
    a = tuple(slice(max(0, -o), n - max(0, o)) for n, o in zip(shape, off))
    b = tuple(slice(max(0, o), n - max(0, -o)) for n, o in zip(shape, off))
    return a, b


def mrf_cost_grad(vol, spec: MrfSpec):
    """Cost and exact gradient of the quadratic MRF; returns the gradient in the input's type."""
    x = vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float64)
    cost = 0.0
    grad = np.zeros_like(x)
    if spec.beta != 0:
        for off, w in spec.pairs():
            a, b = _overlap(x.shape, off)
            d = x[b] - x[a]
            cost += 0.5 * spec.beta * w * np.vdot(d, d)
            grad[b] += spec.beta * w * d
            grad[a] -= spec.beta * w * d
    return cost, (vol.like(grad) if isinstance(vol, Volume) else grad)


def mrf_hessian(x: np.ndarray, spec: MrfSpec) -> np.ndarray:
    """``beta * L x`` (the prior is quadratic, so this equals its gradient)."""
    return mrf_cost_grad(x, spec)[1]


def laplacian_matrix(shape, spec: MrfSpec) -> np.ndarray:
    """Dense weighted graph Laplacian (without beta), for small test grids."""
    n = int(np.prod(shape))
    lap = np.zeros((n, n))
    idx = np.arange(n).reshape(shape)
    for off, w in spec.pairs():
        a, b = _overlap(shape, off)
        for i, j in zip(idx[a].ravel(), idx[b].ravel()):
            lap[i, i] += w
            lap[j, j] += w
            lap[i, j] -= w
            lap[j, i] -= w
    return lap


def mbir_cost(x: np.ndarray, y: np.ndarray, weights: np.ndarray, op: ProjectionOperator,
              spec: MrfSpec) -> float:
    r = y - op.forward(x)
    return 0.5 * float(np.vdot(r, weights * r)) + mrf_cost_grad(x, spec)[0]


def reconstruct_mbir(sino: Sinogram, W: WeightMap, geom: ScanGeometry, spec: MrfSpec,
                     cg: CGParams = CGParams(), shape=None, spacing_xy=None,
                     x0: np.ndarray | None = None) -> Volume:
    """Minimize ``0.5 ||y - A x||_W^2 + mrf(x)`` by CG on the normal equations."""
    if W.data.shape != sino.data.shape:
        raise GeometryError("weight map and sinogram shapes differ")
    op = ProjectionOperator(geom, shape, spacing_xy)
    w = W.data
    b = op.adjoint(w * sino.data)

    def apply(x):
        return op.normal(x, w) + mrf_hessian(x, spec)

    x, _, _ = conjugate_gradient(apply, b, x0, cg.tol, cg.max_iter)
    return Volume(x, op.spacing_xy, sino.slice_spacing / geom.slice_stride)


def mrf_prox(v, spec: MrfSpec, rho: float, cg: CGParams = CGParams()):
    """``argmin_z mrf(z) + rho/2 ||z - v||^2``, warm-started at ``v``."""
    if not rho > 0:
        raise ValueError("rho must be > 0")
    data = v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)
    if spec.beta == 0:
        z = data.copy()
    else:
        z, _, _ = conjugate_gradient(lambda x: mrf_hessian(x, spec) + rho * x, rho * data,
                                     data, cg.tol, cg.max_iter)
    return v.like(z) if isinstance(v, Volume) else z
