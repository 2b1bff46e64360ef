"""Volumes, sinograms and the parallel-beam projector.

Coordinate conventions
----------------------
* A :class:`Volume` stores densities in an array of shape ``(nz, ny, nx)``
  (z-major, then y, then x).  Voxel ``(k, j, i)`` has its center at
  ``x = (i - (nx - 1) / 2) * spacing_xy``, ``y = (j - (ny - 1) / 2) * spacing_xy``.
* A :class:`Sinogram` stores line integrals in an array of shape
  ``(n_views, n_slices, n_channels)``.
* View angle 0 sends rays parallel to the y axis; angles grow counterclockwise.
  Channel ``c`` sits at detector coordinate
  ``t = (c - (n_channels - 1) / 2 - center_offset) * channel_spacing`` measured
  along ``(cos a, sin a)``.
* Sinogram slice ``k`` measures volume slice ``k * slice_stride``.

Rays are sampled every ``spacing_xy / 2`` mm and the volume is bilinearly
interpolated at every sample (Joseph-style).  Samples whose interpolation
stencil leaves the grid only pick up the in-grid pixels.  The projector is
stored as a sparse matrix, so the backprojector is its exact transpose.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class GeometryError(ValueError):
    """Raised when array dimensions and geometry disagree."""


@dataclass
class Volume:
    """3D density grid (1/mm) with voxel spacing in mm."""

    data: np.ndarray
    spacing_xy: float = 1.0
    spacing_z: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise GeometryError(f"volume data must be 3D (nz, ny, nx), got shape {self.data.shape}")
        if self.spacing_xy <= 0 or self.spacing_z <= 0:
            raise GeometryError("voxel spacings must be strictly positive")
        if not np.all(np.isfinite(self.data)):
            raise GeometryError("volume contains non-finite values")

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def like(self, data) -> "Volume":
        """New volume with the same spacings and different data."""
        return Volume(data, self.spacing_xy, self.spacing_z)


@dataclass
class Sinogram:
    """Projection data of shape ``(n_views, n_slices, n_channels)``."""

    data: np.ndarray
    angles: np.ndarray
    channel_spacing: float = 1.0
    slice_spacing: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.data.ndim != 3:
            raise GeometryError(
                f"sinogram data must be 3D (views, slices, channels), got shape {self.data.shape}"
            )
        if self.angles.shape != (self.data.shape[0],):
            raise GeometryError(
                f"{self.angles.size} angles given for {self.data.shape[0]} views"
            )
        if self.angles.size > 1 and np.any(np.diff(self.angles) <= 0):
            raise GeometryError("angles must be strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise GeometryError("sinogram contains non-finite values")

    @property
    def n_views(self) -> int:
        return self.data.shape[0]

    @property
    def n_slices(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    def like(self, data) -> "Sinogram":
        return Sinogram(data, self.angles, self.channel_spacing, self.slice_spacing)


@dataclass(frozen=True)
class ScanGeometry:
    """Parallel-beam acquisition geometry.

    ``slice_stride`` records how many volume slices separate two measured
    slices; the reconstruction grid has ``n_slices * slice_stride`` slices by
    default.
    """

    angles: tuple[float, ...]
    n_channels: int
    channel_spacing: float = 1.0
    center_offset: float = 0.0
    n_slices: int = 1
    slice_spacing: float = 1.0
    slice_stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if self.n_channels < 1:
            raise GeometryError("n_channels must be >= 1")
        if self.channel_spacing <= 0:
            raise GeometryError("channel_spacing must be > 0")
        if self.n_slices < 1 or self.slice_stride < 1:
            raise GeometryError("n_slices and slice_stride must be >= 1")
        if len(self.angles) < 1:
            raise GeometryError("at least one view angle is required")

    @classmethod
    def uniform(cls, n_views: int, n_channels: int, **kwargs) -> "ScanGeometry":
        """Evenly spaced views over [0, pi)."""
        angles = np.arange(n_views) * (np.pi / n_views)
        return cls(tuple(angles), n_channels, **kwargs)

    @property
    def n_views(self) -> int:
        return len(self.angles)

    def default_grid(self) -> tuple[int, int, int]:
        """Volume shape ``(nz, ny, nx)`` implied when none is given."""
        return (self.n_slices * self.slice_stride, self.n_channels, self.n_channels)

    def measured_slices(self, nz: int) -> np.ndarray:
        idx = np.arange(self.n_slices) * self.slice_stride
        if nz <= idx[-1] or len(range(0, nz, self.slice_stride)) != self.n_slices:
            raise GeometryError(
                f"volume with nz={nz} is incompatible with {self.n_slices} measured slices "
                f"at stride {self.slice_stride}"
            )
        return idx


@functools.lru_cache(maxsize=16)
def system_matrix(geom: ScanGeometry, nx: int, ny: int, spacing_xy: float) -> sp.csr_matrix:
    """Sparse single-slice projector, rows ``view * n_channels + channel``, columns ``y * nx + x``."""
    step = spacing_xy / 2.0
    half_w = 0.5 * nx * spacing_xy
    half_h = 0.5 * ny * spacing_xy
    radius = np.hypot(half_w, half_h) + spacing_xy
    n_samples = int(np.ceil(2 * radius / step))
    s = -radius + (np.arange(n_samples) + 0.5) * step

    t = (np.arange(geom.n_channels) - (geom.n_channels - 1) / 2.0 - geom.center_offset)
    t = t * geom.channel_spacing

    blocks = []
    for v, angle in enumerate(geom.angles):
        c, sn = np.cos(angle), np.sin(angle)
        px = t[:, None] * c - s[None, :] * sn
        py = t[:, None] * sn + s[None, :] * c
        fx = px / spacing_xy + (nx - 1) / 2.0
        fy = py / spacing_xy + (ny - 1) / 2.0
        keep = (fx > -1) & (fx < nx) & (fy > -1) & (fy < ny)
        ch = np.broadcast_to(np.arange(geom.n_channels)[:, None], keep.shape)[keep]
        fx, fy = fx[keep], fy[keep]
        ix0 = np.floor(fx).astype(np.int64)
        iy0 = np.floor(fy).astype(np.int64)
        ax = fx - ix0
        ay = fy - iy0
        rows, cols, vals = [], [], []
        for dy, wy in ((0, 1.0 - ay), (1, ay)):
            for dx, wx in ((0, 1.0 - ax), (1, ax)):
                ix = ix0 + dx
                iy = iy0 + dy
                ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
                rows.append(ch[ok])
                cols.append(iy[ok] * nx + ix[ok])
                vals.append((wx * wy)[ok] * step)
        block = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(geom.n_channels, nx * ny),
        ).tocsr()
        block.eliminate_zeros()
        blocks.append(block)
    return sp.vstack(blocks, format="csr")


class ProjectionOperator:
    """Array-level forward model ``A`` for a fixed geometry and volume grid.

    ``forward`` maps ``(nz, ny, nx)`` arrays to ``(n_views, n_slices,
    n_channels)`` arrays; ``adjoint`` is its exact transpose and writes zeros
    into unmeasured slices.
    """

    def __init__(self, geom: ScanGeometry, shape: tuple[int, int, int] | None = None,
                 spacing_xy: float | None = None):
        self.geom = geom
        self.shape = tuple(shape) if shape is not None else geom.default_grid()
        self.spacing_xy = float(spacing_xy if spacing_xy is not None else geom.channel_spacing)
        nz, ny, nx = self.shape
        self.slices = geom.measured_slices(nz)
        self.matrix = system_matrix(geom, nx, ny, self.spacing_xy)
        self.sino_shape = (geom.n_views, geom.n_slices, geom.n_channels)

    def forward(self, x: np.ndarray) -> np.ndarray:
        nz, ny, nx = self.shape
        if x.shape != self.shape:
            raise GeometryError(f"expected volume of shape {self.shape}, got {x.shape}")
        cols = x[self.slices].reshape(len(self.slices), ny * nx).T
        out = self.matrix @ cols
        return out.reshape(self.geom.n_views, self.geom.n_channels, -1).transpose(0, 2, 1).copy()

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        nz, ny, nx = self.shape
        if y.shape != self.sino_shape:
            raise GeometryError(f"expected sinogram of shape {self.sino_shape}, got {y.shape}")
        cols = y.transpose(0, 2, 1).reshape(self.geom.n_views * self.geom.n_channels, -1)
        back = (self.matrix.T @ cols).T.reshape(len(self.slices), ny, nx)
        out = np.zeros(self.shape)
        out[self.slices] = back
        return out

    def normal(self, x: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        """``A^T W A x``."""
        y = self.forward(x)
        if weights is not None:
            y *= weights
        return self.adjoint(y)


def project(vol: Volume, geom: ScanGeometry) -> Sinogram:
    """Line integrals of ``vol`` along every (view, channel, measured slice) ray."""
    op = ProjectionOperator(geom, vol.shape, vol.spacing_xy)
    return Sinogram(
        op.forward(vol.data),
        np.asarray(geom.angles),
        geom.channel_spacing,
        vol.spacing_z * geom.slice_stride,
    )


def backproject(sino: Sinogram, geom: ScanGeometry, shape=None, spacing_xy=None,
                spacing_z=None) -> Volume:
    """Exact transpose of :func:`project`.

    ``shape`` defaults to ``geom.default_grid()`` and ``spacing_xy`` to the
    channel spacing.
    """
    if sino.data.shape != (geom.n_views, geom.n_slices, geom.n_channels):
        raise GeometryError(
            f"sinogram shape {sino.data.shape} does not match geometry "
            f"{(geom.n_views, geom.n_slices, geom.n_channels)}"
        )
    op = ProjectionOperator(geom, shape, spacing_xy)
    if spacing_z is None:
        spacing_z = sino.slice_spacing / geom.slice_stride
    return Volume(op.adjoint(sino.data), op.spacing_xy, spacing_z)


def geometry_for(sino: Sinogram, center_offset: float = 0.0, slice_stride: int = 1) -> ScanGeometry:
    """Geometry describing an existing sinogram."""
    return ScanGeometry(
        tuple(sino.angles), sino.n_channels, sino.channel_spacing, center_offset,
        sino.n_slices, sino.slice_spacing, slice_stride,
    )


@dataclass
class WeightMap:
    """Per-measurement inverse noise variances, same shape as the sinogram data."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise GeometryError("weights must be finite")
        if np.any(self.data < 0):
            raise GeometryError("weights must be nonnegative")

    @classmethod
    def uniform(cls, sino: Sinogram, value: float = 1.0) -> "WeightMap":
        return cls(np.full(sino.data.shape, float(value)))
