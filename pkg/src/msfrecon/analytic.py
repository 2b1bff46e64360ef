"""Filtered back projection baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, ProjectionOperator, ScanGeometry, Sinogram, Volume

FILTER_KINDS = ("ram-lak", "shepp-logan", "cosine")


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "ram-lak"
    cutoff: float = 1.0

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}; choose from {FILTER_KINDS}")
        if not 0.0 < self.cutoff <= 1.0:
            raise ValueError("cutoff must lie in (0, 1]")


def ramp_kernel(n_pad: int, spacing: float) -> np.ndarray:
    """Band-limited spatial ramp kernel laid out circularly over ``n_pad`` taps.

    ``h[0] = 1/(4 tau^2)``, ``h[n] = -1/(n pi tau)^2`` for odd ``n`` and zero
    for even ``n != 0``.
    """
    n = np.arange(n_pad)
    n = np.where(n <= n_pad // 2, n, n - n_pad)
    h = np.zeros(n_pad)
    h[0] = 1.0 / (4.0 * spacing ** 2)
    odd = (n % 2) == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    return h


def filter_response(n_pad: int, spacing: float, spec: FilterSpec) -> np.ndarray:
    """Frequency response (length ``n_pad``) including the ``spacing`` quadrature factor."""
    response = np.real(np.fft.fft(ramp_kernel(n_pad, spacing))) * spacing
    # fraction of Nyquist for each FFT bin
    nu = np.abs(np.fft.fftfreq(n_pad)) * 2.0
    rel = nu / spec.cutoff
    if spec.kind == "shepp-logan":
        response = response * np.sinc(rel / 2.0)
    elif spec.kind == "cosine":
        response = response * np.cos(np.pi * rel / 2.0)
    response[rel > 1.0] = 0.0
    return response


def filter_sinogram(sino: Sinogram, f: FilterSpec = FilterSpec()) -> Sinogram:
    """Ramp-filter every (view, slice) row along the channel axis."""
    n = sino.n_channels
    if n < 2:
        raise GeometryError("filtering needs at least 2 channels")
    n_pad = max(64, int(2 ** np.ceil(np.log2(2 * n))))
    response = filter_response(n_pad, sino.channel_spacing, f)
    spectrum = np.fft.fft(sino.data, n=n_pad, axis=-1)
    out = np.real(np.fft.ifft(spectrum * response, axis=-1))[..., :n]
    return sino.like(out)


def _fill_unmeasured(data: np.ndarray, measured: np.ndarray) -> np.ndarray:
    """Linear interpolation along z into unmeasured slices, nearest beyond the ends."""
    nz = data.shape[0]
    if len(measured) == nz:
        return data
    out = np.empty_like(data)
    for k in range(nz):
        hi = np.searchsorted(measured, k)
        if hi < len(measured) and measured[hi] == k:
            out[k] = data[k]
        elif hi == 0:
            out[k] = data[measured[0]]
        elif hi == len(measured):
            out[k] = data[measured[-1]]
        else:
            k0, k1 = measured[hi - 1], measured[hi]
            w = (k - k0) / (k1 - k0)
            out[k] = (1 - w) * data[k0] + w * data[k1]
    return out


def fov_mask(geom: ScanGeometry, shape, spacing_xy: float) -> np.ndarray:
    """In-plane pixels whose center lies within the detector's half width of the rotation axis."""
    _, ny, nx = shape
    y = (np.arange(ny) - (ny - 1) / 2.0) * spacing_xy
    x = (np.arange(nx) - (nx - 1) / 2.0) * spacing_xy
    cx = geom.center_offset * geom.channel_spacing
    r = np.hypot(y[:, None], x[None, :] - cx)
    return r <= 0.5 * geom.n_channels * geom.channel_spacing


def fbp(sino: Sinogram, geom: ScanGeometry, f: FilterSpec = FilterSpec(), shape=None,
        spacing_xy=None, circle: bool = True) -> Volume:
    """Filtered back projection.

    The backprojection is scaled by ``pi / n_views`` times
    ``channel_spacing / spacing_xy**2`` (the latter is 1 for the default grid
    whose voxel pitch equals the channel pitch).  Slices skipped by the
    acquisition are filled by linear interpolation along z.  With ``circle``
    set, pixels outside the detector field of view (seen by only some views)
    are zeroed.
    """
    if sino.n_views < 2:
        raise GeometryError("FBP needs at least 2 views")
    op = ProjectionOperator(geom, shape, spacing_xy)
    q = filter_sinogram(sino, f)
    scale = np.pi / sino.n_views * geom.channel_spacing / op.spacing_xy ** 2
    rec = op.adjoint(q.data) * scale
    rec = _fill_unmeasured(rec, op.slices)
    if circle:
        rec *= fov_mask(geom, op.shape, op.spacing_xy)
    rec = np.nan_to_num(rec, nan=0.0, posinf=0.0, neginf=0.0)
    return Volume(rec, op.spacing_xy, sino.slice_spacing / geom.slice_stride)
