"""Block-matching collaborative-filtering denoisers.

One engine serves both the 2D (BM3D) and the 3D (BM4D) case: reference
patches on a stride grid are matched against every patch in a cubic search
window, the best matches are stacked into a group, the group is transformed
(orthonormal DCT-II on each patch, Haar across the group), shrunk, inverted
and aggregated back with per-group weights.

All transforms are orthonormal, the group DC coefficient is never shrunk and
each image is processed relative to its median, so constant inputs come back
bit-for-bit unchanged.
"""

from __future__ import annotations

import functools
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Volume

PLANES = ("XY", "YZ", "XZ")


@dataclass(frozen=True)
class BlockMatchConfig:
    """Block-matching parameters.

    ``match_threshold`` is a mean squared difference per pixel; ``None``
    keeps the best ``max_group_size`` candidates regardless of distance.
    ``stage`` is ``"hard"`` or ``"hard+wiener"``.
    """

    patch_size: int = 8
    search_radius: int = 16
    match_threshold: float | None = None
    max_group_size: int = 16
    step: int = 4
    stage: str = "hard+wiener"
    hard_threshold_lambda: float = 2.7

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if self.search_radius < 1:
            raise ValueError("search_radius must be >= 1")
        g = self.max_group_size
        if g < 1 or g & (g - 1):
            raise ValueError("max_group_size must be a power of two >= 1")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if self.stage not in ("hard", "hard+wiener"):
            raise ValueError(f"unknown stage {self.stage!r}")

    @classmethod
    def default_2d(cls, **kw) -> "BlockMatchConfig":
        return cls(**kw)

    @classmethod
    def default_3d(cls, **kw) -> "BlockMatchConfig":
        base = dict(patch_size=4, search_radius=8, stage="hard")
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class DenoiserSpec:
    """A plane-sliced BM3D (``plane`` in XY/YZ/XZ) or a BM4D (``plane="VOLUME"``)."""

    plane: str
    sigma: float
    bm_config: BlockMatchConfig | None = None

    def __post_init__(self):
        if self.plane not in PLANES + ("VOLUME",):
            raise ValueError(f"unknown plane {self.plane!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")

    @property
    def config(self) -> BlockMatchConfig:
        if self.bm_config is not None:
            return self.bm_config
        if self.plane == "VOLUME":
            return BlockMatchConfig.default_3d()
        return BlockMatchConfig.default_2d()


def search_cost(alpha: int, mode: str) -> int:
    """Candidate count per reference location for a search window of side ``alpha``.

    Three 2D windows (one per plane) for ``"MSF"``, one cubic window for
    ``"BM4D"``.  With this module's windows, ``alpha = 2 * search_radius + 1``.
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if mode == "MSF":
        return 3 * alpha ** 2
    if mode == "BM4D":
        return alpha ** 3
    raise ValueError(f"unknown mode {mode!r}")


def haar_matrix(n: int) -> np.ndarray:
    """Orthonormal Haar transform of size ``n`` (a power of two); row 0 is the mean."""
    h = np.ones((1, 1))
    while h.shape[0] < n:
        m = h.shape[0]
        top = np.kron(h, [1.0, 1.0])
        bottom = np.kron(np.eye(m), [1.0, -1.0])
        h = np.vstack([top, bottom]) / np.sqrt(2.0)
    return h


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


def _patch_transform(p: int, ndim: int) -> np.ndarray:
    d = dct_matrix(p)
    t = d
    for _ in range(ndim - 1):
        t = np.kron(t, d)
    return t


def _ref_positions(n: int, p: int, step: int) -> list[int]:
    last = n - p
    pos = list(range(0, last + 1, step))
    if pos[-1] != last:
        pos.append(last)
    return pos


def _k_smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` smallest entries per row, ties to the lower index, sorted by value."""
    if k >= d.shape[1]:
        return np.argsort(d, axis=1, kind="stable")[:, :k]
    kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
    less = d < kth
    need = k - less.sum(axis=1, keepdims=True)
    take = less | ((d == kth) & (np.cumsum(d == kth, axis=1) <= need))
    idx = np.nonzero(take)[1].reshape(d.shape[0], k)
    order = np.argsort(np.take_along_axis(d, idx, axis=1), axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def _largest_pow2(n: np.ndarray) -> np.ndarray:
    return 2 ** np.floor(np.log2(np.maximum(n, 1))).astype(np.int64)


class _Engine:
    """Block matching and collaborative filtering on a batch of equally sized images."""

    def __init__(self, spatial: tuple[int, ...], cfg: BlockMatchConfig):
        self.spatial = spatial
        self.ndim = len(spatial)
        self.cfg = cfg
        p = cfg.patch_size
        if min(spatial) < p:
            raise ValueError(f"image of shape {spatial} is smaller than one {p}-pixel patch")
        per_axis = [_ref_positions(n, p, cfg.step) for n in spatial]
        self.refs = np.array(list(itertools.product(*per_axis)), dtype=np.int64)
        ranges = [range(-min(cfg.search_radius, n - p), min(cfg.search_radius, n - p) + 1)
                  for n in spatial]
        self.disps = np.array(list(itertools.product(*ranges)), dtype=np.int64)
        self.zero_disp = int(np.flatnonzero(~self.disps.any(axis=1))[0])
        self.transform = _patch_transform(p, self.ndim)
        self.patch_offsets = np.array(
            list(itertools.product(*[range(p)] * self.ndim)), dtype=np.int64)
        strides = np.cumprod((spatial[1:] + (1,))[::-1])[::-1]
        self.strides = np.asarray(strides, dtype=np.int64)
        self.n_pix = int(np.prod(spatial))
        self._chunks = self._build_chunks()

    def distances(self, imgs: np.ndarray) -> np.ndarray:
        """Mean squared patch distance for every (image, reference, displacement).

        Out-of-bounds candidates get ``inf``; the zero displacement gets -1 so
        the reference always heads its own group.  Cross terms are computed as
        one matrix product per row of references against the candidate slab
        their search windows cover.
        """
        p = self.cfg.patch_size
        size = p ** self.ndim
        nb = imgs.shape[0]
        dist = np.full((nb, len(self.refs), len(self.disps)), np.inf)
        for b in range(nb):
            win = sliding_window_view(imgs[b], (p,) * self.ndim)
            patches = win.reshape(-1, size)
            norms = np.einsum("ij,ij->i", patches, patches).reshape(win.shape[:self.ndim])
            for rows, slab, ok, flat, ref_idx in self._chunks:
                cand = win[slab].reshape(-1, size)
                cross = win[ref_idx].reshape(len(rows), size) @ cand.T
                cn = norms[slab].ravel()[flat]
                d = norms[ref_idx][:, None] + cn - 2.0 * np.take_along_axis(cross, flat, axis=1)
                dist[b, rows] = np.where(ok, np.maximum(d, 0.0) / size, np.inf)
        dist[:, :, self.zero_disp] = -1.0
        return dist

    def _build_chunks(self):
        """References sharing all but the last coordinate, with the candidate slab they search."""
        npos = np.array(self.spatial) - self.cfg.patch_size + 1
        r = self.cfg.search_radius
        _, inv = np.unique(self.refs[:, :-1], axis=0, return_inverse=True)
        inv = inv.ravel()
        chunks = []
        for k in range(inv.max() + 1):
            rows = np.flatnonzero(inv == k)
            sub = self.refs[rows]
            lo = np.maximum(sub.min(axis=0) - r, 0)
            hi = np.minimum(sub.max(axis=0) + r + 1, npos)
            pos = sub[:, None, :] + self.disps[None, :, :]
            ok = np.all((pos >= 0) & (pos < npos), axis=-1)
            rel = np.where(ok[..., None], pos - lo, 0)
            flat = np.ravel_multi_index(tuple(rel[..., i] for i in range(self.ndim)),
                                        tuple(hi - lo))
            slab = tuple(slice(a, b) for a, b in zip(lo, hi))
            ref_idx = tuple(sub[:, i] for i in range(self.ndim))
            chunks.append((rows, slab, ok, flat, ref_idx))
        return chunks

    def groups(self, dist: np.ndarray):
        """Yield ``(group_size, image_index, ref_index, candidate_positions)`` buckets.

        Members are the ``group_size`` closest candidates, ties going to the
        earlier candidate in scan order, listed by increasing distance.
        """
        cfg = self.cfg
        valid = np.isfinite(dist)
        if cfg.match_threshold is not None:
            valid &= dist <= cfg.match_threshold
        count = valid.sum(axis=-1)
        size = _largest_pow2(np.minimum(count, cfg.max_group_size))
        for g in np.unique(size):
            bi, ri = np.nonzero(size == g)
            sel = _k_smallest(dist[bi, ri], int(g))
            pos = self.refs[ri][:, None, :] + self.disps[sel]
            yield int(g), bi, ri, pos

    def _flat_index(self, bi, pos):
        base = bi[:, None] * self.n_pix + pos @ self.strides
        return base[:, :, None] + (self.patch_offsets @ self.strides)[None, None, :]

    def _gather(self, imgs, bi, pos):
        p = self.cfg.patch_size
        win = sliding_window_view(imgs, (p,) * self.ndim, axis=tuple(range(1, self.ndim + 1)))
        idx = (bi[:, None],) + tuple(pos[..., i] for i in range(self.ndim))
        g = win[idx]
        return g.reshape(g.shape[0], g.shape[1], -1)

    def _forward(self, grp, haar):
        return haar @ (grp @ self.transform.T)

    def _inverse(self, coef, haar):
        return (haar.T @ coef) @ self.transform

    def run_stage(self, noisy, pilot, sigma, wiener: bool, counter=None):
        nb = noisy.shape[0]
        dist = self.distances(pilot if wiener else noisy)
        if counter is not None and not wiener:
            counter["refs"] = self.refs.copy()
            counter["candidates"] = np.isfinite(dist).sum(axis=-1)
        num = np.zeros(nb * self.n_pix)
        den = np.zeros(nb * self.n_pix)
        lam = self.cfg.hard_threshold_lambda * sigma
        for g, bi, ri, pos in self.groups(dist):
            haar = haar_matrix(g)
            coef = self._forward(self._gather(noisy, bi, pos), haar)
            if wiener:
                pc = self._forward(self._gather(pilot, bi, pos), haar)
                shrink = pc ** 2 / (pc ** 2 + sigma ** 2)
                shrink[:, 0, 0] = 1.0
                coef = coef * shrink
                weight = 1.0 / np.sum(shrink ** 2, axis=(1, 2))
            else:
                keep = np.abs(coef) > lam
                keep[:, 0, 0] = True
                coef = np.where(keep, coef, 0.0)
                weight = 1.0 / (1.0 + keep.sum(axis=(1, 2)))
            est = self._inverse(coef, haar)
            idx = self._flat_index(bi, pos).ravel()
            num += np.bincount(idx, weights=(est * weight[:, None, None]).ravel(),
                               minlength=num.size)
            den += np.bincount(idx, weights=np.broadcast_to(weight[:, None, None],
                                                            est.shape).ravel(),
                               minlength=den.size)
        return (num / den).reshape(noisy.shape)


@functools.lru_cache(maxsize=32)
def _engine(spatial: tuple[int, ...], cfg: BlockMatchConfig) -> _Engine:
    return _Engine(spatial, cfg)


def denoise_stack(stack: np.ndarray, sigma: float, cfg: BlockMatchConfig,
                  counter: dict | None = None) -> np.ndarray:
    """Denoise each image of ``stack`` (first axis indexes images) independently."""
    stack = np.asarray(stack, dtype=np.float64)
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    axes = tuple(range(1, stack.ndim))
    offset = np.median(stack, axis=axes, keepdims=True)
    work = stack - offset
    eng = _engine(stack.shape[1:], cfg)
    basic = eng.run_stage(work, None, sigma, wiener=False, counter=counter)
    if cfg.stage == "hard+wiener":
        basic = eng.run_stage(work, basic, sigma, wiener=True)
    return basic + offset


def bm3d_denoise_2d(img: np.ndarray, sigma: float, cfg: BlockMatchConfig | None = None,
                    counter: dict | None = None) -> np.ndarray:
    """Denoise a 2D image with grouped-transform shrinkage.

    Pass a dict as ``counter`` to receive the reference positions and the
    number of in-bounds candidates examined for each reference.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("bm3d_denoise_2d expects a 2D image")
    cfg = cfg or BlockMatchConfig.default_2d()
    out = denoise_stack(img[None], sigma, cfg, counter)
    if counter is not None:
        counter["candidates"] = counter["candidates"][0]
    return out[0]


def bm4d_denoise_3d(vol: Volume, sigma: float, cfg: BlockMatchConfig | None = None,
                    counter: dict | None = None) -> Volume:
    """Volumetric counterpart of :func:`bm3d_denoise_2d` with cubic patches."""
    cfg = cfg or BlockMatchConfig.default_3d()
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float64)
    out = denoise_stack(data[None], sigma, cfg, counter)[0]
    if counter is not None:
        counter["candidates"] = counter["candidates"][0]
    return vol.like(out) if isinstance(vol, Volume) else out


# stack axis order for each plane: (normal axis, image rows, image cols)
_PLANE_AXES = {"XY": (0, 1, 2), "YZ": (2, 0, 1), "XZ": (1, 0, 2)}


def plane_stack(data: np.ndarray, plane: str) -> np.ndarray:
    """View of a ``(nz, ny, nx)`` array as a stack of 2D slices parallel to ``plane``."""
    return data.transpose(_PLANE_AXES[plane])


def apply_plane_denoiser(vol: Volume, spec: DenoiserSpec, threads: int = 1) -> Volume:
    """Run the 2D denoiser on every slice parallel to ``spec.plane`` and restack.

    With ``threads > 1`` the slices are split into contiguous chunks handled
    concurrently; every slice is processed independently so the result does
    not depend on the chunking.
    """
    if spec.plane not in PLANES:
        raise ValueError(f"apply_plane_denoiser needs a plane in {PLANES}, got {spec.plane!r}")
    cfg = spec.config
    stack = np.ascontiguousarray(plane_stack(vol.data, spec.plane))
    if threads > 1 and stack.shape[0] > 1:
        chunks = np.array_split(np.arange(stack.shape[0]), min(threads, stack.shape[0]))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: denoise_stack(stack[c], spec.sigma, cfg), chunks))
        out = np.concatenate(parts, axis=0)
    else:
        out = denoise_stack(stack, spec.sigma, cfg)
    inverse = np.argsort(_PLANE_AXES[spec.plane])
    return vol.like(np.ascontiguousarray(out.transpose(inverse)))


def apply_denoiser(vol: Volume, spec: DenoiserSpec, threads: int = 1) -> Volume:
    """Dispatch on ``spec.plane``: plane-sliced BM3D or whole-volume BM4D."""
    if spec.plane == "VOLUME":
        return bm4d_denoise_3d(vol, spec.sigma, spec.config)
    return apply_plane_denoiser(vol, spec, threads)


def with_sigma(spec: DenoiserSpec, sigma: float) -> DenoiserSpec:
    return replace(spec, sigma=sigma)
