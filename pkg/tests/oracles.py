"""Independent reference computations used by the test-suite.

Everything here is written with plain loops or dense linear algebra and
shares no code with the package beyond its public data types.
"""

from __future__ import annotations

import math

import numpy as np


def ray_march_center(img: np.ndarray, angle: float, spacing: float, t: float = 0.0,
                     supersample: int = 10) -> float:
    """Line integral of a piecewise-constant (nearest voxel) image along one ray.

    The ray sits at detector coordinate ``t`` and travels along
    ``(-sin a, cos a)``; samples are ``spacing / (2 * supersample)`` apart.
    """
    ny, nx = img.shape
    step = spacing / (2.0 * supersample)
    reach = math.hypot(nx, ny) * spacing
    n = int(math.ceil(2 * reach / step))
    total = 0.0
    c, s = math.cos(angle), math.sin(angle)
    for k in range(n):
        u = -reach + (k + 0.5) * step
        px = t * c - u * s
        py = t * s + u * c
        ix = int(math.floor(px / spacing + nx / 2.0))
        iy = int(math.floor(py / spacing + ny / 2.0))
        if 0 <= ix < nx and 0 <= iy < ny:
            total += img[iy, ix]
    return total * step


def joseph_footprint(nx: int, ny: int, spacing: float, angle: float, t: float) -> dict:
    """Pixel weights of one ray under linear-interpolation sampling, step ``spacing / 2``.

    Returns ``{(iy, ix): weight}`` built one sample at a time.
    """
    step = spacing / 2.0
    radius = math.hypot(0.5 * nx * spacing, 0.5 * ny * spacing) + spacing
    n = int(math.ceil(2 * radius / step))
    c, s = math.cos(angle), math.sin(angle)
    out: dict = {}
    for k in range(n):
        u = -radius + (k + 0.5) * step
        fx = (t * c - u * s) / spacing + (nx - 1) / 2.0
        fy = (t * s + u * c) / spacing + (ny - 1) / 2.0
        x0, y0 = math.floor(fx), math.floor(fy)
        ax, ay = fx - x0, fy - y0
        for dy, wy in ((0, 1 - ay), (1, ay)):
            for dx, wx in ((0, 1 - ax), (1, ax)):
                iy, ix = y0 + dy, x0 + dx
                if 0 <= ix < nx and 0 <= iy < ny and wx * wy > 0:
                    out[(iy, ix)] = out.get((iy, ix), 0.0) + wx * wy * step
    return out


def dense_operator(apply, shape) -> np.ndarray:
    """Matrix of a linear map, one unit vector at a time."""
    n = int(np.prod(shape))
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(np.asarray(apply(e.reshape(shape))).ravel())
    return np.stack(cols, axis=1)


def dft_filter_row(row: np.ndarray, kernel: np.ndarray, n_pad: int) -> np.ndarray:
    """Zero-pad, multiply by the DFT of ``kernel`` with explicit DFT matrices, crop."""
    k = np.arange(n_pad)
    F = np.exp(-2j * np.pi * np.outer(k, k) / n_pad)
    padded = np.zeros(n_pad)
    padded[:len(row)] = row
    spec = (F @ padded) * (F @ kernel)
    back = (F.conj() @ spec) / n_pad
    return back.real[:len(row)]


def ramp_taps(n_pad: int, spacing: float) -> np.ndarray:
    """Circular spatial ramp filter written out tap by tap."""
    h = np.zeros(n_pad)
    for i in range(n_pad):
        n = i if i <= n_pad // 2 else i - n_pad
        if n == 0:
            h[i] = 1.0 / (4.0 * spacing ** 2)
        elif n % 2:
            h[i] = -1.0 / (math.pi * n * spacing) ** 2
    return h * spacing


def mrf_pairs(shape, neighborhood: int):
    """Yield ``(i, j, squared_distance)`` for every unordered neighbor pair, by brute force."""
    nz, ny, nx = shape
    coords = [(z, y, x) for z in range(nz) for y in range(ny) for x in range(nx)]
    index = {c: i for i, c in enumerate(coords)}
    limit = 1 if neighborhood == 6 else 3
    for c in coords:
        for dz in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    d2 = dz * dz + dy * dy + dx * dx
                    if d2 == 0 or d2 > limit:
                        continue
                    o = (c[0] + dz, c[1] + dy, c[2] + dx)
                    if o in index and index[o] > index[c]:
                        yield index[c], index[o], d2


def mrf_weights(neighborhood: int) -> dict:
    """Inverse-distance weights summing to one over a full neighborhood."""
    counts = {1: 6, 2: 12, 3: 8}
    classes = (1,) if neighborhood == 6 else (1, 2, 3)
    raw = {c: 1.0 / math.sqrt(c) for c in classes}
    total = sum(counts[c] * raw[c] for c in classes)
    return {c: raw[c] / total for c in classes}


def mrf_cost(x: np.ndarray, beta: float, neighborhood: int) -> float:
    w = mrf_weights(neighborhood)
    flat = x.ravel()
    return sum(0.5 * beta * w[d2] * (flat[i] - flat[j]) ** 2
               for i, j, d2 in mrf_pairs(x.shape, neighborhood))


def laplacian(shape, neighborhood: int) -> np.ndarray:
    w = mrf_weights(neighborhood)
    n = int(np.prod(shape))
    lap = np.zeros((n, n))
    for i, j, d2 in mrf_pairs(shape, neighborhood):
        lap[i, i] += w[d2]
        lap[j, j] += w[d2]
        lap[i, j] -= w[d2]
        lap[j, i] -= w[d2]
    return lap


def nrmse_loop(est, truth) -> float:
    num = den = 0.0
    for a, b in zip(np.ravel(est), np.ravel(truth)):
        num += (a - b) ** 2
        den += a * a
    return math.sqrt(num) / math.sqrt(den)


def psnr_loop(est, truth) -> float:
    sq = 0.0
    a, b = np.ravel(est), np.ravel(truth)
    for p, q in zip(a, b):
        sq += (p - q) ** 2
    return 20.0 * math.log10(max(b) / math.sqrt(sq / len(a)))


def ssim_loop(est, truth, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """SSIM from explicit window sums, two-pass moments, per XY slice."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    rng = float(truth.max() - truth.min()) or 1.0
    c1, c2 = (k1 * rng) ** 2, (k2 * rng) ** 2
    n = window * window
    per_slice = []
    for k in range(est.shape[0]):
        vals = []
        for i in range(est.shape[1] - window + 1):
            for j in range(est.shape[2] - window + 1):
                a = est[k, i:i + window, j:j + window].ravel().tolist()
                b = truth[k, i:i + window, j:j + window].ravel().tolist()
                ma = math.fsum(a) / n
                mb = math.fsum(b) / n
                va = math.fsum((p - ma) ** 2 for p in a) / n
                vb = math.fsum((q - mb) ** 2 for q in b) / n
                cab = math.fsum((p - ma) * (q - mb) for p, q in zip(a, b)) / n
                vals.append((2 * ma * mb + c1) * (2 * cab + c2)
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
        per_slice.append(math.fsum(vals) / len(vals))
    return math.fsum(per_slice) / len(per_slice)


def residuals_loop(x, z, z_prev, rho):
    """Primal and dual residuals by explicit element sums."""
    p = 0.0
    for zl in z:
        for a, b in zip(np.ravel(x), np.ravel(zl)):
            p += rho * (a - b) ** 2
    d = np.zeros(np.size(x))
    for zl, zp in zip(z, z_prev):
        d += rho * (np.ravel(zl) - np.ravel(zp))
    return math.sqrt(p), math.sqrt(sum(v * v for v in d))


def window_candidates(shape, ref, patch: int, radius: int) -> int:
    """Count in-bounds candidate patch corners within ``radius`` of ``ref``."""
    count = 0
    ranges = [range(r - radius, r + radius + 1) for r in ref]
    for pos in np.ndindex(*[len(r) for r in ranges]):
        corner = [ranges[a][pos[a]] for a in range(len(ref))]
        if all(0 <= c <= n - patch for c, n in zip(corner, shape)):
            count += 1
    return count
