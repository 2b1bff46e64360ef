"""Synthetic test volumes."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .geometry import Volume

PHANTOM_KINDS = ("shepp3d", "ellipsoids", "constant")


class Ellipsoid(NamedTuple):
    value: float
    a: float
    b: float
    c: float
    x0: float
    y0: float
    z0: float
    phi: float = 0.0    # degrees, ZXZ Euler angles
    theta: float = 0.0
    psi: float = 0.0


# Modified (Toft contrast) 3D Shepp-Logan set, Schabel's ellipsoid extension.
SHEPP_LOGAN_3D = (
    Ellipsoid(1.0, 0.6900, 0.920, 0.810, 0.00, 0.0000, 0.00),
    Ellipsoid(-0.8, 0.6624, 0.874, 0.780, 0.00, -0.0184, 0.00),
    Ellipsoid(-0.2, 0.1100, 0.310, 0.220, 0.22, 0.0000, 0.00, -18.0, 0.0, 10.0),
    Ellipsoid(-0.2, 0.1600, 0.410, 0.280, -0.22, 0.0000, 0.00, 18.0, 0.0, 10.0),
    Ellipsoid(0.1, 0.2100, 0.250, 0.410, 0.00, 0.3500, -0.15),
    Ellipsoid(0.1, 0.0460, 0.046, 0.050, 0.00, 0.1000, 0.25),
    Ellipsoid(0.1, 0.0460, 0.046, 0.050, 0.00, -0.1000, 0.25),
    Ellipsoid(0.1, 0.0460, 0.023, 0.050, -0.08, -0.6050, 0.00),
    Ellipsoid(0.1, 0.0230, 0.023, 0.200, 0.00, -0.6060, 0.00),
    Ellipsoid(0.1, 0.0230, 0.046, 0.200, 0.06, -0.6050, 0.00),
)


def euler_matrix(phi: float, theta: float, psi: float) -> np.ndarray:
    """ZXZ rotation (degrees) applied to coordinates before the ellipsoid test."""
    p, t, s = np.radians([phi, theta, psi])
    c1, s1 = np.cos(p), np.sin(p)
    c2, s2 = np.cos(t), np.sin(t)
    c3, s3 = np.cos(s), np.sin(s)
    return np.array([
        [c3 * c1 - c2 * s1 * s3, c3 * s1 + c2 * c1 * s3, s3 * s2],
        [-s3 * c1 - c2 * s1 * c3, -s3 * s1 + c2 * c1 * c3, c3 * s2],
        [s2 * s1, -s2 * c1, c2],
    ])


def normalized_coords(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel-center coordinates; the larger in-plane axis spans [-1, 1], voxels are cubic."""
    nz, ny, nx = shape
    scale = 2.0 / max(nx, ny)
    z = (np.arange(nz) - (nz - 1) / 2.0) * scale
    y = (np.arange(ny) - (ny - 1) / 2.0) * scale
    x = (np.arange(nx) - (nx - 1) / 2.0) * scale
    return np.meshgrid(z, y, x, indexing="ij")


def render_ellipsoids(ellipsoids, shape: tuple[int, int, int]) -> np.ndarray:
    """Sum of uniform ellipsoid indicators on the voxel centers of ``shape``."""
    z, y, x = normalized_coords(shape)
    coords = np.stack([x.ravel(), y.ravel(), z.ravel()])
    out = np.zeros(coords.shape[1])
    for e in ellipsoids:
        rot = euler_matrix(e.phi, e.theta, e.psi) @ coords
        q = (((rot[0] - e.x0) / e.a) ** 2 + ((rot[1] - e.y0) / e.b) ** 2
             + ((rot[2] - e.z0) / e.c) ** 2)
        out[q <= 1.0] += e.value
    return out.reshape(shape)


def _smooth_ellipsoids(shape, rng) -> np.ndarray:
    z, y, x = normalized_coords(shape)

    def blob(value, a, b, c, x0, y0, z0, angle, width=0.25):
        ca, sa = np.cos(angle), np.sin(angle)
        u = (x - x0) * ca + (y - y0) * sa
        v = -(x - x0) * sa + (y - y0) * ca
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2 + ((z - z0) / c) ** 2)
        # C1 edge: 1 inside, cosine taper from r = 1 - width to r = 1
        t = np.clip((1.0 - r) / width, 0.0, 1.0)
        return value * (0.5 - 0.5 * np.cos(np.pi * t))

    vol = blob(0.6, 0.8, 0.9, 3.0, 0.0, 0.0, 0.0, 0.0, width=0.2)
    for _ in range(6):
        vol += blob(
            rng.uniform(-0.25, 0.35),
            rng.uniform(0.12, 0.3), rng.uniform(0.12, 0.3), rng.uniform(0.5, 3.0),
            rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.2, 0.2),
            rng.uniform(0, np.pi), width=0.6,
        )
    return np.clip(vol, 0.0, 1.0)


def generate_phantom(kind: str, dims: tuple[int, int, int], seed: int = 0,
                     value: float = 0.0, spacing_xy: float = 1.0,
                     spacing_z: float = 1.0) -> Volume:
    """Build a test volume of shape ``dims = (nz, ny, nx)``.

    ``shepp3d`` is the 3D modified Shepp-Logan set on cubic voxels (the slab
    is thin when ``nz`` is small).  ``ellipsoids`` draws smooth-edged random
    blobs inside a body from ``seed``.  ``constant`` fills with ``value``.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    if kind == "shepp3d":
        data = render_ellipsoids(SHEPP_LOGAN_3D, dims)
        data = np.clip(data, 0.0, 1.0)
    elif kind == "ellipsoids":
        data = _smooth_ellipsoids(dims, np.random.default_rng(seed))
    elif kind == "constant":
        data = np.full(dims, float(value))
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    return Volume(data, spacing_xy, spacing_z)
