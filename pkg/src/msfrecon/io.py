"""Raw float32 + JSON sidecar storage for volumes and sinograms, PNG slice export."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .geometry import Sinogram, Volume

_DTYPE = "<f4"


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".raw", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".raw"), path.with_name(path.name + ".json")


def _atomic_write_bytes(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_volume(path, vol: Volume):
    """Write ``vol`` as ``<path>.raw`` plus ``<path>.json``."""
    raw, meta = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_bytes(raw, np.ascontiguousarray(vol.data, dtype=_DTYPE).tobytes())
    info = {
        "kind": "volume",
        "dims": {"nx": vol.nx, "ny": vol.ny, "nz": vol.nz},
        "spacings": {"xy": vol.spacing_xy, "z": vol.spacing_z},
        "ordering": "z,y,x",
        "dtype": "float32-le",
    }
    _atomic_write_bytes(meta, json.dumps(info, indent=2).encode())
    return raw, meta


def write_sinogram(path, sino: Sinogram):
    raw, meta = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_bytes(raw, np.ascontiguousarray(sino.data, dtype=_DTYPE).tobytes())
    info = {
        "kind": "sinogram",
        "dims": {"n_views": sino.n_views, "n_slices": sino.n_slices, "n_channels": sino.n_channels},
        "spacings": {"channel": sino.channel_spacing, "slice": sino.slice_spacing},
        "angles": [float(a) for a in sino.angles],
        "ordering": "view,slice,channel",
        "dtype": "float32-le",
    }
    _atomic_write_bytes(meta, json.dumps(info, indent=2).encode())
    return raw, meta


def _load(path, kind):
    raw, meta = _paths(path)
    info = json.loads(meta.read_text())
    if info.get("kind") != kind:
        raise ValueError(f"{meta} describes a {info.get('kind')!r}, expected {kind!r}")
    if info.get("dtype") != "float32-le":
        raise ValueError(f"unsupported dtype {info.get('dtype')!r} in {meta}")
    data = np.fromfile(raw, dtype=_DTYPE).astype(np.float64)
    return info, data


def read_volume(path) -> Volume:
    info, data = _load(path, "volume")
    d = info["dims"]
    shape = (d["nz"], d["ny"], d["nx"])
    if data.size != np.prod(shape):
        raise ValueError(f"raw file holds {data.size} values, metadata expects {np.prod(shape)}")
    return Volume(data.reshape(shape), info["spacings"]["xy"], info["spacings"]["z"])


def read_sinogram(path) -> Sinogram:
    info, data = _load(path, "sinogram")
    d = info["dims"]
    shape = (d["n_views"], d["n_slices"], d["n_channels"])
    if data.size != np.prod(shape):
        raise ValueError(f"raw file holds {data.size} values, metadata expects {np.prod(shape)}")
    return Sinogram(data.reshape(shape), info["angles"], info["spacings"]["channel"],
                    info["spacings"]["slice"])


def export_slices_png(directory, vol: Volume, window: tuple[float, float] = (0.0, 1.0),
                      prefix: str = "slice"):
    """Write each XY slice as a 16-bit grayscale PNG.

    Densities are mapped linearly so that ``window[0]`` becomes 0 and
    ``window[1]`` becomes 65535; values outside the window are clipped.
    """
    from PIL import Image

    lo, hi = window
    if hi <= lo:
        raise ValueError("window upper bound must exceed lower bound")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    scaled = np.clip((vol.data - lo) / (hi - lo), 0.0, 1.0)
    levels = np.round(scaled * 65535).astype(np.uint16)
    for k in range(vol.nz):
        p = directory / f"{prefix}_{k:03d}.png"
        Image.fromarray(levels[k]).save(p)
        paths.append(p)
    return paths
