"""Quantise, sort into 2D grids and pack as lossless PNGs.

Every attribute channel is quantised independently to ``bits`` (8 by default)
with its own min/max range. All channels share one permutation so that the
grid cell ``k`` of every image describes the same Gaussian. The permutation
starts from a Morton ordering of the positions and is refined by greedy
neighbour swaps that lower the summed attribute distance across grid edges.
Decoding recovers the quantised values exactly.
"""

from __future__ import annotations

import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image

from .errors import (
    ChannelCountMismatchError,
    CodeOutOfRangeError,
    CorruptPngError,
    NonFiniteInputError,
    VersionUnsupportedError,
)
from .splat_model import RawScene, morton_codes, quantize_positions, sh_rest_width

FORMAT_VERSION = 1
SORT_BITS = 10
PNG_COMPRESS_LEVEL = 9


def channel_names(sh_degree: int) -> list[str]:
    return (
        ["x", "y", "z", "opacity"]
        + [f"scale_{i}" for i in range(3)]
        + [f"rot_{i}" for i in range(4)]
        + [f"f_dc_{i}" for i in range(3)]
        + [f"f_rest_{i}" for i in range(sh_rest_width(sh_degree))]
    )


def channel_matrix(raw: RawScene) -> np.ndarray:
    """Stored-domain channels as columns ``[N, C]`` in package order."""
    return np.concatenate(
        [raw.position, raw.opacity_logit[:, None], raw.log_scale, raw.quat, raw.f_dc, raw.f_rest],
        axis=1,
    )


def grid_dims(n: int) -> tuple[int, int]:
    """Near-square (W, H) grid with W*H >= n."""
    w = math.isqrt(n - 1) + 1 if n > 0 else 1
    h = -(-n // w)
    return w, h


# Quantisation --------------------------------------------------------------

def quantize_channel(values: np.ndarray, bits: int = 8) -> tuple[np.ndarray, float, float]:
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must be in [1, 16], got {bits}")
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteInputError("cannot quantize non-finite values")
    vmin = float(values.min())
    vmax = float(values.max())
    if vmax == vmin:
        return np.zeros(values.shape, np.int64), vmin, vmax
    levels = (1 << bits) - 1
    t = (values - vmin) / (vmax - vmin) * levels
    # t >= 0, so floor(t + 0.5) is round-half-away-from-zero
    codes = np.floor(t + 0.5).astype(np.int64)
    return np.clip(codes, 0, levels), vmin, vmax


def dequantize_channel(codes: np.ndarray, vmin: float, vmax: float, bits: int = 8) -> np.ndarray:
    codes = np.asarray(codes)
    levels = (1 << bits) - 1
    if codes.size and (codes.min() < 0 or codes.max() > levels):
        raise CodeOutOfRangeError(f"codes must lie in [0, {levels}]")
    if vmin == vmax:
        return np.full(codes.shape, vmin, dtype=np.float64)
    return vmin + codes.astype(np.float64) * ((vmax - vmin) / levels)


# Sorting -------------------------------------------------------------------

def _normalize_columns(attributes: np.ndarray) -> np.ndarray:
    a = np.asarray(attributes, dtype=np.float64)
    lo = a.min(axis=0)
    span = a.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return np.ascontiguousarray((a - lo) / span)


@numba.njit(cache=True)
def _dist(feat, a, b):
    s = 0.0
    for j in range(feat.shape[1]):
        d = feat[a, j] - feat[b, j]
        s += d * d
    return math.sqrt(s)


@numba.njit(cache=True)
def _cell_cost(feat, order, n, w, h, cell, skip, row):
    # cost of edges between `row` placed at `cell` and its occupied neighbours, except `skip`
    r = cell // w
    c = cell - r * w
    total = 0.0
    if c > 0:
        nb = cell - 1
        if nb != skip:
            total += _dist(feat, row, order[nb])
    if c < w - 1 and cell + 1 < n:
        nb = cell + 1
        if nb != skip:
            total += _dist(feat, row, order[nb])
    if r > 0:
        nb = cell - w
        if nb != skip:
            total += _dist(feat, row, order[nb])
    if r < h - 1 and cell + w < n:
        nb = cell + w
        if nb != skip:
            total += _dist(feat, row, order[nb])
    return total


@numba.njit(cache=True)
def _grid_cost(feat, order, w):
    n = order.shape[0]
    total = 0.0
    for k in range(n):
        c = k % w
        if c < w - 1 and k + 1 < n:
            total += _dist(feat, order[k], order[k + 1])
        if k + w < n:
            total += _dist(feat, order[k], order[k + w])
    return total


@numba.njit(cache=True)
def _refine(feat, order, w, h, passes, costs):
    n = order.shape[0]
    costs[0] = _grid_cost(feat, order, w)
    for p in range(passes):
        for cell in range(n):
            c = cell % w
            for step in (1, w):
                other = cell + step
                if other >= n or (step == 1 and c == w - 1):
                    continue
                a = order[cell]
                b = order[other]
                before = _cell_cost(feat, order, n, w, h, cell, other, a) + _cell_cost(
                    feat, order, n, w, h, other, cell, b
                )
                after = _cell_cost(feat, order, n, w, h, cell, other, b) + _cell_cost(
                    feat, order, n, w, h, other, cell, a
                )
                if after < before - 1e-12 * (1.0 + before):
                    order[cell] = b
                    order[other] = a
        costs[p + 1] = _grid_cost(feat, order, w)


def grid_edge_cost(attributes: np.ndarray, order: np.ndarray, width: int | None = None) -> float:
    """Sum of L2 distances across horizontal and vertical edges of the row-major grid."""
    order = np.asarray(order, dtype=np.int64)
    feat = np.ascontiguousarray(attributes, dtype=np.float64)
    if feat.ndim == 1:
        feat = feat[:, None]
    w = width if width is not None else grid_dims(order.shape[0])[0]
    return float(_grid_cost(feat, order, w))


def refine_layout(
    attributes: np.ndarray, order: np.ndarray, refine_passes: int, width: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy raster-scan swap refinement of ``order`` (a grid layout of row ids).

    Attributes are used as given (no normalisation). Returns the new order and
    the grid edge cost before refinement and after every pass.
    """
    feat = np.ascontiguousarray(attributes, dtype=np.float64)
    if feat.ndim == 1:
        feat = feat[:, None]
    order = np.array(order, dtype=np.int64)
    n = order.shape[0]
    w, h = grid_dims(n)
    if width is not None:
        w, h = width, -(-n // width)
    costs = np.zeros(refine_passes + 1)
    _refine(feat, order, w, h, refine_passes, costs)
    return order, costs


def sort_for_coherence(
    attributes: np.ndarray,
    refine_passes: int = 2,
    positions: np.ndarray | None = None,
    return_costs: bool = False,
):
    """Permutation placing similar Gaussians next to each other on the grid.

    ``perm[k]`` is the original row stored at grid cell ``k``. Stage one orders
    rows by the Morton code of their positions (``positions`` or, by default,
    the first three attribute columns). Stage two runs ``refine_passes``
    greedy swap passes over the per-channel normalised attributes.
    """
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.ndim == 1:
        attributes = attributes[:, None]
    n = attributes.shape[0]
    feat = _normalize_columns(attributes)
    if positions is None and attributes.shape[1] >= 3:
        positions = attributes[:, :3]
    if positions is not None:
        codes = morton_codes(quantize_positions(np.asarray(positions, np.float64), SORT_BITS), SORT_BITS)
        order = np.argsort(codes, kind="stable")
    else:
        order = np.arange(n)
    order, costs = refine_layout(feat, order, refine_passes)
    if return_costs:
        return order, costs
    return order


# Package -------------------------------------------------------------------

@dataclass
class ChannelGrid:
    name: str
    codes: np.ndarray  # uint8 [H, W]
    vmin: float
    vmax: float


@dataclass
class SogsPackage:
    count: int
    grid_dims: tuple[int, int]
    sh_degree: int
    channels: list[ChannelGrid]
    bits: int = 8
    permutation: np.ndarray | None = None
    version: int = FORMAT_VERSION
    cost_history: list[float] = field(default_factory=list)

    def channel(self, name: str) -> ChannelGrid:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise KeyError(name)


def encode_png(codes: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(codes, dtype=np.uint8)).save(
        buf, format="PNG", compress_level=PNG_COMPRESS_LEVEL
    )
    return buf.getvalue()


def decode_png(data: bytes, name: str = "?") -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            if img.mode != "L":
                raise CorruptPngError(f"{name}: expected 8-bit grayscale PNG, got mode {img.mode}")
            return np.asarray(img, dtype=np.uint8).copy()
    except CorruptPngError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise CorruptPngError(f"{name}: {exc}") from exc


def _lay_out(codes: np.ndarray, w: int, h: int) -> np.ndarray:
    grid = np.empty(w * h, dtype=np.uint8)
    grid[: codes.shape[0]] = codes
    grid[codes.shape[0] :] = codes[-1]
    return grid.reshape(h, w)


def encode_scene(
    raw: RawScene,
    bits: int = 8,
    refine_passes: int = 2,
    store_permutation: bool = False,
) -> SogsPackage:
    if not 1 <= bits <= 8:
        raise ValueError("PNG packing supports 1..8 bits per channel")
    raw.check_finite()
    values = channel_matrix(raw).astype(np.float64)
    perm, costs = sort_for_coherence(values, refine_passes, positions=values[:, :3], return_costs=True)
    ordered = values[perm]
    w, h = grid_dims(raw.count)
    channels = []
    for j, name in enumerate(channel_names(raw.sh_degree)):
        codes, vmin, vmax = quantize_channel(ordered[:, j], bits)
        channels.append(ChannelGrid(name, _lay_out(codes, w, h), vmin, vmax))
    return SogsPackage(
        count=raw.count,
        grid_dims=(w, h),
        sh_degree=raw.sh_degree,
        channels=channels,
        bits=bits,
        permutation=perm if store_permutation else None,
        cost_history=[float(c) for c in costs],
    )


def decode_scene(pkg: SogsPackage) -> RawScene:
    if pkg.version != FORMAT_VERSION:
        raise VersionUnsupportedError(f"package version {pkg.version} is not supported")
    expected = channel_names(pkg.sh_degree)
    got = [c.name for c in pkg.channels]
    if got != expected:
        missing = [n for n in expected if n not in got]
        what = f"missing channel {missing[0]}" if missing else f"unexpected channels {got}"
        raise ChannelCountMismatchError(f"{what} (expected {len(expected)}, got {len(got)})")
    n = pkg.count
    cols = np.stack(
        [dequantize_channel(ch.codes.reshape(-1)[:n], ch.vmin, ch.vmax, pkg.bits) for ch in pkg.channels], axis=1
    )
    if pkg.permutation is not None:
        restored = np.empty_like(cols)
        restored[pkg.permutation] = cols
        cols = restored
    k = sh_rest_width(pkg.sh_degree)
    return RawScene(
        position=cols[:, 0:3],
        opacity_logit=cols[:, 3],
        log_scale=cols[:, 4:7],
        quat=cols[:, 7:11],
        f_dc=cols[:, 11:14],
        f_rest=cols[:, 14 : 14 + k],
        sh_degree=pkg.sh_degree,
    )


def quantized_reference(raw: RawScene, bits: int = 8) -> RawScene:
    """What an exact codec must return: every channel quantised then dequantised, original order."""
    values = channel_matrix(raw).astype(np.float64)
    cols = np.stack(
        [dequantize_channel(*quantize_channel(values[:, j], bits), bits=bits) for j in range(values.shape[1])],
        axis=1,
    )
    k = sh_rest_width(raw.sh_degree)
    return RawScene(
        position=cols[:, 0:3],
        opacity_logit=cols[:, 3],
        log_scale=cols[:, 4:7],
        quat=cols[:, 7:11],
        f_dc=cols[:, 11:14],
        f_rest=cols[:, 14 : 14 + k],
        sh_degree=raw.sh_degree,
    )


# On-disk layout --------------------------------------------------------------

def package_files(pkg: SogsPackage, threads: int | None = None) -> dict[str, bytes]:
    """Serialise to ``{filename: bytes}``; PNGs are encoded in parallel."""
    threads = threads or int(os.environ.get("F3DGS_THREADS", 0)) or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pngs = list(pool.map(lambda ch: encode_png(ch.codes), pkg.channels))
    files = {f"{ch.name}.png": data for ch, data in zip(pkg.channels, pngs)}
    meta = {
        "version": pkg.version,
        "count": pkg.count,
        "grid_dims": list(pkg.grid_dims),
        "sh_degree": pkg.sh_degree,
        "bits": pkg.bits,
        "permutation": pkg.permutation is not None,
        "channels": [
            {"name": ch.name, "vmin": ch.vmin, "vmax": ch.vmax, "file": f"{ch.name}.png"} for ch in pkg.channels
        ],
    }
    files["meta.json"] = (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode()
    if pkg.permutation is not None:
        files["perm.bin"] = np.asarray(pkg.permutation, dtype="<u4").tobytes()
    return files


def save_package(pkg: SogsPackage, directory, threads: int | None = None) -> int:
    """Write the package directory; returns the total number of bytes written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    total = 0
    for name, data in package_files(pkg, threads).items():
        (directory / name).write_bytes(data)
        total += len(data)
    return total


def load_package(directory) -> SogsPackage:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise VersionUnsupportedError(f"package version {meta.get('version')} is not supported")
    w, h = meta["grid_dims"]
    expected = channel_names(meta["sh_degree"])
    listed = [c["name"] for c in meta["channels"]]
    if listed != expected:
        missing = [n for n in expected if n not in listed]
        raise ChannelCountMismatchError(
            f"meta.json lists {len(listed)} channels, expected {len(expected)}"
            + (f"; missing {missing[0]}" if missing else "")
        )
    channels = []
    for c in meta["channels"]:
        path = directory / c["file"]
        if not path.exists():
            raise ChannelCountMismatchError(f"missing channel file for {c['name']}: {path.name}")
        codes = decode_png(path.read_bytes(), c["name"])
        if codes.shape != (h, w):
            raise CorruptPngError(f"{c['name']}: grid {codes.shape} does not match {(h, w)}")
        channels.append(ChannelGrid(c["name"], codes, float(c["vmin"]), float(c["vmax"])))
    perm = None
    if meta.get("permutation"):
        perm = np.frombuffer((directory / "perm.bin").read_bytes(), dtype="<u4").astype(np.int64)
        if perm.shape[0] != meta["count"]:
            raise CorruptPngError("perm.bin length does not match count")
    return SogsPackage(
        count=meta["count"],
        grid_dims=(w, h),
        sh_degree=meta["sh_degree"],
        channels=channels,
        bits=meta.get("bits", 8),
        permutation=perm,
        version=meta["version"],
    )


def compression_report(
    raw: RawScene, packed_bytes: int, per_channel_bytes: dict[str, int] | None = None, num_floats: int | None = None
) -> dict:
    """Size accounting against the uncompressed float32 PLY body.

    ``raw_bytes`` counts every float a canonical PLY stores per Gaussian
    (positions, normals, SH, opacity, scales, rotation) unless ``num_floats``
    overrides it.
    """
    if num_floats is None:
        num_floats = 3 + 3 + 3 + sh_rest_width(raw.sh_degree) + 1 + 3 + 4
    coded = len(channel_names(raw.sh_degree))
    raw_bytes = raw.count * num_floats * 4
    return {
        "raw_bytes": raw_bytes,
        "packed_bytes": packed_bytes,
        "ratio": raw_bytes / packed_bytes if packed_bytes else float("inf"),
        "code_ratio": (raw.count * coded * 4) / (raw.count * coded * 1),
        "per_channel_bytes": dict(per_channel_bytes or {}),
    }
