"""Space-filling-curve ordering, attention windows and grid pooling plans.

All of these depend only on Gaussian positions (plus the input features as a
content tie-break), never on learnable parameters, so a :class:`Plan` is built
once per batch and reused for forward and backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ..errors import GroupMapMismatchError
from ..splat_model import morton_codes, quantize_positions

AXIS_ORDERS = {"xyz": (0, 1, 2), "yzx": (1, 2, 0), "zxy": (2, 0, 1)}
ORDER_CYCLE = ("xyz", "yzx", "zxy")


def serialize_scene(
    positions: np.ndarray,
    axis_order: str = "xyz",
    bits: int = 10,
    tiebreak: np.ndarray | None = None,
) -> np.ndarray:
    """Return the permutation that sorts one scene's Gaussians along a Z-order curve.

    Ties within a curve cell are broken by raw position and then by the rows
    of ``tiebreak`` (lexicographically), so the serialised sequence depends on
    content only. Remaining ties keep input order.
    """
    positions = np.asarray(positions, dtype=np.float64)
    cells = quantize_positions(positions, bits)[:, AXIS_ORDERS[axis_order]]
    codes = morton_codes(cells, bits)
    keys = [positions[:, j] for j in AXIS_ORDERS[axis_order]]
    if tiebreak is not None:
        keys += list(np.asarray(tiebreak, dtype=np.float64).T)
    # np.lexsort: last key is primary
    return np.lexsort(tuple(reversed(keys)) + (codes,))


def window_index(order: np.ndarray, window: int, offset: int = 0) -> np.ndarray:
    """Chop a serialised order into consecutive windows; pads are -1."""
    n = order.shape[0]
    nw = -(-n // window)
    idx = np.full(nw * window, -1, dtype=np.int64)
    idx[:n] = order + offset
    return idx.reshape(nw, window)


@dataclass
class GroupMap:
    """Membership of Gaussians in pooled cells."""

    group: np.ndarray  # [M] pooled row id per Gaussian
    counts: np.ndarray  # [G]
    offsets: np.ndarray  # [B+1] pooled-row offsets per scene

    @property
    def n_groups(self) -> int:
        return self.counts.shape[0]

    def mean_matrix(self) -> sparse.csr_matrix:
        m = self.group.shape[0]
        w = 1.0 / self.counts[self.group]
        return sparse.csr_matrix((w, (self.group, np.arange(m))), shape=(self.n_groups, m))

    def sum_matrix(self) -> sparse.csr_matrix:
        m = self.group.shape[0]
        return sparse.csr_matrix((np.ones(m), (self.group, np.arange(m))), shape=(self.n_groups, m))


def pool_groups(positions: np.ndarray, offsets: np.ndarray, prefix_bits: int, bits: int = 10) -> GroupMap:
    """Group each scene's Gaussians by the top ``3 * prefix_bits`` bits of their Morton code."""
    prefix_bits = min(prefix_bits, bits)
    group = np.empty(positions.shape[0], dtype=np.int64)
    counts = []
    pooled_offsets = [0]
    for b in range(len(offsets) - 1):
        lo, hi = offsets[b], offsets[b + 1]
        codes = morton_codes(quantize_positions(positions[lo:hi], bits), bits)
        keys = codes >> (3 * (bits - prefix_bits))
        uniq, inv, cnt = np.unique(keys, return_inverse=True, return_counts=True)
        group[lo:hi] = inv.reshape(-1) + pooled_offsets[-1]
        counts.append(cnt)
        pooled_offsets.append(pooled_offsets[-1] + uniq.shape[0])
    return GroupMap(group, np.concatenate(counts).astype(np.float64), np.asarray(pooled_offsets, dtype=np.int64))


def grid_pool(features: np.ndarray, positions: np.ndarray, prefix_bits: int, offsets=None, bits: int = 10):
    """Mean-pool features and positions over Morton-prefix cells.

    Returns ``(pooled_features, pooled_positions, group_map)``.
    """
    if offsets is None:
        offsets = np.array([0, features.shape[0]])
    gmap = pool_groups(positions, np.asarray(offsets), prefix_bits, bits)
    mean = gmap.mean_matrix()
    return mean @ features, mean @ positions, gmap


def grid_unpool(pooled: np.ndarray, gmap: GroupMap, skip: np.ndarray) -> np.ndarray:
    """Broadcast each group's pooled row back to its members and add the skip features."""
    if pooled.shape[0] != gmap.n_groups or skip.shape[0] != gmap.group.shape[0]:
        raise GroupMapMismatchError(
            f"group map has {gmap.n_groups} groups over {gmap.group.shape[0]} rows; "
            f"got {pooled.shape[0]} pooled rows and {skip.shape[0]} skip rows"
        )
    return pooled[gmap.group] + skip


@dataclass
class StageWindows:
    """Windows for every axis order at one resolution level."""

    windows: dict[str, np.ndarray]  # axis order -> [nW, K] global row ids, -1 padded


def stage_windows(positions, features, offsets, window: int, bits: int) -> StageWindows:
    out = {}
    for name in ORDER_CYCLE:
        parts = []
        for b in range(len(offsets) - 1):
            lo, hi = offsets[b], offsets[b + 1]
            order = serialize_scene(positions[lo:hi], name, bits, tiebreak=features[lo:hi])
            parts.append(window_index(order, window, lo))
        out[name] = np.concatenate(parts, axis=0)
    return StageWindows(out)


@dataclass
class Plan:
    """Everything about a batch that does not depend on parameters."""

    offsets: np.ndarray
    fine: StageWindows
    coarse: StageWindows
    gmap: GroupMap
    pooled_positions: np.ndarray


def build_plan(features, positions, offsets, window: int, prefix_bits: int, bits: int) -> Plan:
    offsets = np.asarray(offsets, dtype=np.int64)
    fine = stage_windows(positions, features, offsets, window, bits)
    gmap = pool_groups(positions, offsets, prefix_bits, bits)
    mean = gmap.mean_matrix()
    pooled_positions = mean @ positions
    pooled_features = mean @ features
    coarse = stage_windows(pooled_positions, pooled_features, gmap.offsets, window, bits)
    return Plan(offsets, fine, coarse, gmap, pooled_positions)
