"""In-memory 3DGS scene model.

Two views of the same scene are kept apart:

* :class:`RawScene` holds attributes exactly as they are stored in a PLY export
  (opacity logits, log-scales, unnormalised quaternions) as float32.
* :class:`GaussianScene` holds the activated values (opacity in [0, 1], positive
  scales, unit quaternions) as float64.

Feature assembly, Morton codes and per-channel statistics live here too since
every other module needs them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ActivationRangeError,
    EmptyMaskError,
    MissingNormStatsError,
    NonFiniteInputError,
    OutOfRangeError,
)

FEATURE_GROUPS = ("position", "opacity", "scale", "quaternion", "sh0", "sh_rest")
DEFAULT_SH_DEGREE = 3


def sh_rest_width(sh_degree: int) -> int:
    """Number of higher-order SH coefficients over all three colour channels."""
    return 3 * ((sh_degree + 1) ** 2 - 1)


def sh_degree_from_width(width: int) -> int | None:
    """Invert :func:`sh_rest_width`; ``None`` if ``width`` is not a valid layout."""
    if width < 0 or width % 3:
        return None
    per_channel = width // 3 + 1
    root = int(round(per_channel**0.5))
    if root * root != per_channel:
        return None
    return root - 1


@dataclass(frozen=True)
class ExtraProperty:
    """A PLY vertex property we do not interpret, kept for lossless re-emission."""

    name: str
    ply_type: str
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class RawScene:
    position: np.ndarray
    f_dc: np.ndarray
    f_rest: np.ndarray
    opacity_logit: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    sh_degree: int
    normal: np.ndarray | None = None
    extras: tuple[ExtraProperty, ...] = ()

    def __post_init__(self):
        n = np.asarray(self.position).shape[0]
        if n < 1:
            raise ValueError("a scene needs at least one Gaussian")
        if self.normal is None:
            object.__setattr__(self, "normal", np.zeros((n, 3), np.float32))
        expected = {
            "position": (n, 3),
            "normal": (n, 3),
            "f_dc": (n, 3),
            "f_rest": (n, sh_rest_width(self.sh_degree)),
            "opacity_logit": (n,),
            "log_scale": (n, 3),
            "quat": (n, 4),
        }
        for name, shape in expected.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return self.position.shape[0]

    def check_finite(self) -> None:
        for name in ("position", "normal", "f_dc", "f_rest", "opacity_logit", "log_scale", "quat"):
            arr = getattr(self, name)
            bad = ~np.isfinite(arr)
            if bad.any():
                idx = int(np.argwhere(bad)[0][0])
                raise NonFiniteInputError(f"non-finite value in {name} at Gaussian {idx}")

    def take(self, index: np.ndarray) -> RawScene:
        """Reorder or subset Gaussians."""
        return RawScene(
            position=self.position[index],
            normal=self.normal[index],
            f_dc=self.f_dc[index],
            f_rest=self.f_rest[index],
            opacity_logit=self.opacity_logit[index],
            log_scale=self.log_scale[index],
            quat=self.quat[index],
            sh_degree=self.sh_degree,
            extras=tuple(replace(e, values=e.values[index]) for e in self.extras),
        )

    def bitwise_equal(self, other: RawScene) -> bool:
        if self.sh_degree != other.sh_degree:
            return False
        for name in ("position", "normal", "f_dc", "f_rest", "opacity_logit", "log_scale", "quat"):
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        if len(self.extras) != len(other.extras):
            return False
        for ea, eb in zip(self.extras, other.extras):
            if (ea.name, ea.ply_type) != (eb.name, eb.ply_type) or ea.values.tobytes() != eb.values.tobytes():
                return False
        return True


@dataclass(frozen=True, eq=False)
class GaussianScene:
    position: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    quat_unit: np.ndarray
    sh0: np.ndarray
    sh_rest: np.ndarray
    sh_degree: int

    def __post_init__(self):
        n = np.asarray(self.position).shape[0]
        if n < 1:
            raise ValueError("a scene needs at least one Gaussian")
        expected = {
            "position": (n, 3),
            "opacity": (n,),
            "scale": (n, 3),
            "quat_unit": (n, 4),
            "sh0": (n, 3),
            "sh_rest": (n, sh_rest_width(self.sh_degree)),
        }
        for name, shape in expected.items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def count(self) -> int:
        return self.position.shape[0]

    def take(self, index: np.ndarray) -> GaussianScene:
        return GaussianScene(
            position=self.position[index],
            opacity=self.opacity[index],
            scale=self.scale[index],
            quat_unit=self.quat_unit[index],
            sh0=self.sh0[index],
            sh_rest=self.sh_rest[index],
            sh_degree=self.sh_degree,
        )

    def with_(self, **changes) -> GaussianScene:
        return replace(self, **changes)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(raw: RawScene) -> GaussianScene:
    raw.check_finite()
    logit = raw.opacity_logit.astype(np.float64)
    quat = raw.quat.astype(np.float64)
    norm = np.linalg.norm(quat, axis=1, keepdims=True)
    zero = norm[:, 0] == 0.0
    quat_unit = np.divide(quat, norm, out=np.zeros_like(quat), where=norm > 0)
    quat_unit[zero] = (1.0, 0.0, 0.0, 0.0)
    return GaussianScene(
        position=raw.position.astype(np.float64),
        opacity=_sigmoid(logit),
        scale=np.exp(raw.log_scale.astype(np.float64)),
        quat_unit=quat_unit,
        sh0=raw.f_dc.astype(np.float64),
        sh_rest=raw.f_rest.astype(np.float64),
        sh_degree=raw.sh_degree,
    )


def deactivate(scene: GaussianScene) -> RawScene:
    """Inverse of :func:`activate`. Opacity must lie strictly inside (0, 1)."""
    op = scene.opacity
    if np.any((op <= 0.0) | (op >= 1.0)):
        idx = int(np.argwhere((op <= 0.0) | (op >= 1.0))[0][0])
        raise ActivationRangeError(f"opacity {op[idx]!r} at Gaussian {idx} has no finite logit; clamp first")
    if np.any(scene.scale <= 0.0):
        raise ActivationRangeError("scale must be positive")
    return RawScene(
        position=scene.position,
        f_dc=scene.sh0,
        f_rest=scene.sh_rest,
        opacity_logit=np.log(op) - np.log1p(-op),
        log_scale=np.log(scene.scale),
        quat=scene.quat_unit,
        sh_degree=scene.sh_degree,
    )


@dataclass(frozen=True)
class FeatureGroupMask:
    include_position: bool = True
    include_opacity: bool = True
    include_scale: bool = True
    include_quaternion: bool = True
    include_sh0: bool = True
    include_sh_rest: bool = True

    def __post_init__(self):
        if not any(self.enabled_groups()):
            raise EmptyMaskError("at least one feature group must be enabled")

    def enabled_groups(self) -> list[str]:
        return [g for g in FEATURE_GROUPS if getattr(self, f"include_{g}")]

    def without(self, *groups: str) -> FeatureGroupMask:
        for g in groups:
            if g not in FEATURE_GROUPS:
                raise ValueError(f"unknown feature group {g!r}")
        return replace(self, **{f"include_{g}": False for g in groups})

    @classmethod
    def from_groups(cls, groups: Iterable[str]) -> FeatureGroupMask:
        groups = set(groups)
        unknown = groups - set(FEATURE_GROUPS)
        if unknown:
            raise ValueError(f"unknown feature groups {sorted(unknown)}")
        return cls(**{f"include_{g}": g in groups for g in FEATURE_GROUPS})

    def width(self, sh_degree: int = DEFAULT_SH_DEGREE) -> int:
        return sum(group_width(g, sh_degree) for g in self.enabled_groups())

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def group_width(group: str, sh_degree: int = DEFAULT_SH_DEGREE) -> int:
    return {
        "position": 3,
        "opacity": 1,
        "scale": 3,
        "quaternion": 4,
        "sh0": 3,
        "sh_rest": sh_rest_width(sh_degree),
    }[group]


@dataclass(frozen=True)
class NormalizationSpec:
    """Training-set statistics for groups that are standardised.

    Only the log-scale group needs statistics. ``domain`` selects whether
    opacity enters as activated probability or as the stored logit.
    """

    log_scale_mean: tuple[float, float, float] | None = None
    log_scale_std: tuple[float, float, float] | None = None
    domain: str = "activated"

    @classmethod
    def fit(cls, scenes: Sequence[GaussianScene], domain: str = "activated") -> NormalizationSpec:
        logs = np.concatenate([np.log(s.scale) for s in scenes], axis=0)
        std = logs.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(float(v) for v in logs.mean(axis=0)), tuple(float(v) for v in std), domain)

    def to_dict(self) -> dict:
        return {
            "log_scale_mean": list(self.log_scale_mean) if self.log_scale_mean is not None else None,
            "log_scale_std": list(self.log_scale_std) if self.log_scale_std is not None else None,
            "domain": self.domain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationSpec:
        mean = d.get("log_scale_mean")
        std = d.get("log_scale_std")
        return cls(
            tuple(mean) if mean is not None else None,
            tuple(std) if std is not None else None,
            d.get("domain", "activated"),
        )


def normalized_positions(position: np.ndarray) -> np.ndarray:
    """Centre on the bbox centre and divide by the largest bbox extent."""
    lo = position.min(axis=0)
    hi = position.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        extent = 1.0
    return (position - (lo + hi) / 2.0) / extent


def assemble_features(
    scene: GaussianScene,
    mask: FeatureGroupMask = FeatureGroupMask(),
    norm: NormalizationSpec | None = None,
) -> np.ndarray:
    """Per-Gaussian feature matrix ``[N, F]``.

    Groups appear in the fixed order position, opacity, scale, quaternion,
    sh0, sh_rest. Disabled groups are dropped from the output entirely.
    """
    groups = mask.enabled_groups()
    if not groups:
        raise EmptyMaskError("at least one feature group must be enabled")
    domain = norm.domain if norm is not None else "activated"
    cols = []
    for g in groups:
        if g == "position":
            cols.append(normalized_positions(scene.position))
        elif g == "opacity":
            op = scene.opacity
            if domain == "stored":
                op = np.clip(op, 1e-7, 1 - 1e-7)
                op = np.log(op) - np.log1p(-op)
            cols.append(op[:, None])
        elif g == "scale":
            if norm is None or norm.log_scale_mean is None or norm.log_scale_std is None:
                raise MissingNormStatsError("scale group needs log-scale mean/std from the training scenes")
            mean = np.asarray(norm.log_scale_mean)
            std = np.asarray(norm.log_scale_std)
            cols.append((np.log(scene.scale) - mean) / std)
        elif g == "quaternion":
            cols.append(scene.quat_unit)
        elif g == "sh0":
            cols.append(scene.sh0)
        else:
            cols.append(scene.sh_rest)
    return np.concatenate(cols, axis=1)


# Morton codes --------------------------------------------------------------

MAX_MORTON_BITS = 21


def morton_code(cell: Sequence[int], bits: int) -> int:
    """Interleave the bits of an (x, y, z) cell; x takes the lowest slot."""
    if not 0 <= bits <= MAX_MORTON_BITS:
        raise OutOfRangeError(f"bits must be in [0, {MAX_MORTON_BITS}], got {bits}")
    x, y, z = (int(c) for c in cell)
    for c in (x, y, z):
        if not 0 <= c < (1 << bits):
            raise OutOfRangeError(f"cell coordinate {c} outside [0, 2^{bits})")
    code = 0
    for i in range(bits):
        code |= ((x >> i) & 1) << (3 * i)
        code |= ((y >> i) & 1) << (3 * i + 1)
        code |= ((z >> i) & 1) << (3 * i + 2)
    return code


def _spread3(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_codes(cells: np.ndarray, bits: int) -> np.ndarray:
    """Vectorised :func:`morton_code` over ``cells[N, 3]``; returns int64."""
    cells = np.asarray(cells)
    if not 0 <= bits <= MAX_MORTON_BITS:
        raise OutOfRangeError(f"bits must be in [0, {MAX_MORTON_BITS}], got {bits}")
    if cells.size and (cells.min() < 0 or cells.max() >= (1 << bits)):
        raise OutOfRangeError(f"cell coordinates outside [0, 2^{bits})")
    code = _spread3(cells[:, 0]) | (_spread3(cells[:, 1]) << np.uint64(1)) | (_spread3(cells[:, 2]) << np.uint64(2))
    return code.astype(np.int64)


def quantize_positions(position: np.ndarray, bits: int) -> np.ndarray:
    """Map positions to integer cells of a 2^bits grid over their bbox."""
    lo = position.min(axis=0)
    extent = position.max(axis=0) - lo
    extent = np.where(extent > 0, extent, 1.0)
    t = (position - lo) / extent
    side = 1 << bits
    return np.clip(np.floor(t * side), 0, side - 1).astype(np.int64)


# Statistics ----------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray


@dataclass(frozen=True)
class SceneStats:
    count: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    groups: dict[str, ChannelStats] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "bbox_min": self.bbox_min.tolist(),
            "bbox_max": self.bbox_max.tolist(),
            "groups": {
                name: {k: getattr(s, k).tolist() for k in ("mean", "std", "min", "max")}
                for name, s in self.groups.items()
            },
        }


def scene_stats(scene: GaussianScene) -> SceneStats:
    arrays = {
        "position": scene.position,
        "opacity": scene.opacity[:, None],
        "scale": scene.scale,
        "quaternion": scene.quat_unit,
        "sh0": scene.sh0,
        "sh_rest": scene.sh_rest,
    }
    groups = {}
    for name, arr in arrays.items():
        if arr.shape[1] == 0:
            empty = np.zeros(0)
            groups[name] = ChannelStats(empty, empty, empty, empty)
            continue
        mean = arr.mean(axis=0)
        groups[name] = ChannelStats(
            mean=mean,
            std=np.sqrt(((arr - mean) ** 2).mean(axis=0)),
            min=arr.min(axis=0),
            max=arr.max(axis=0),
        )
    return SceneStats(
        count=scene.count,
        bbox_min=scene.position.min(axis=0),
        bbox_max=scene.position.max(axis=0),
        groups=groups,
    )
