"""Scene-level real/fake detector over Gaussian primitives.

Pipeline: linear embedding, windowed attention blocks over Z-order
serialisations, one grid-pool stage with its own blocks, unpool with a skip
connection, decoder blocks, per-scene mean pooling and a single-logit head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import NonFiniteActivationError, ShapeMismatchError
from ..splat_model import FeatureGroupMask
from . import layers
from .serialization import ORDER_CYCLE, Plan, build_plan


@dataclass
class DetectorConfig:
    width: int = 64
    heads: int = 4
    window: int = 64
    enc_blocks: int = 2
    pooled_blocks: int = 1
    dec_blocks: int = 1
    pool_prefix_bits: int = 6
    serial_bits: int = 10
    sh_degree: int = 3
    mask: FeatureGroupMask = field(default_factory=FeatureGroupMask)
    domain: str = "activated"
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_scenes: int = 8

    def __post_init__(self):
        if isinstance(self.mask, dict):
            self.mask = FeatureGroupMask(**self.mask)
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def in_features(self) -> int:
        return self.mask.width(self.sh_degree)

    def block_names(self) -> list[str]:
        return (
            [f"enc{i}" for i in range(self.enc_blocks)]
            + [f"pool{i}" for i in range(self.pooled_blocks)]
            + [f"dec{i}" for i in range(self.dec_blocks)]
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask"] = self.mask.to_dict()
        return d


@dataclass
class PackedBatch:
    """Scenes of varying size concatenated along the Gaussian axis."""

    features: np.ndarray
    positions: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        m = self.features.shape[0]
        if self.positions.shape != (m, 3):
            raise ShapeMismatchError(f"positions must be [{m}, 3], got {self.positions.shape}")
        if self.offsets[0] != 0 or self.offsets[-1] != m or np.any(np.diff(self.offsets) <= 0):
            raise ShapeMismatchError("offsets must start at 0, end at M and be strictly increasing")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n_scenes,):
                raise ShapeMismatchError("one label per scene required")

    @property
    def n_scenes(self) -> int:
        return self.offsets.shape[0] - 1

    @classmethod
    def pack(cls, features: list[np.ndarray], positions: list[np.ndarray], labels=None) -> PackedBatch:
        offsets = np.concatenate([[0], np.cumsum([f.shape[0] for f in features])])
        return cls(np.concatenate(features), np.concatenate(positions), offsets, labels)

    def scene(self, b: int) -> PackedBatch:
        lo, hi = self.offsets[b], self.offsets[b + 1]
        labels = None if self.labels is None else self.labels[b : b + 1]
        return PackedBatch(self.features[lo:hi], self.positions[lo:hi], np.array([0, hi - lo]), labels)


def _block_param_shapes(d: int) -> list[tuple[str, tuple]]:
    return [
        ("ln1.g", (d,)),
        ("ln1.b", (d,)),
        ("attn.wq", (d, d)),
        ("attn.wk", (d, d)),
        ("attn.wv", (d, d)),
        ("attn.wo", (d, d)),
        ("attn.bo", (d,)),
        ("ln2.g", (d,)),
        ("ln2.b", (d,)),
        ("ff.w1", (d, 4 * d)),
        ("ff.b1", (4 * d,)),
        ("ff.w2", (4 * d, d)),
        ("ff.b2", (d,)),
    ]


def param_shapes(config: DetectorConfig) -> list[tuple[str, tuple]]:
    """Parameter names and shapes in declaration order."""
    d = config.width
    shapes = [("embed.w", (config.in_features, d)), ("embed.b", (d,))]
    for blk in config.block_names():
        shapes += [(f"{blk}.{n}", s) for n, s in _block_param_shapes(d)]
    shapes += [("head.w", (d,)), ("head.b", (1,))]
    return shapes


def init_params(config: DetectorConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, unit layer-norm gains, zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else 1
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def zero_params(config: DetectorConfig) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(config)}


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _check(x, block):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivationError(block)


def make_plan(batch: PackedBatch, config: DetectorConfig) -> Plan:
    return build_plan(
        batch.features, batch.positions, batch.offsets, config.window, config.pool_prefix_bits, config.serial_bits
    )


def forward(batch: PackedBatch, params, config: DetectorConfig, plan: Plan | None = None, keep_cache=False):
    """One logit per scene. With ``keep_cache`` also returns the backward cache."""
    if batch.features.shape[1] != config.in_features:
        raise ShapeMismatchError(
            f"batch has {batch.features.shape[1]} feature columns, config expects {config.in_features}"
        )
    if plan is None:
        plan = make_plan(batch, config)
    caches = {}
    x = batch.features @ params["embed.w"] + params["embed.b"]
    order_i = 0

    def run(blocks, x, stage):
        nonlocal order_i
        for blk in blocks:
            windows = stage.windows[ORDER_CYCLE[order_i % 3]]
            order_i += 1
            x, caches[blk] = layers.block_forward(_sub(params, blk + "."), x, windows, config.heads)
            _check(x, blk)
        return x

    names = config.block_names()
    enc = names[: config.enc_blocks]
    pooled_names = names[config.enc_blocks : config.enc_blocks + config.pooled_blocks]
    dec = names[config.enc_blocks + config.pooled_blocks :]

    x_enc = run(enc, x, plan.fine)
    pool_mat = plan.gmap.mean_matrix()
    xp = run(pooled_names, pool_mat @ x_enc, plan.coarse)
    x_dec = run(dec, xp[plan.gmap.group] + x_enc, plan.fine)
    emb = layers.scene_mean_pool(x_dec, plan.offsets)
    logits = emb @ params["head.w"] + params["head.b"][0]
    _check(logits, "head")
    if not keep_cache:
        return logits
    return logits, {"plan": plan, "blocks": caches, "emb": emb, "features": batch.features, "pool_mat": pool_mat}


def backward(dlogits, params, config: DetectorConfig, cache) -> dict[str, np.ndarray]:
    plan = cache["plan"]
    grads = {}
    grads["head.w"] = cache["emb"].T @ dlogits
    grads["head.b"] = np.array([dlogits.sum()])
    demb = np.outer(dlogits, params["head.w"])
    dx = layers.scene_mean_pool_backward(demb, plan.offsets)

    names = config.block_names()
    enc = names[: config.enc_blocks]
    pooled_names = names[config.enc_blocks : config.enc_blocks + config.pooled_blocks]
    dec = names[config.enc_blocks + config.pooled_blocks :]

    def run_back(blocks, dx):
        for blk in reversed(blocks):
            dx, g = layers.block_backward(dx, _sub(params, blk + "."), cache["blocks"][blk])
            grads.update({f"{blk}.{k}": v for k, v in g.items()})
        return dx

    d_dec_in = run_back(dec, dx)
    d_xenc = d_dec_in.copy()
    d_xp = plan.gmap.sum_matrix() @ d_dec_in
    d_pool_in = run_back(pooled_names, d_xp)
    d_xenc += cache["pool_mat"].T @ d_pool_in
    d_x = run_back(enc, d_xenc)

    grads["embed.w"] = cache["features"].T @ d_x
    grads["embed.b"] = d_x.sum(axis=0)
    return {name: grads[name] for name, _ in param_shapes(config)}
