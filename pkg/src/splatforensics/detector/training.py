"""Loss, gradient check, Adam training loop, checkpoints and prediction."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import CheckpointError, MaskMismatchError, SingleClassTrainingSetError
from ..splat_model import GaussianScene, NormalizationSpec, assemble_features
from .network import DetectorConfig, PackedBatch, backward, forward, init_params, make_plan, param_shapes

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"F3DD"
CHECKPOINT_VERSION = 1


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits and its gradient."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    terms = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = math.fsum(terms) / z.shape[0]
    return loss, (sigmoid(z) - y) / z.shape[0]


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def loss_and_grad(params, batch: PackedBatch, config: DetectorConfig, plan=None):
    logits, cache = forward(batch, params, config, plan, keep_cache=True)
    loss, dlogits = bce_loss(logits, batch.labels)
    return loss, backward(dlogits, params, config, cache), logits


def grad_check(
    params,
    batch: PackedBatch,
    config: DetectorConfig,
    probes: int = 200,
    eps: float = 1e-4,
    seed: int = 0,
    corrupt: tuple[str, int] | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    Probes pick a parameter tensor uniformly, then an entry uniformly. The
    loss is evaluated in float64 with compensated summation. ``corrupt``
    doubles one analytic gradient entry (and forces it into the probe set)
    to check that the harness notices.
    """
    plan = make_plan(batch, config)
    _, grads, _ = loss_and_grad(params, batch, config, plan)
    rng = np.random.default_rng(seed)
    names = [n for n, _ in param_shapes(config)]
    picks = []
    for _ in range(probes):
        name = names[rng.integers(len(names))]
        picks.append((name, int(rng.integers(params[name].size))))
    if corrupt is not None:
        grads = {k: v.copy() for k, v in grads.items()}
        grads[corrupt[0]].reshape(-1)[corrupt[1]] *= 2.0
        picks[0] = corrupt

    worst = 0.0
    for name, flat in picks:
        p = params[name].reshape(-1)
        orig = p[flat]
        p[flat] = orig + eps
        up = bce_loss(forward(batch, params, config, plan), batch.labels)[0]
        p[flat] = orig - eps
        down = bce_loss(forward(batch, params, config, plan), batch.labels)[0]
        p[flat] = orig
        numeric = (up - down) / (2.0 * eps)
        analytic = grads[name].reshape(-1)[flat]
        err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: DetectorConfig
    norm: NormalizationSpec
    epoch: int = 0
    metrics: list[dict] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        meta = {
            "config": self.config.to_dict(),
            "norm": self.norm.to_dict(),
            "epoch": self.epoch,
            "metrics": self.metrics,
            "tensors": [[name, list(shape)] for name, shape in param_shapes(self.config)],
        }
        blob = json.dumps(meta, sort_keys=True).encode()
        body = b"".join(
            np.ascontiguousarray(self.params[name], dtype="<f4").tobytes() for name, _ in param_shapes(self.config)
        )
        return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob + body

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a detector checkpoint (bad magic)")
        version, n = struct.unpack("<II", data[4:12])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(data[12 : 12 + n])
        config = DetectorConfig(**meta["config"])
        offset = 12 + n
        params = {}
        for name, shape in param_shapes(config):
            count = int(np.prod(shape))
            chunk = data[offset : offset + 4 * count]
            if len(chunk) != 4 * count:
                raise CheckpointError(f"checkpoint truncated in tensor {name}")
            params[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
            offset += 4 * count
        return cls(params, config, NormalizationSpec.from_dict(meta["norm"]), meta["epoch"], meta["metrics"])

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def scene_features(scene: GaussianScene, config: DetectorConfig, norm: NormalizationSpec) -> np.ndarray:
    feats = assemble_features(scene, config.mask, norm)
    if feats.shape[1] != config.in_features:
        raise MaskMismatchError(
            f"scene yields {feats.shape[1]} features but the model expects {config.in_features} "
            f"(sh degree {scene.sh_degree} vs {config.sh_degree})"
        )
    return feats


def pack_scenes(scenes: Sequence[GaussianScene], config, norm, labels=None) -> PackedBatch:
    return PackedBatch.pack(
        [scene_features(s, config, norm) for s in scenes], [s.position for s in scenes], labels
    )


def train(
    scenes: Sequence[GaussianScene],
    labels: Sequence[int],
    config: DetectorConfig,
    norm: NormalizationSpec | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Adam on mean BCE over seeded shuffled mini-batches of whole scenes."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(scenes) == 0 or len(set(labels.tolist())) < 2:
        raise SingleClassTrainingSetError("training split must contain both real and fake scenes")
    if norm is None:
        norm = NormalizationSpec.fit(scenes, config.domain)
    feats = [scene_features(s, config, norm) for s in scenes]
    params = init_params(config)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(scenes))
        total, correct = 0.0, 0
        for start in range(0, len(order), config.batch_scenes):
            idx = order[start : start + config.batch_scenes]
            batch = PackedBatch.pack([feats[i] for i in idx], [scenes[i].position for i in idx], labels[idx])
            loss, grads, logits = loss_and_grad(params, batch, config)
            opt.step(params, grads)
            total += loss * len(idx)
            correct += int(((logits > 0).astype(np.int64) == batch.labels).sum())
        row = {"epoch": epoch, "loss": total / len(scenes), "accuracy": 100.0 * correct / len(scenes)}
        history.append(row)
        log.info("epoch %d loss %.4f acc %.1f", epoch, row["loss"], row["accuracy"])
        if on_epoch is not None:
            on_epoch(row)
    return Checkpoint(params, config, norm, config.epochs, history)


def predict_logits(checkpoint: Checkpoint, scenes: Sequence[GaussianScene], batch_scenes: int = 16) -> np.ndarray:
    out = []
    for start in range(0, len(scenes), batch_scenes):
        batch = pack_scenes(scenes[start : start + batch_scenes], checkpoint.config, checkpoint.norm)
        out.append(forward(batch, checkpoint.params, checkpoint.config))
    return np.concatenate(out) if out else np.zeros(0)


def predict(checkpoint: Checkpoint, scene: GaussianScene) -> dict:
    """Score in (0, 1); the label is "fake" only when the score is strictly above 0.5."""
    logit = float(predict_logits(checkpoint, [scene])[0])
    score = float(sigmoid(logit))
    return {"score": score, "logit": logit, "label": "fake" if score > 0.5 else "real"}
