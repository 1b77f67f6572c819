"""Train/test split protocols, accuracy metrics, report rendering and the
feature-group ablation runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset_builder import SceneRecord
from .errors import EmptyManifestError, MissingPredictionError, NoFakesForEditorError
from .splat_model import GaussianScene, activate

log = logging.getLogger(__name__)

EDITOR_CODES = {"G": "gaussctrl", "I": "igs2gs", "S": "synthetic"}
EDITOR_LABELS = {"gaussctrl": "GaussCtrl", "igs2gs": "Instruct-GS2GS", "synthetic": "Synthetic"}
ABLATION_GROUPS = ("opacity", "scale", "quaternion", "sh0", "sh_rest")


@dataclass(frozen=True)
class SplitProtocol:
    kind: str = "mixed"
    train_editor: str | None = None
    test_editor: str | None = None
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mixed", "cross_edit"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.kind == "cross_edit":
            if not self.train_editor or not self.test_editor:
                raise ValueError("cross-edit splits need a train and a test editor")
            if self.train_editor == self.test_editor:
                raise ValueError("cross-edit splits need two different editors")

    @classmethod
    def parse(cls, text: str, seed: int = 0, train_fraction: float = 0.8) -> SplitProtocol:
        """``mixed`` or ``cross:G2I`` style (G=gaussctrl, I=igs2gs, S=synthetic)."""
        if text == "mixed":
            return cls("mixed", seed=seed, train_fraction=train_fraction)
        if text.startswith("cross:"):
            code = text[len("cross:") :]
            if len(code) == 3 and code[1] == "2" and code[0] in EDITOR_CODES and code[2] in EDITOR_CODES:
                return cls("cross_edit", EDITOR_CODES[code[0]], EDITOR_CODES[code[2]], train_fraction, seed)
        raise ValueError(f"bad protocol {text!r}; expected mixed or cross:<X>2<Y> with X,Y in G,I,S")

    def describe(self) -> tuple[str, str]:
        """(train editors, test editors) as shown in reports."""
        if self.kind == "mixed":
            return "all", "all"
        return EDITOR_LABELS[self.train_editor], EDITOR_LABELS[self.test_editor]


@dataclass
class Split:
    train: list[SceneRecord]
    test: list[SceneRecord]
    dropped: int = 0


def _n_train(n: int, fraction: float) -> int:
    return int(math.floor(fraction * n + 0.5))


def make_split(records: Sequence[SceneRecord], protocol: SplitProtocol) -> Split:
    """Edit-level split: records of the same source scene may land on both sides."""
    if not records:
        raise EmptyManifestError("manifest has no records")
    rng = np.random.default_rng(protocol.seed)
    if protocol.kind == "mixed":
        perm = rng.permutation(len(records))
        k = _n_train(len(records), protocol.train_fraction)
        return Split([records[i] for i in perm[:k]], [records[i] for i in perm[k:]])

    reals = [r for r in records if not r.is_fake]
    perm = rng.permutation(len(reals))
    k = _n_train(len(reals), protocol.train_fraction)
    train = [reals[i] for i in perm[:k]]
    test = [reals[i] for i in perm[k:]]
    train_fakes = [r for r in records if r.is_fake and r.editor == protocol.train_editor]
    test_fakes = [r for r in records if r.is_fake and r.editor == protocol.test_editor]
    for editor, fakes in ((protocol.train_editor, train_fakes), (protocol.test_editor, test_fakes)):
        if not fakes:
            raise NoFakesForEditorError(f"no fake records edited with {editor}")
    dropped = sum(1 for r in records if r.is_fake) - len(train_fakes) - len(test_fakes)
    if dropped:
        log.warning("dropped %d fake records from editors outside the cross-edit pair", dropped)
    return Split(train + train_fakes, test + test_fakes, dropped)


@dataclass(frozen=True)
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @staticmethod
    def _pct(num, den) -> float:
        return 100.0 * num / den if den else float("nan")

    @property
    def overall_acc(self) -> float:
        return self._pct(self.tp + self.tn, self.total)

    @property
    def fake_acc(self) -> float:
        return self._pct(self.tp, self.tp + self.fn)

    @property
    def real_acc(self) -> float:
        return self._pct(self.tn, self.tn + self.fp)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "tn": self.tn,
            "fp": self.fp,
            "fn": self.fn,
            "overall": self.overall_acc,
            "fake": self.fake_acc,
            "real": self.real_acc,
        }


def _is_fake(label) -> bool:
    if isinstance(label, str):
        return label == "fake"
    return bool(int(label))


def evaluate(predictions: Mapping[str, object], truth: Sequence[SceneRecord]) -> Metrics:
    """Count outcomes with "fake" as the positive class.

    ``predictions`` maps record id to ``"fake"``/``"real"`` or 1/0.
    """
    missing = [r.id for r in truth if r.id not in predictions]
    if missing:
        raise MissingPredictionError(missing)
    tp = tn = fp = fn = 0
    for r in truth:
        pred = _is_fake(predictions[r.id])
        if r.is_fake:
            tp += pred
            fn += not pred
        else:
            fp += pred
            tn += not pred
    return Metrics(tp, tn, fp, fn)


@dataclass
class ReportRow:
    train: str
    test: str
    metrics: Metrics
    name: str = "detector"


def _fmt(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:.1f}"


def render_report(rows: Sequence[ReportRow], fmt: str = "table") -> str:
    if not rows:
        raise ValueError("nothing to render")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "train", "test", "overall", "fake", "real"])
        for r in rows:
            m = r.metrics
            w.writerow([r.name, r.train, r.test, _fmt(m.overall_acc), _fmt(m.fake_acc), _fmt(m.real_acc)])
        return buf.getvalue()
    if fmt == "json-lines":
        return "".join(
            json.dumps({"name": r.name, "train": r.train, "test": r.test, **r.metrics.to_dict()}, sort_keys=True) + "\n"
            for r in rows
        )
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    header = ["Backbone", "Train", "Test", "Overall", "Fake", "Real"]
    body = [
        [r.name, r.train, r.test, _fmt(r.metrics.overall_acc), _fmt(r.metrics.fake_acc), _fmt(r.metrics.real_acc)]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = [
        "  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
        for row in [header] + body
    ]
    rule = "-" * len(lines[0])
    top = " " * (sum(widths[:3]) + 6) + "Accuracy (%)".center(sum(widths[3:]) + 4)
    return "\n".join([top.rstrip(), lines[0], rule] + lines[1:]) + "\n"


# Scene loading ---------------------------------------------------------------

def load_scene(path) -> GaussianScene:
    """Load a PLY file or a packed grid directory and activate it."""
    from .ply_io import read_ply
    from .sogs_codec import decode_scene, load_package

    path = Path(path)
    if path.is_dir():
        return activate(decode_scene(load_package(path)))
    return activate(read_ply(path))


def scene_loader(root) -> Callable[[SceneRecord], GaussianScene]:
    root = Path(root)
    cache: dict[str, GaussianScene] = {}

    def load(record: SceneRecord) -> GaussianScene:
        if record.id not in cache:
            cache[record.id] = load_scene(root / record.asset_path)
        return cache[record.id]

    return load


# Ablation --------------------------------------------------------------------

@dataclass
class AblationRow:
    removed: str
    width: int
    metrics: Metrics
    delta_overall: float
    delta_fake: float
    delta_real: float


@dataclass
class AblationResult:
    rows: list[AblationRow]
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["removed", "width", "overall", "fake", "real", "delta_overall", "delta_fake", "delta_real", "config"])
        cfg = json.dumps(self.config, sort_keys=True)
        for r in self.rows:
            m = r.metrics
            w.writerow(
                [
                    r.removed,
                    r.width,
                    f"{m.overall_acc:.4f}",
                    f"{m.fake_acc:.4f}",
                    f"{m.real_acc:.4f}",
                    f"{r.delta_overall:.4f}",
                    f"{r.delta_fake:.4f}",
                    f"{r.delta_real:.4f}",
                    cfg,
                ]
            )
        return buf.getvalue()

    def largest_drop(self) -> str:
        ablated = [r for r in self.rows if r.removed != "none"]
        return min(ablated, key=lambda r: r.delta_overall).removed


def train_and_evaluate(split: Split, load: Callable[[SceneRecord], GaussianScene], config) -> tuple[Metrics, object]:
    from .detector.training import predict_logits, train

    scenes = [load(r) for r in split.train]
    labels = [int(r.is_fake) for r in split.train]
    ckpt = train(scenes, labels, config)
    logits = predict_logits(ckpt, [load(r) for r in split.test])
    preds = {r.id: int(z > 0) for r, z in zip(split.test, logits)}
    return evaluate(preds, split.test), ckpt


def run_ablation(
    split: Split,
    load: Callable[[SceneRecord], GaussianScene],
    base_config,
    groups: Sequence[str] = ABLATION_GROUPS,
    protocol: SplitProtocol | None = None,
) -> AblationResult:
    """Train the full-feature model, then one model per removed group, on the same split and seed."""
    for g in groups:
        if g not in ABLATION_GROUPS:
            raise ValueError(f"cannot ablate group {g!r}; choose from {', '.join(ABLATION_GROUPS)}")
    base_mask = base_config.mask
    full, _ = train_and_evaluate(split, load, base_config)
    rows = [AblationRow("none", base_config.in_features, full, 0.0, 0.0, 0.0)]
    for g in groups:
        cfg = replace(base_config, mask=base_mask.without(g))
        m, _ = train_and_evaluate(split, load, cfg)
        log.info("without %s: overall %.1f", g, m.overall_acc)
        rows.append(
            AblationRow(
                g,
                cfg.in_features,
                m,
                m.overall_acc - full.overall_acc,
                m.fake_acc - full.fake_acc,
                m.real_acc - full.real_acc,
            )
        )
    echo = {"seed": base_config.seed, "epochs": base_config.epochs, "width": base_config.width}
    if protocol is not None:
        echo["protocol"] = protocol.kind if protocol.kind == "mixed" else f"{protocol.train_editor}->{protocol.test_editor}"
        echo["split_seed"] = protocol.seed
    return AblationResult(rows, echo)
