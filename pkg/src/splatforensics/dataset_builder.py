"""Manifest construction: category balancing, edit prompts, edit-type
assignment, a synthetic edit simulator and JSONL manifest persistence.

The synthetic edits are deterministic stand-ins for real diffusion-based
3DGS editors. They are meant for desk-scale experiments and tests, not as a
model of what those editors do.
"""

from __future__ import annotations

import json
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagnitudeError,
    DuplicateIdError,
    EmptyCaptionError,
    EmptyInputError,
    ManifestParseError,
)
from .splat_model import GaussianScene, sh_rest_width

LABELS = ("real", "fake")
EDITORS = ("none", "gaussctrl", "igs2gs", "synthetic")
EDIT_FAMILIES = ("material_type", "background_surface", "color")

# Prompt templates used to ask a text model for an edited caption. Kept
# byte-exact; the template number is the position in this tuple plus one.
PROMPT_TEMPLATES = (
    "Modify the following sentence by changing the material or the type of the main object, "
    "but do not change the color, the background, or the shape.",
    "Modify the following sentence by changing the background or surface on which the main object stands, "
    "but do not change the color, the shape, or any attribute of the main object.",
    "Modify the following sentence by changing the color of the main object, "
    "but do not change the shape or any other attribute of the main object.",
)
PROMPT_SUFFIX = "The output should be a single caption without any additional explanation or text."
TEMPLATE_FAMILY = {1: "material_type", 2: "background_surface", 3: "color"}
FAMILY_TEMPLATE = {v: k for k, v in TEMPLATE_FAMILY.items()}


@dataclass
class SceneRecord:
    id: str
    category: str
    label: str = "real"
    editor: str = "none"
    edit_family: str = "none"
    caption: str = ""
    edited_caption: str | None = None
    asset_path: str = ""
    source_id: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"{self.id}: label must be one of {LABELS}")
        if self.editor not in EDITORS:
            raise ValueError(f"{self.id}: unknown editor {self.editor!r}")
        if self.edit_family not in EDIT_FAMILIES + ("none",):
            raise ValueError(f"{self.id}: unknown edit family {self.edit_family!r}")
        real = self.label == "real"
        if real != (self.editor == "none") or real != (self.edit_family == "none"):
            raise ValueError(f"{self.id}: real records have editor=none and edit_family=none, fakes have neither")
        if not real and not self.edited_caption:
            raise ValueError(f"{self.id}: fake records need an edited caption")

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"


@dataclass
class Manifest:
    records: list[SceneRecord] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        seen = set()
        for i, r in enumerate(self.records):
            if r.id in seen:
                raise DuplicateIdError(r.id, i + 1)
            seen.add(r.id)

    def by_id(self) -> dict[str, SceneRecord]:
        return {r.id: r for r in self.records}


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            f.write(json.dumps({**asdict(r), "seed": manifest.seed}, ensure_ascii=False, sort_keys=True) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records: list[SceneRecord] = []
    seen: set[str] = set()
    seed = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(lineno, str(exc)) from exc
            if not isinstance(obj, dict):
                raise ManifestParseError(lineno, "expected a JSON object")
            seed = int(obj.pop("seed", seed))
            try:
                record = SceneRecord(**obj)
            except (TypeError, ValueError) as exc:
                raise ManifestParseError(lineno, str(exc)) from exc
            if record.id in seen:
                raise DuplicateIdError(record.id, lineno)
            seen.add(record.id)
            records.append(record)
    return Manifest(records, seed)


def derive_seed(seed: int, key: str) -> int:
    """Per-item seed that is stable across runs and processes."""
    return (seed ^ zlib.crc32(key.encode())) & 0xFFFFFFFF


# Category balancing --------------------------------------------------------

def balance_categories(records: Sequence[SceneRecord], rng_seed: int) -> list[SceneRecord]:
    """Keep ``n = min_c count(c)`` records from every category."""
    if not records:
        raise EmptyInputError("no records to balance")
    by_cat: dict[str, list[SceneRecord]] = defaultdict(list)
    for r in records:
        by_cat[r.category].append(r)
    n = min(len(v) for v in by_cat.values())
    rng = np.random.default_rng(rng_seed)
    out = []
    for cat in sorted(by_cat):
        members = by_cat[cat]
        picked = rng.choice(len(members), size=n, replace=False)
        out.extend(members[i] for i in picked)
    return out


# Prompts -------------------------------------------------------------------

def build_edit_prompt(caption: str, template: int) -> str:
    if not caption or not caption.strip():
        raise EmptyCaptionError("caption must be non-empty")
    if template not in (1, 2, 3):
        raise ValueError(f"template must be 1, 2 or 3, got {template}")
    return f"{PROMPT_TEMPLATES[template - 1]}\n{caption}\n{PROMPT_SUFFIX}"


def assign_edit_types(scene_ids: Sequence[str], rng_seed: int) -> dict[str, str]:
    """Balanced random assignment of edit families (counts differ by at most one)."""
    rng = np.random.default_rng(rng_seed)
    families = list(EDIT_FAMILIES)
    rng.shuffle(families)
    pool = [families[i % 3] for i in range(len(scene_ids))]
    rng.shuffle(pool)
    return dict(zip(scene_ids, pool))


def sample_templates(scene_ids: Sequence[str], rng_seed: int) -> dict[str, str]:
    """Independent uniform template draw per scene (no balance guarantee)."""
    rng = np.random.default_rng(rng_seed)
    draws = rng.integers(1, 4, size=len(scene_ids))
    return {sid: TEMPLATE_FAMILY[int(t)] for sid, t in zip(scene_ids, draws)}


# Synthetic scenes and edits --------------------------------------------------

def synth_scene(n: int, rng: np.random.Generator, sh_degree: int = 3) -> GaussianScene:
    """A toy scene: a Gaussian blob "object" sitting on a noisy ground plane."""
    n_obj = n // 2
    obj = rng.normal(0.0, 0.35, size=(n_obj, 3)) + (0.0, 0.0, 0.6)
    ground = np.c_[rng.uniform(-1.5, 1.5, size=(n - n_obj, 2)), rng.normal(0.0, 0.03, size=n - n_obj)]
    position = np.concatenate([obj, ground])
    base_color = rng.normal(0.0, 0.4, size=3)
    sh0 = base_color + 0.3 * np.sin(2.0 * position) + rng.normal(0.0, 0.05, size=(n, 3))
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return GaussianScene(
        position=position,
        opacity=rng.uniform(0.05, 0.55, size=n),
        scale=np.exp(rng.normal(-3.0, 0.5, size=(n, 3))),
        quat_unit=quat,
        sh0=sh0,
        sh_rest=rng.normal(0.0, 0.05, size=(n, sh_rest_width(sh_degree))),
        sh_degree=sh_degree,
    )


def _central_region(position: np.ndarray) -> np.ndarray:
    centroid = position.mean(axis=0)
    extent = float((position.max(axis=0) - position.min(axis=0)).max())
    return np.linalg.norm(position - centroid, axis=1) <= 0.5 * extent


def _rotate_about_gray(colors: np.ndarray, angle: float) -> np.ndarray:
    k = np.ones(3) / np.sqrt(3.0)
    cos, sin = np.cos(angle), np.sin(angle)
    return colors * cos + np.cross(k, colors) * sin + np.outer(colors @ k, k) * (1.0 - cos)


def synth_edit(scene: GaussianScene, family: str, magnitude: float, rng_seed: int) -> GaussianScene:
    """Apply a crude, seeded edit of the given family.

    ``color`` rotates sh0 about the grey axis by ``magnitude * pi`` and scales it
    by ``1 + magnitude`` inside the central region. ``material_type`` adds
    Gaussian noise of std ``magnitude`` to sh_rest and log-scales there.
    ``background_surface`` shifts sh0 and raises opacity by ``0.3 * magnitude``
    outside it.
    """
    if not 0.0 < magnitude <= 1.0:
        raise BadMagnitudeError(f"magnitude must be in (0, 1], got {magnitude}")
    if family not in EDIT_FAMILIES:
        raise ValueError(f"unknown edit family {family!r}")
    rng = np.random.default_rng(rng_seed)
    inside = _central_region(scene.position)

    if family == "color":
        sh0 = scene.sh0.copy()
        sh0[inside] = _rotate_about_gray(sh0[inside], magnitude * np.pi) * (1.0 + magnitude)
        return scene.with_(sh0=sh0)

    if family == "material_type":
        sh_rest = scene.sh_rest.copy()
        scale = scene.scale.copy()
        m = int(inside.sum())
        sh_rest[inside] += magnitude * rng.standard_normal((m, sh_rest.shape[1]))
        scale[inside] *= np.exp(magnitude * rng.standard_normal((m, 3)))
        return scene.with_(sh_rest=sh_rest, scale=scale)

    outside = ~inside
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    sh0 = scene.sh0.copy()
    sh0[outside] += magnitude * direction
    opacity = scene.opacity.copy()
    opacity[outside] = np.clip(opacity[outside] + 0.3 * magnitude, 0.0, 1.0)
    return scene.with_(sh0=sh0, opacity=opacity)


def shift_opacity(scene: GaussianScene, amount: float) -> GaussianScene:
    """Raise every opacity by ``amount`` (clamped to [0, 1]); nothing else changes."""
    return scene.with_(opacity=np.clip(scene.opacity + amount, 0.0, 1.0))


@dataclass
class SyntheticSample:
    record: SceneRecord
    scene: GaussianScene


def synth_corpus(
    n_real: int,
    gaussians: int,
    seed: int,
    family: str = "opacity",
    magnitude: float = 0.4,
    sh_degree: int = 3,
    categories: Iterable[str] = ("toy_a", "toy_b"),
) -> list[SyntheticSample]:
    """Paired corpus: ``n_real`` toy scenes plus one edited fake per scene.

    ``family="opacity"`` gives the pure opacity-shift fakes used for the
    feature-group separability experiment; otherwise ``synth_edit`` is used.
    """
    categories = list(categories)
    out: list[SyntheticSample] = []
    fakes: list[SyntheticSample] = []
    for i in range(n_real):
        sid = f"scene_{i:05d}"
        rng = np.random.default_rng(derive_seed(seed, sid))
        scene = synth_scene(gaussians, rng, sh_degree)
        caption = f"a toy object number {i}"
        cat = categories[i % len(categories)]
        out.append(SyntheticSample(SceneRecord(sid, cat, caption=caption, asset_path=f"{sid}.ply"), scene))
        if family == "opacity":
            fake = shift_opacity(scene, magnitude)
            fam = "background_surface"
        else:
            fam = family
            fake = synth_edit(scene, family, magnitude, derive_seed(seed, sid + "/edit"))
        fid = f"{sid}_edit"
        rec = SceneRecord(
            fid,
            cat,
            label="fake",
            editor="synthetic",
            edit_family=fam,
            caption=caption,
            edited_caption=f"{caption} ({fam} edit)",
            asset_path=f"{fid}.ply",
            source_id=sid,
        )
        fakes.append(SyntheticSample(rec, fake))
    return out + fakes
