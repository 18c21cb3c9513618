"""Procedural few-shot segmentation tasks over 12 synthetic shape classes.

Classes are (shape family, texture) pairs split into 4 folds of 3 test
classes each; training draws only from the 9 classes outside the fold.
Every render is a pure function of its RNG, so an episode stream is a pure
function of (split, phase, shots, queries, master seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationError

FAMILIES = ("disk", "square", "triangle", "ring", "cross", "diagonal-bar")
TEXTURES = ("solid", "checker")
NUM_CLASSES = len(FAMILIES) * len(TEXTURES)
NUM_SPLITS = 4
CLASSES_PER_SPLIT = NUM_CLASSES // NUM_SPLITS

DEFAULT_CANVAS = 64
SCALE_RANGE = (0.2, 0.6)
AREA_RANGE = (0.02, 0.6)
MAX_ATTEMPTS = 100
PIXEL_NOISE = 0.1


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape_family: str
    texture: str

    @classmethod
    def from_id(cls, class_id: int) -> ClassSpec:
        if not 0 <= class_id < NUM_CLASSES:
            raise ValueError(f"class id {class_id} outside 0..{NUM_CLASSES - 1}")
        # textures alternate along the id so every split holds out a mix of solid and checker classes
        family = class_id % len(FAMILIES)
        return cls(class_id, FAMILIES[family], TEXTURES[(class_id + class_id // len(FAMILIES)) % len(TEXTURES)])


@dataclass(frozen=True)
class SplitConfig:
    split_index: int

    def __post_init__(self):
        if not 0 <= self.split_index < NUM_SPLITS:
            raise ValueError(f"split index {self.split_index} outside 0..{NUM_SPLITS - 1}")

    @property
    def test_class_ids(self) -> tuple[int, ...]:
        start = CLASSES_PER_SPLIT * self.split_index
        return tuple(range(start, start + CLASSES_PER_SPLIT))

    @property
    def train_class_ids(self) -> tuple[int, ...]:
        return tuple(c for c in range(NUM_CLASSES) if c not in self.test_class_ids)

    def class_ids(self, phase: str) -> tuple[int, ...]:
        if phase == "train":
            return self.train_class_ids
        if phase == "test":
            return self.test_class_ids
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")


@dataclass
class Episode:
    """1-way episode; images are ``N x 3 x H x W`` in [0, 1], masks ``N x H x W`` in {0, 1}."""

    support_images: np.ndarray
    support_masks: np.ndarray
    query_images: np.ndarray
    query_masks: np.ndarray
    class_id: int
    seed: int
    way: int = 1

    @property
    def shots(self) -> int:
        return len(self.support_images)

    @property
    def support(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.support_images, self.support_masks))

    @property
    def query(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.query_images, self.query_masks))


# ------------------------------------------------------------------ rendering


def _rotate(dx: np.ndarray, dy: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(angle), np.sin(angle)
    return c * dx + s * dy, -s * dx + c * dy


def shape_mask(family: str, canvas: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    """Rasterize a shape by sampling pixel centers; returns a boolean grid."""
    yy, xx = np.mgrid[0:canvas, 0:canvas] + 0.5
    u, v = _rotate(xx - cx, yy - cy, angle)
    if family == "disk":
        return u * u + v * v <= radius * radius
    if family == "ring":
        rho2 = u * u + v * v
        return (rho2 <= radius * radius) & (rho2 >= (0.55 * radius) ** 2)
    if family == "square":
        half = 0.8 * radius
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if family == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            theta = np.pi / 2 + 2 * np.pi * k / 3
            inside &= u * np.cos(theta) + v * np.sin(theta) <= radius / 2
        return inside
    if family == "cross":
        arm = radius / 3
        return ((np.abs(u) <= arm) & (np.abs(v) <= radius)) | ((np.abs(v) <= arm) & (np.abs(u) <= radius))
    if family == "diagonal-bar":
        return (np.abs(u) <= radius) & (np.abs(v) <= radius / 4)
    raise ValueError(f"unknown shape family {family!r}")


def _draw_angle(family: str, rng: np.random.Generator) -> float:
    if family in ("disk", "ring"):
        return 0.0
    if family == "diagonal-bar":
        base = np.pi / 4 if rng.random() < 0.5 else 3 * np.pi / 4
        return base + rng.uniform(-np.pi / 12, np.pi / 12)
    return rng.uniform(0.0, 2 * np.pi)


def _low_frequency_noise(canvas: int, rng: np.random.Generator, cells: int = 4) -> np.ndarray:
    coarse = rng.random((3, cells, cells))
    pos = np.linspace(0.0, cells - 1, canvas)
    lo = np.minimum(pos.astype(int), cells - 2)
    frac = pos - lo
    rows = coarse[:, lo, :] * (1 - frac)[None, :, None] + coarse[:, lo + 1, :] * frac[None, :, None]
    return rows[:, :, lo] * (1 - frac)[None, None, :] + rows[:, :, lo + 1] * frac[None, None, :]


def render_instance(spec: ClassSpec, rng: np.random.Generator, canvas: int = DEFAULT_CANVAS,
                    scale_range: tuple[float, float] = SCALE_RANGE,
                    area_range: tuple[float, float] = AREA_RANGE) -> tuple[np.ndarray, np.ndarray]:
    """Draw one ``3 x H x W`` image and its binary ``H x W`` mask."""
    for _ in range(MAX_ATTEMPTS):
        extent = rng.uniform(*scale_range) * canvas
        radius = extent / 2
        cx = rng.uniform(radius, canvas - radius)
        cy = rng.uniform(radius, canvas - radius)
        angle = _draw_angle(spec.shape_family, rng)
        mask = shape_mask(spec.shape_family, canvas, cx, cy, radius, angle)
        area = mask.mean()
        if area_range[0] <= area <= area_range[1]:
            break
    else:
        raise GenerationError(f"no {spec.shape_family} within area bounds {area_range} after {MAX_ATTEMPTS} draws")

    color = rng.random(3)
    if spec.texture == "checker":
        period = int(rng.integers(3, 7))
        yy, xx = np.mgrid[0:canvas, 0:canvas]
        phase = ((xx // period + yy // period) % 2).astype(bool)
        fg = np.where(phase[None], color[:, None, None], 0.35 * color[:, None, None])
    else:
        fg = np.broadcast_to(color[:, None, None], (3, canvas, canvas))
    half_width = PIXEL_NOISE * np.sqrt(3.0)
    bg = _low_frequency_noise(canvas, rng) + rng.uniform(-half_width, half_width, (3, canvas, canvas))
    image = np.clip(np.where(mask[None], fg, bg), 0.0, 1.0)
    return image, mask.astype(np.uint8)


def sample_episode(split: SplitConfig, phase: str, shots: int, queries: int, seed: int,
                   canvas: int = DEFAULT_CANVAS, class_id: int | None = None,
                   scale_range: tuple[float, float] = SCALE_RANGE,
                   area_range: tuple[float, float] = AREA_RANGE) -> Episode:
    """Render a 1-way episode; the class is uniform over the phase's classes unless given."""
    if shots < 1 or queries < 1:
        raise ValueError("shots and queries must be >= 1")
    classes = split.class_ids(phase)
    rng = np.random.default_rng(seed)
    if class_id is None:
        class_id = int(classes[rng.integers(len(classes))])
    elif class_id not in classes:
        raise ValueError(f"class {class_id} is not a {phase} class of split {split.split_index}")
    spec = ClassSpec.from_id(class_id)
    renders = [render_instance(spec, rng, canvas, scale_range, area_range) for _ in range(shots + queries)]
    images = np.stack([r[0] for r in renders])
    masks = np.stack([r[1] for r in renders])
    return Episode(images[:shots], masks[:shots], images[shots:], masks[shots:], class_id, int(seed))


def episode_seed(master: int, index: int, stream: str = "train") -> int:
    """Per-episode u64 seed derived from (master seed, stream tag, episode index)."""
    tag = sum(ord(ch) << (8 * i) for i, ch in enumerate(stream))
    return int(np.random.SeedSequence([master, tag, index]).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------- export


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header is four whitespace-separated tokens, then exactly one whitespace byte before the raster
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def image_to_gray(image: np.ndarray) -> np.ndarray:
    lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return np.round(np.clip(lum, 0.0, 1.0) * 255).astype(np.uint8)


def export_episode(episode: Episode, out_dir: str | Path, extra: dict | None = None) -> dict:
    """Write PGM images/masks (masks as 0/255) and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for role, images, masks in (("support", episode.support_images, episode.support_masks),
                                ("query", episode.query_images, episode.query_masks)):
        for i, (img, mask) in enumerate(zip(images, masks)):
            image_name = f"{role}_{i:02d}_image.pgm"
            mask_name = f"{role}_{i:02d}_mask.pgm"
            write_pgm(out / image_name, image_to_gray(img))
            write_pgm(out / mask_name, mask.astype(np.uint8) * 255)
            entries.append({"role": role, "index": i, "image": image_name, "mask": mask_name})
    manifest = {"class_id": episode.class_id, "seed": episode.seed, **(extra or {}), "files": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
