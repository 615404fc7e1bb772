"""Synthetic segmentation scenes: colored rectangles and disks on a textured
background, with exact pixel masks. Deterministic per (seed, count)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import serial
from .matching import SceneTargets

NUM_CLASSES = 3      # background, box, disk
SIZE = 64
MIN_CLASS_PIXELS = 16


@dataclass
class SyntheticScene:
    image: np.ndarray   # (3, 64, 64) reals in [0, 1]
    mask: np.ndarray    # (64, 64) integer labels < NUM_CLASSES

    def targets(self) -> SceneTargets:
        """One segment per class present in the scene (background included)."""
        labels, masks = [], []
        for c in range(NUM_CLASSES):
            m = self.mask == c
            if m.any():
                labels.append(c)
                masks.append(m.astype(np.float64))
        return SceneTargets(np.array(labels, dtype=np.int64), np.stack(masks))


# per-class base colors; hue separation is what makes the toy task learnable
_COLORS = {1: (0.85, 0.25, 0.2), 2: (0.2, 0.35, 0.85)}


def _paint_scene(rng: np.random.Generator) -> SyntheticScene:
    base = rng.uniform(0.35, 0.55)
    img = np.full((3, SIZE, SIZE), base) + rng.normal(scale=0.04, size=(3, SIZE, SIZE))
    mask = np.zeros((SIZE, SIZE), dtype=np.int64)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    for _ in range(int(rng.integers(1, 4))):
        cls = int(rng.integers(1, NUM_CLASSES))
        color = np.array(_COLORS[cls]) + rng.normal(scale=0.05, size=3)
        cy, cx = rng.integers(10, SIZE - 10, size=2)
        if cls == 1:
            h, w = rng.integers(8, 22, size=2)
            region = (np.abs(yy - cy) <= h // 2) & (np.abs(xx - cx) <= w // 2)
        else:
            r = int(rng.integers(5, 12))
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, region] = color[:, None] + rng.normal(scale=0.03, size=(3, int(region.sum())))
        mask[region] = cls
    return SyntheticScene(np.clip(img, 0.0, 1.0), mask)


def generate_dataset(seed: int, count: int) -> list[SyntheticScene]:
    """Reproducible scenes; every present class covers >= 16 pixels (scenes
    violating that after occlusion are redrawn)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    scenes = []
    while len(scenes) < count:
        scene = _paint_scene(rng)
        counts = np.bincount(scene.mask.ravel(), minlength=NUM_CLASSES)
        if all(c == 0 or c >= MIN_CLASS_PIXELS for c in counts[1:]):
            scenes.append(scene)
    return scenes


def batch_images(scenes: list[SyntheticScene]) -> np.ndarray:
    return np.stack([s.image for s in scenes])


def batch_targets(scenes: list[SyntheticScene]) -> list[SceneTargets]:
    return [s.targets() for s in scenes]


def save_dataset(path, scenes: list[SyntheticScene]) -> None:
    tensors = {}
    for i, s in enumerate(scenes):
        tensors[f"scene{i:04d}.image"] = s.image
        tensors[f"scene{i:04d}.mask"] = s.mask.astype(np.float64)
    serial.save_tensors(path, tensors)


def load_dataset(path) -> list[SyntheticScene]:
    tensors = serial.load_tensors(path)
    scenes = []
    i = 0
    while f"scene{i:04d}.image" in tensors:
        img = tensors[f"scene{i:04d}.image"]
        mask = tensors[f"scene{i:04d}.mask"].astype(np.int64)
        scenes.append(SyntheticScene(img, mask))
        i += 1
    if not scenes:
        raise serial.ContainerError("no scenes found in dataset container")
    return scenes
