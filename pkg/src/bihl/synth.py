"""Seeded synthetic scenes: textured rectangles on a smooth noisy background.

Used as a desk-scale stand-in for an annotated dataset.  Every rectangle is
a labelled ground-truth box whose class is its texture kind.
"""

from __future__ import annotations

import os
from typing import List, NamedTuple, Sequence, Tuple

import cv2
import numpy as np

from .imgpyr import ImagePlane, write_pgm
from .trainer import AnnotatedBox

TEXTURES = ("noise", "stripes", "checker")
MIN_SIDE = 16
MAX_SIDE = 256
MAX_ASPECT = 3.0


class Scene(NamedTuple):
    name: str
    image: ImagePlane
    boxes: List[AnnotatedBox]


def _overlaps(box, placed, margin=4) -> bool:
    x, y, w, h = box
    for px, py, pw, ph in placed:
        if x < px + pw + margin and px < x + w + margin and y < py + ph + margin and py < y + h + margin:
            return True
    return False


def _texture(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "noise":
        return rng.normal(0.0, 12.0, (h, w))
    if kind == "stripes":
        period = rng.uniform(6, 14)
        phase = rng.uniform(0, 2 * np.pi)
        ys = np.arange(h)[:, None]
        xs = np.arange(w)[None, :]
        theta = rng.uniform(0, np.pi)
        return 14.0 * np.sin(2 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / period + phase)
    cell = int(rng.integers(4, 10))
    ys = (np.arange(h)[:, None] // cell)
    xs = (np.arange(w)[None, :] // cell)
    return np.where((ys + xs) % 2 == 0, 12.0, -12.0)


def _pick_size(rng: np.random.Generator, max_w: int, max_h: int) -> Tuple[int, int]:
    while True:
        w = int(round(2 ** rng.uniform(np.log2(MIN_SIDE), np.log2(MAX_SIDE))))
        aspect = 2 ** rng.uniform(-np.log2(MAX_ASPECT), np.log2(MAX_ASPECT))
        h = int(round(w * aspect))
        if MIN_SIDE <= h <= MAX_SIDE and w <= max_w and h <= max_h:
            return w, h


def make_scene(rng: np.random.Generator, name: str = "scene", width: int = None, height: int = None,
               n_objects: int = None) -> Scene:
    width = width or int(rng.integers(320, 501))
    height = height or int(rng.integers(280, 401))
    n_objects = n_objects or int(rng.integers(1, 4))

    base = rng.uniform(60, 190)
    gy, gx = rng.uniform(-25, 25, 2)
    yy = np.linspace(-0.5, 0.5, height)[:, None]
    xx = np.linspace(-0.5, 0.5, width)[None, :]
    canvas = base + gy * yy + gx * xx + np.zeros((height, width))

    placed: List[Tuple[int, int, int, int]] = []
    boxes: List[AnnotatedBox] = []
    for _ in range(n_objects):
        for _attempt in range(60):
            w, h = _pick_size(rng, width - 8, height - 8)
            x = int(rng.integers(4, width - w - 3))
            y = int(rng.integers(4, height - h - 3))
            if not _overlaps((x, y, w, h), placed):
                break
        else:
            continue
        level = base + rng.choice([-1, 1]) * rng.uniform(70, 110)
        if not 10 <= level <= 245:
            level = base - np.sign(level - base) * rng.uniform(70, 110)
        kind = TEXTURES[int(rng.integers(len(TEXTURES)))]
        canvas[y : y + h, x : x + w] = level + _texture(kind, h, w, rng)
        placed.append((x, y, w, h))
        boxes.append(AnnotatedBox(name, x, y, w, h, kind))

    canvas = cv2.GaussianBlur(canvas, (0, 0), 1.0)
    canvas += rng.normal(0.0, 3.0, canvas.shape)
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return Scene(name, ImagePlane(pixels), boxes)


def synthetic_corpus(count: int, seed: int = 0, prefix: str = "syn", **kw) -> List[Scene]:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, f"{prefix}{i:04d}", **kw) for i in range(count)]


def write_corpus(scenes: Sequence[Scene], directory, annotations_name: str = "annotations.txt") -> str:
    """Write scenes as PGM files plus a line-format annotation file; returns its path."""
    os.makedirs(directory, exist_ok=True)
    ann_path = os.path.join(directory, annotations_name)
    with open(ann_path, "w") as fh:
        for sc in scenes:
            fname = f"{sc.name}.pgm"
            write_pgm(sc.image, os.path.join(directory, fname))
            for b in sc.boxes:
                fh.write(f"{fname},{b.label},{b.x},{b.y},{b.w},{b.h}\n")
    return ann_path
