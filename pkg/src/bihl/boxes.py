"""Box containers and overlap arithmetic.

Boxes are ``(x, y, w, h)`` in pixels, top-left origin; a box covers the
half-open ranges ``[x, x + w)`` and ``[y, y + h)``.
"""

from __future__ import annotations

from typing import Iterable, Iterator, NamedTuple, Sequence, Union

import numpy as np

from .imgpyr import ScaleSpec


class ScoredBox(NamedTuple):
    x: int
    y: int
    w: int
    h: int
    score: float
    scale: ScaleSpec


class Proposals:
    """Score-ordered proposals held column-wise.

    Indexing with an int yields a :class:`ScoredBox`; slicing or indexing with
    an array yields another ``Proposals``.
    """

    __slots__ = ("boxes", "scores", "scales")

    def __init__(self, boxes=None, scores=None, scales=None):
        self.boxes = np.zeros((0, 4), np.int64) if boxes is None else np.asarray(boxes, np.int64).reshape(-1, 4)
        n = len(self.boxes)
        self.scores = np.zeros(n) if scores is None else np.asarray(scores, np.float64).reshape(n)
        self.scales = np.zeros((n, 2), np.int64) if scales is None else np.asarray(scales, np.int64).reshape(n, 2)

    @classmethod
    def from_boxes(cls, items: Iterable[ScoredBox]) -> "Proposals":
        items = list(items)
        if not items:
            return cls()
        return cls(
            [(b.x, b.y, b.w, b.h) for b in items],
            [b.score for b in items],
            [tuple(b.scale) for b in items],
        )

    @classmethod
    def concat(cls, parts: Sequence["Proposals"]) -> "Proposals":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.scores for p in parts]),
            np.concatenate([p.scales for p in parts]),
        )

    def __len__(self):
        return len(self.boxes)

    def __getitem__(self, idx) -> Union[ScoredBox, "Proposals"]:
        if isinstance(idx, (int, np.integer)):
            x, y, w, h = (int(v) for v in self.boxes[idx])
            m, n = (int(v) for v in self.scales[idx])
            return ScoredBox(x, y, w, h, float(self.scores[idx]), ScaleSpec(m, n))
        return Proposals(self.boxes[idx], self.scores[idx], self.scales[idx])

    def __iter__(self) -> Iterator[ScoredBox]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Proposals):
            return NotImplemented
        return (
            np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.scores, other.scores)
            and np.array_equal(self.scales, other.scales)
        )

    def __repr__(self):
        return f"Proposals(n={len(self)})"


def as_box_array(boxes) -> np.ndarray:
    """Coerce Proposals, ScoredBox lists or raw arrays to an ``(n, 4)`` float array."""
    if isinstance(boxes, Proposals):
        return boxes.boxes.astype(np.float64)
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64) if boxes.size else np.zeros((0, 4))
    rows = [tuple(b)[:4] if not hasattr(b, "w") else (b.x, b.y, b.w, b.h) for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def iou(a, b) -> float:
    ax, ay, aw, ah = a[:4]
    bx, by, bw, bh = b[:4]
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = as_box_array(a)
    b = as_box_array(b)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = (a[:, 2:3] * a[:, 3:4]) + (b[:, 2] * b[:, 3]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out
