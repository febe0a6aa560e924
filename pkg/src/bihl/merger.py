"""Border merging by rank-ordered seed growing on an occupancy grid.

Proposals are visited best-first.  Each one drops its center onto a coarse
grid.  Landing on a free cell makes it a seed: it claims the cell and every
free cell of the 8-neighborhood, and fuses with the owner of any already
claimed neighbor whose rank is within ``ts1``.  Landing on a claimed cell
fuses it with that cell's owner if their ranks are within ``ts2``; otherwise
the proposal is dropped.  A fused group is reported as the enclosing box of
its members, carrying the best member's score and scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import _kernels
from .boxes import Proposals
from .imgpyr import ImagePlane

DEFAULT_CAP = 1100


@dataclass(frozen=True)
class MergeConfig:
    ts1: int = 25
    ts2: int = 25
    cell: int = 8
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.ts1 < 0 or self.ts2 < 0:
            raise ValueError("merge thresholds must be >= 0")
        if self.cell < 1 or self.cap < 1:
            raise ValueError("cell size and cap must be >= 1")


@dataclass(frozen=True, eq=False)
class SeedGrid:
    """Final occupancy grid: ``owner[r, c]`` is the claiming rank, -1 if free."""

    owner: np.ndarray
    cell: int

    @property
    def occupancy(self) -> np.ndarray:
        """The 0/1 matrix view: 1 = free, 0 = claimed."""
        return (self.owner < 0).astype(np.uint8)

    def to_image(self) -> ImagePlane:
        return ImagePlane(self.occupancy * np.uint8(255))


def _run(V: Proposals, cfg: MergeConfig, dims: Tuple[int, int]):
    b = V.boxes
    img_w, img_h = int(dims[0]), int(dims[1])
    return _kernels.seed_merge(
        np.ascontiguousarray(b[:, 0]), np.ascontiguousarray(b[:, 1]),
        np.ascontiguousarray(b[:, 2]), np.ascontiguousarray(b[:, 3]),
        img_w, img_h, cfg.cell, cfg.ts1, cfg.ts2,
    )


def merge_groups(V: Proposals, cfg: MergeConfig = MergeConfig(), dims=(1, 1)):
    """Group label per proposal (-1 = deleted) and the final :class:`SeedGrid`."""
    if len(V) == 0:
        return np.zeros(0, np.int64), SeedGrid(np.full((1, 1), -1, np.int64), cfg.cell)
    group, owner = _run(V, cfg, dims)
    return group, SeedGrid(owner, cfg.cell)


def merge_boxes(V, cfg: MergeConfig = MergeConfig(), dims=(1, 1)) -> Proposals:
    """Fuse the score-sorted container ``V`` on an image of size ``dims = (w, h)``."""
    if not isinstance(V, Proposals):
        V = Proposals.from_boxes(V)
    if len(V) <= 1:
        return V[:]
    group, _ = _run(V, cfg, dims)
    b = V.boxes
    roots, x1, y1, x2, y2, best = _kernels.group_union(
        group,
        np.ascontiguousarray(b[:, 0]), np.ascontiguousarray(b[:, 1]),
        np.ascontiguousarray(b[:, 2]), np.ascontiguousarray(b[:, 3]),
        V.scores,
    )
    boxes = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
    # roots ascend in rank; re-sort by score anyway for unsorted callers
    order = np.argsort(-best, kind="stable")
    return Proposals(boxes[order], best[order], V.scales[roots][order])
