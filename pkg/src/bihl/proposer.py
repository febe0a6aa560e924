"""Sliding-window scoring, suppression and proposal assembly.

Pipeline per image: pyramid -> HL map per scale -> bitwise score of every
8x8 feature window -> background filter (``tc`` on score, ``tmval`` on window
peak) -> NMS with a per-scale cap -> optional border merge -> global budget.

A feature cell ``(y, x)`` at scale ``(m, n)`` covers downsampled pixels
``2y..2y+15`` x ``2x..2x+15``, i.e. an original-image box of
``16 * 2**n`` by ``16 * 2**m`` pixels.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import _kernels
from .binmodel import BinarizedModel
from .boxes import Proposals
from .errors import BihlError
from .hlfeat import HlFeatureMap, hl_response
from .imgpyr import ImagePlane, ScaleSpec, enumerate_scales, pyramid
from .merger import DEFAULT_CAP, MergeConfig, merge_boxes

TEMPLATE = 16
# best IoU between two distinct cells of one scale: one-step shift of 1/8
LATTICE_MAX_IOU = 7 / 9


@dataclass(frozen=True)
class ProposerConfig:
    tc: float = 0.0
    tmval: float = 8
    nms_threshold: float = 0.875
    cap: int = DEFAULT_CAP
    budget: int = 10_000

    def __post_init__(self):
        for name in ("tc", "tmval", "nms_threshold"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.cap < 1 or self.budget < 1:
            raise ValueError("cap and budget must be >= 1")


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    scale: ScaleSpec
    scores: np.ndarray

    @property
    def rows(self) -> int:
        return self.scores.shape[0]

    @property
    def cols(self) -> int:
        return self.scores.shape[1]


def _score_fmap(fmap: np.ndarray, model: BinarizedModel, tmval) -> np.ndarray:
    return _kernels.score_map(fmap, model.ng, model.words, model.lambdas, float(tmval))


def _calibrate(scores: np.ndarray, s: ScaleSpec, model: BinarizedModel) -> np.ndarray:
    if model.calibration is None or s not in model.calibration:
        return scores
    a, b = model.calibration[s]
    return a * scores + b


def score_scale(img: ImagePlane, s, model: BinarizedModel, cfg: ProposerConfig = ProposerConfig()) -> ScoreMatrix:
    """Score matrix of one scale; empty when the scale does not fit the image."""
    s = ScaleSpec(*s)
    levels = pyramid(img, [s])
    if s not in levels or levels[s].height < 16 or levels[s].width < 16:
        return ScoreMatrix(s, np.zeros((0, 0)))
    fmap = hl_response(levels[s].data)
    return ScoreMatrix(s, _score_fmap(fmap, model, cfg.tmval))


def box_of_cell(s, y: int, x: int, dims=None):
    """Original-image ``(x, y, w, h)`` of a feature cell, clipped to ``dims = (w, h)``."""
    m, n = s
    bx, by = (2 * x) << n, (2 * y) << m
    bw, bh = TEMPLATE << n, TEMPLATE << m
    if dims is not None:
        W, H = dims
        x2, y2 = min(bx + bw, W), min(by + bh, H)
        bx, by = max(bx, 0), max(by, 0)
        bw, bh = x2 - bx, y2 - by
    return bx, by, bw, bh


def _sort_order(p: Proposals) -> np.ndarray:
    # score desc, then (scale, y, x) ascending
    return np.lexsort((p.boxes[:, 0], p.boxes[:, 1], p.scales[:, 1], p.scales[:, 0], -p.scores))


def _cap_per_scale(p: Proposals, cap: int) -> Proposals:
    if len(p) <= cap:
        return p
    key = p.scales[:, 0] * 64 + p.scales[:, 1]
    keep = np.ones(len(p), bool)
    for k in np.unique(key):
        idx = np.flatnonzero(key == k)
        keep[idx[cap:]] = False
    return p[keep]


def nms(boxes, cfg: ProposerConfig = ProposerConfig()) -> Proposals:
    """Greedy IoU suppression; returns the score-sorted container V."""
    p = boxes if isinstance(boxes, Proposals) else Proposals.from_boxes(boxes)
    return _suppress(p[p.scores >= cfg.tc], cfg)


def _suppress(p: Proposals, cfg: ProposerConfig) -> Proposals:
    p = p[_sort_order(p)]
    if len(p) == 0:
        return p
    b = p.boxes.astype(np.float64)
    x1, y1 = b[:, 0], b[:, 1]
    x2, y2 = x1 + b[:, 2], y1 + b[:, 3]
    areas = b[:, 2] * b[:, 3]
    order = np.arange(len(p))
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= cfg.nms_threshold]
    return _cap_per_scale(p[np.array(keep)], cfg.cap)


def _template_max_iou(a: ScaleSpec, b: ScaleSpec) -> float:
    aw, ah = TEMPLATE << a.n, TEMPLATE << a.m
    bw, bh = TEMPLATE << b.n, TEMPLATE << b.m
    inter = min(aw, bw) * min(ah, bh)
    return inter / (aw * ah + bw * bh - inter)


def nms_is_selection(scales: Sequence[ScaleSpec], threshold: float) -> bool:
    """True when no two grid windows of these scales can overlap beyond ``threshold``.

    Then suppression removes nothing and NMS reduces to filtering plus the
    per-scale cap, which :func:`propose` does without pairwise IoU.
    """
    if threshold < LATTICE_MAX_IOU:
        return False
    scales = list(scales)
    return all(
        _template_max_iou(a, b) <= threshold
        for i, a in enumerate(scales)
        for b in scales[i + 1 :]
    )


def _top_cells(scores: np.ndarray, tc: float, cap: int) -> np.ndarray:
    """Flat indices of the best ``cap`` cells scoring ``>= tc``, score desc then index asc."""
    flat = scores.ravel()
    cand = np.flatnonzero((flat >= tc) & np.isfinite(flat))
    if cand.size > cap:
        vals = flat[cand]
        kth = np.partition(vals, cand.size - cap)[cand.size - cap]
        above = cand[vals > kth]
        ties = cand[vals == kth][: cap - above.size]
        cand = np.concatenate([above, ties])
    return cand[np.lexsort((cand, -flat[cand]))]


def _cells_to_proposals(s: ScaleSpec, scores: np.ndarray, idx: np.ndarray, model=None) -> Proposals:
    cols = scores.shape[1]
    cy, cx = np.divmod(idx, cols)
    n = idx.size
    boxes = np.empty((n, 4), np.int64)
    boxes[:, 0] = (2 * cx) << s.n
    boxes[:, 1] = (2 * cy) << s.m
    boxes[:, 2] = TEMPLATE << s.n
    boxes[:, 3] = TEMPLATE << s.m
    scales = np.empty((n, 2), np.int64)
    scales[:] = (s.m, s.n)
    vals = scores.ravel()[idx]
    if model is not None:
        vals = _calibrate(vals, s, model)
    return Proposals(boxes, vals, scales)


def score_pyramid(img: ImagePlane, model: BinarizedModel, cfg: ProposerConfig,
                  scales: Optional[Sequence] = None) -> Dict[ScaleSpec, np.ndarray]:
    levels = pyramid(img, scales if scales is not None else enumerate_scales())
    out = {}
    for s, level in levels.items():
        if level.height < 16 or level.width < 16:
            continue
        out[s] = _score_fmap(hl_response(level.data), model, cfg.tmval)
    return out


def feature_maps(img: ImagePlane, scales: Optional[Sequence] = None) -> Dict[ScaleSpec, HlFeatureMap]:
    levels = pyramid(img, scales if scales is not None else enumerate_scales())
    return {s: HlFeatureMap(hl_response(lv.data), s) for s, lv in levels.items()
            if lv.height >= 2 and lv.width >= 2}


def propose(
    img: ImagePlane,
    model: BinarizedModel,
    cfg: ProposerConfig = ProposerConfig(),
    merge: bool = True,
    merge_cfg: MergeConfig = None,
    scales: Optional[Sequence] = None,
    timings: Optional[dict] = None,
) -> Proposals:
    """Scored proposals for one image, best first, at most ``cfg.budget`` of them.

    ``timings``, when given, accumulates per-stage wall seconds under the keys
    ``score``, ``nms``, ``merge`` and ``total``.
    """
    t0 = time.perf_counter()
    merge_cfg = merge_cfg or MergeConfig(cap=cfg.cap)
    mats = score_pyramid(img, model, cfg, scales)
    t1 = time.perf_counter()

    order = list(mats)
    if nms_is_selection(order, cfg.nms_threshold):
        parts = [_cells_to_proposals(s, mats[s], _top_cells(mats[s], cfg.tc, cfg.cap), model) for s in order]
        allp = Proposals.concat(parts)
        V = allp[np.argsort(-allp.scores, kind="stable")]
    else:
        parts = []
        for s in order:
            flat = mats[s].ravel()
            idx = np.flatnonzero(np.isfinite(flat) & (flat >= cfg.tc))
            parts.append(_cells_to_proposals(s, mats[s], idx, model))
        # raw scores were filtered above; calibrated ones only rank
        V = _suppress(Proposals.concat(parts), cfg)
    t2 = time.perf_counter()

    if merge and len(V):
        head, tail = V[: merge_cfg.cap], V[merge_cfg.cap :]
        merged = merge_boxes(head, merge_cfg, (img.width, img.height))
        out = Proposals.concat([merged, tail[: max(cfg.budget - len(merged), 0)]])
    else:
        out = V
    out = out[: cfg.budget]
    t3 = time.perf_counter()
    if timings is not None:
        for key, dt in (("score", t1 - t0), ("nms", t2 - t1), ("merge", t3 - t2), ("total", t3 - t0)):
            timings[key] = timings.get(key, 0.0) + dt
    return out


# --- output -----------------------------------------------------------------

CSV_HEADER = ("image", "x", "y", "w", "h", "score")


def proposal_rows(image: str, props: Proposals) -> Iterable[List[str]]:
    for (x, y, w, h), score in zip(props.boxes.tolist(), props.scores.tolist()):
        yield [image, str(x), str(y), str(w), str(h), repr(score)]


def write_csv(fh, results: Iterable, header: bool = True) -> None:
    """``results`` yields ``(image_name, Proposals)`` pairs."""
    writer = csv.writer(fh, lineterminator="\n")
    if header:
        writer.writerow(CSV_HEADER)
    for name, props in results:
        writer.writerows(proposal_rows(name, props))


def write_jsonl(fh, results: Iterable) -> None:
    for name, props in results:
        for (x, y, w, h), score, (m, n) in zip(props.boxes.tolist(), props.scores.tolist(), props.scales.tolist()):
            fh.write(json.dumps({"image": name, "x": x, "y": y, "w": w, "h": h,
                                 "score": score, "scale": [m, n]}) + "\n")


def read_csv(path) -> Dict[str, Proposals]:
    """Proposals per image from a CSV written by :func:`write_csv`, order preserved."""
    rows: Dict[str, list] = {}
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or tuple(rec) == CSV_HEADER:
                continue
            if len(rec) != 6:
                raise BihlError("malformed", f"{path}: expected 6 columns, got {len(rec)}")
            name, *vals = rec
            try:
                x, y, w, h = (int(v) for v in vals[:4])
                score = float(vals[4])
            except ValueError:
                raise BihlError("malformed", f"{path}: bad row {rec!r}") from None
            rows.setdefault(name, []).append(((x, y, w, h), score))
    out = {}
    for name, items in rows.items():
        out[name] = Proposals([b for b, _ in items], [s for _, s in items])
    return out
