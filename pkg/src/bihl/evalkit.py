"""Proposal quality metrics, perturbations and timing.

Detection recall (DR) counts ground-truth boxes whose best overlap with the
top-``budget`` proposals reaches an IoU threshold.  MABO averages the best
overlaps per class, then over classes.  Repeatability compares proposals of
an image with those of a perturbed copy, after mapping back to the original
frame.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np

from . import _kernels
from .binmodel import BinarizedModel
from .boxes import Proposals, as_box_array, iou, iou_matrix
from .errors import BihlError
from .imgpyr import ImagePlane, read_image
from .proposer import ProposerConfig, propose, proposal_rows

__all__ = [
    "iou", "best_overlaps", "detection_rate", "mabo", "EvalReport", "evaluate",
    "Perturbation", "BoxMapping", "LADDERS", "perturb", "repeatability", "time_pipeline",
]


# --- recall and localization ------------------------------------------------

def _top(props, budget: int) -> np.ndarray:
    boxes = as_box_array(props)
    return boxes[:budget] if budget is not None else boxes


def best_overlaps(proposals: Mapping, ground_truth: Mapping, budget: int = 10_000) -> List[Tuple[str, float]]:
    """``(label, best IoU)`` for every ground-truth box, images in key order."""
    out = []
    for key in sorted(ground_truth):
        gts = ground_truth[key]
        if not gts:
            continue
        gt = np.array([b.xywh if hasattr(b, "xywh") else tuple(b)[:4] for b in gts], dtype=np.float64)
        props = _top(proposals.get(key, np.zeros((0, 4))), budget)
        best = iou_matrix(gt, props).max(axis=1) if len(props) else np.zeros(len(gt))
        labels = [getattr(b, "label", "object") for b in gts]
        out.extend(zip(labels, best.tolist()))
    if not out:
        raise BihlError("no-gt", "ground truth is empty")
    return out


def detection_rate(proposals: Mapping, ground_truth: Mapping, iou_thr: float = 0.5, budget: int = 10_000) -> float:
    overlaps = best_overlaps(proposals, ground_truth, budget)
    return sum(v >= iou_thr for _, v in overlaps) / len(overlaps)


def abo_per_class(overlaps: Sequence[Tuple[str, float]]) -> Dict[str, float]:
    per: Dict[str, List[float]] = {}
    for label, v in overlaps:
        per.setdefault(label, []).append(v)
    return {k: float(np.mean(v)) for k, v in sorted(per.items())}


def mabo(proposals: Mapping, ground_truth: Mapping, budget: int = 10_000) -> float:
    per = abo_per_class(best_overlaps(proposals, ground_truth, budget))
    return float(np.mean(list(per.values())))


@dataclass
class EvalReport:
    iou_threshold: float
    budget: int
    detection_rate: float
    mabo: float
    images: int
    gt_boxes: int
    mean_time_s: Optional[float] = None
    proposals_mean: float = 0.0
    proposals_min: int = 0
    proposals_max: int = 0
    abo_per_class: Dict[str, float] = field(default_factory=dict)
    recall_at: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key in ("iou_threshold", "budget", "detection_rate", "mabo", "images", "gt_boxes",
                    "mean_time_s", "proposals_mean", "proposals_min", "proposals_max"):
            w.writerow([key, getattr(self, key)])
        for thr, v in self.recall_at.items():
            w.writerow([f"recall@{thr}", v])
        for label, v in self.abo_per_class.items():
            w.writerow([f"abo:{label}", v])
        return buf.getvalue()


def evaluate(proposals: Mapping, ground_truth: Mapping, iou_thr: float = 0.5, budget: int = 10_000,
             times: Sequence[float] = None, sweep: Sequence[float] = ()) -> EvalReport:
    overlaps = best_overlaps(proposals, ground_truth, budget)
    per_class = abo_per_class(overlaps)
    counts = [min(len(proposals.get(k, ())), budget) for k in ground_truth]
    return EvalReport(
        iou_threshold=iou_thr,
        budget=budget,
        detection_rate=sum(v >= iou_thr for _, v in overlaps) / len(overlaps),
        mabo=float(np.mean(list(per_class.values()))),
        images=len(ground_truth),
        gt_boxes=len(overlaps),
        mean_time_s=float(np.mean(times)) if times else None,
        proposals_mean=float(np.mean(counts)) if counts else 0.0,
        proposals_min=int(min(counts)) if counts else 0,
        proposals_max=int(max(counts)) if counts else 0,
        abo_per_class=per_class,
        recall_at={str(t): sum(v >= t for _, v in overlaps) / len(overlaps) for t in sweep},
    )


# --- perturbations ----------------------------------------------------------

LADDERS: Dict[str, Tuple[float, ...]] = {
    "scale": (0.5, 0.707, 1.414, 2.0),
    "rotate": (5.0, 10.0, 15.0),
    "illumination": (0.5, 0.8, 1.25, 2.0),
    "jpeg": (50, 20, 10, 5),
    "blur": (1.0, 2.0, 4.0, 8.0),
    "saltpepper": (0.01, 0.03, 0.05, 0.1),
}
# level values that leave the image untouched
IDENTITY_LEVEL = {"scale": 1.0, "rotate": 0.0, "illumination": 1.0, "blur": 0.0, "saltpepper": 0.0}
KINDS = tuple(LADDERS) + ("identity",)


@dataclass(frozen=True)
class Perturbation:
    """``level`` is the kind's own parameter (factor, degrees, gamma, quality, sigma, fraction)."""

    kind: str
    level: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BihlError("unsupported-kind", f"{self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "identity":
            return
        allowed = LADDERS[self.kind] + ((IDENTITY_LEVEL[self.kind],) if self.kind in IDENTITY_LEVEL else ())
        if not any(np.isclose(self.level, a) for a in allowed):
            raise BihlError("unsupported-level", f"{self.kind} level {self.level} not in {allowed}")

    @classmethod
    def from_index(cls, kind: str, index: int) -> "Perturbation":
        if kind == "identity":
            return cls(kind)
        if kind not in LADDERS:
            raise BihlError("unsupported-kind", repr(kind))
        ladder = LADDERS[kind]
        if not 0 <= index < len(ladder):
            raise BihlError("unsupported-level", f"{kind} level index must be in 0..{len(ladder) - 1}")
        return cls(kind, ladder[index])

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity" or (
            self.kind in IDENTITY_LEVEL and np.isclose(self.level, IDENTITY_LEVEL[self.kind])
        )


@dataclass(frozen=True, eq=False)
class BoxMapping:
    """Affine map from original to perturbed pixel coordinates."""

    forward: np.ndarray
    src_size: Tuple[int, int]
    dst_size: Tuple[int, int]

    @classmethod
    def identity(cls, size) -> "BoxMapping":
        return cls(np.array([[1.0, 0, 0], [0, 1.0, 0]]), tuple(size), tuple(size))

    @property
    def inverse(self) -> np.ndarray:
        return cv2.invertAffineTransform(self.forward)

    def to_perturbed_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return pts @ self.forward[:, :2].T + self.forward[:, 2]

    def to_original_points(self, pts) -> np.ndarray:
        inv = self.inverse
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return pts @ inv[:, :2].T + inv[:, 2]

    @staticmethod
    def _project(boxes, mat) -> np.ndarray:
        b = as_box_array(boxes)
        if len(b) == 0:
            return b
        x1, y1 = b[:, 0], b[:, 1]
        x2, y2 = x1 + b[:, 2], y1 + b[:, 3]
        cx = np.stack([x1, x2, x1, x2], 1)
        cy = np.stack([y1, y1, y2, y2], 1)
        px = mat[0, 0] * cx + mat[0, 1] * cy + mat[0, 2]
        py = mat[1, 0] * cx + mat[1, 1] * cy + mat[1, 2]
        lo_x, lo_y = px.min(1), py.min(1)
        return np.stack([lo_x, lo_y, px.max(1) - lo_x, py.max(1) - lo_y], 1)

    def boxes_to_original(self, boxes) -> np.ndarray:
        return self._project(boxes, self.inverse)

    def boxes_to_perturbed(self, boxes) -> np.ndarray:
        return self._project(boxes, self.forward)


def jpeg_bytes(img: ImagePlane, quality: int) -> bytes:
    ok, buf = cv2.imencode(".jpg", img.data, [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise BihlError("encode-failed", "JPEG encoding failed")
    return buf.tobytes()


def perturb(img: ImagePlane, p: Perturbation, seed: int = 0) -> Tuple[ImagePlane, BoxMapping]:
    """Perturbed copy of ``img`` and the box mapping back to the original frame."""
    size = (img.width, img.height)
    if p.is_identity:
        return ImagePlane(img.data.copy()), BoxMapping.identity(size)
    data = img.data
    kind, level = p.kind, p.level
    if kind == "scale":
        nw, nh = max(1, int(round(img.width * level))), max(1, int(round(img.height * level)))
        interp = cv2.INTER_AREA if level < 1 else cv2.INTER_LINEAR
        out = cv2.resize(data, (nw, nh), interpolation=interp)
        fwd = np.array([[nw / img.width, 0, 0], [0, nh / img.height, 0]])
        return ImagePlane(out), BoxMapping(fwd, size, (nw, nh))
    if kind == "rotate":
        center = (img.width / 2.0, img.height / 2.0)
        fwd = cv2.getRotationMatrix2D(center, float(level), 1.0)
        out = cv2.warpAffine(data, fwd, size, flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
        return ImagePlane(out), BoxMapping(fwd, size, size)
    if kind == "illumination":
        lut = np.clip(np.rint(255.0 * (np.arange(256) / 255.0) ** level), 0, 255).astype(np.uint8)
        return ImagePlane(lut[data]), BoxMapping.identity(size)
    if kind == "jpeg":
        dec = cv2.imdecode(np.frombuffer(jpeg_bytes(img, int(level)), np.uint8), cv2.IMREAD_GRAYSCALE)
        return ImagePlane(dec), BoxMapping.identity(size)
    if kind == "blur":
        return ImagePlane(cv2.GaussianBlur(data, (0, 0), float(level))), BoxMapping.identity(size)
    if kind == "saltpepper":
        rng = np.random.default_rng(seed)
        count = int(round(level * img.width * img.height))
        out = data.copy().ravel()
        idx = rng.choice(out.size, size=count, replace=False)
        out[idx] = np.where(rng.random(count) < 0.5, 0, 255).astype(np.uint8)
        return ImagePlane(out.reshape(data.shape)), BoxMapping.identity(size)
    raise BihlError("unsupported-kind", kind)


def _inside(boxes: np.ndarray, size, tol: float = 0.5) -> np.ndarray:
    w, h = size
    return (
        (boxes[:, 0] >= -tol) & (boxes[:, 1] >= -tol)
        & (boxes[:, 0] + boxes[:, 2] <= w + tol) & (boxes[:, 1] + boxes[:, 3] <= h + tol)
    )


def match_fraction(a: np.ndarray, b: np.ndarray, iou_thr: float = 0.5) -> float:
    """Greedy one-to-one matching by descending IoU; matches over the larger set."""
    if len(a) == 0 and len(b) == 0:
        return 1.0
    if len(a) == 0 or len(b) == 0:
        return 0.0
    m = iou_matrix(a, b)
    r, c = np.nonzero(m >= iou_thr)
    if r.size == 0:
        return 0.0
    vals = m[r, c]
    order = np.lexsort((c, r, -vals))
    matched = _kernels.greedy_match(r[order], c[order], len(a), len(b))
    return matched / max(len(a), len(b))


def repeatability(model: BinarizedModel, img: ImagePlane, p: Perturbation,
                  cfg: ProposerConfig = ProposerConfig(), merge: bool = True, top: int = 1000,
                  iou_thr: float = 0.5, seed: int = 0, original: Proposals = None) -> float:
    """Fraction of top proposals that re-occur after the perturbation.

    ``original`` may carry precomputed proposals of the unperturbed image.
    """
    pert_img, mapping = perturb(img, p, seed)
    orig = original if original is not None else propose(img, model, cfg, merge)
    a = as_box_array(orig[:top])
    b = mapping.boxes_to_original(propose(pert_img, model, cfg, merge)[:top])
    a = a[_inside(mapping.boxes_to_perturbed(a), mapping.dst_size)] if len(a) else a
    b = b[_inside(b, mapping.src_size)] if len(b) else b
    return match_fraction(a, b, iou_thr)


# --- timing -----------------------------------------------------------------

def time_pipeline(model: BinarizedModel, images: Sequence, cfg: ProposerConfig = ProposerConfig(),
                  merge: bool = True, per_image: list = None) -> float:
    """Mean wall seconds per image from file read to formatted proposal rows.

    ``images`` are paths (read inside the timed region) or in-memory planes.
    """
    if not images:
        raise BihlError("no-images", "nothing to time")
    times = []
    for item in images:
        t0 = time.perf_counter()
        img = item if isinstance(item, ImagePlane) else read_image(item)
        props = propose(img, model, cfg, merge)
        rows = list(proposal_rows("img", props))
        times.append(time.perf_counter() - t0)
        del rows
    if per_image is not None:
        per_image.extend(times)
    return float(sum(times) / len(times))
