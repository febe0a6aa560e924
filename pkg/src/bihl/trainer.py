"""Training data extraction and the linear objectness model.

Positives are the HL descriptors of the grid window that best fits each
annotated box; negatives are random windows far from every box.  The model
is a 64-d weight vector fitted by stochastic subgradient descent on the
L2-regularized hinge loss, with no bias term: score 0 is the decision
boundary used downstream.
"""

from __future__ import annotations

import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .binmodel import DEFAULT_NA, DEFAULT_NG, DIM, BinarizedModel, decompose
from .boxes import iou, iou_matrix
from .errors import BihlError
from .imgpyr import ImagePlane, ScaleSpec, enumerate_scales
from .proposer import TEMPLATE, box_of_cell, feature_maps

log = logging.getLogger(__name__)

NEGATIVE_MAX_IOU = 0.3


@dataclass(frozen=True)
class AnnotatedBox:
    image: str
    x: int
    y: int
    w: int
    h: int
    label: str = "object"
    difficult: bool = False

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise BihlError("bad-box", f"{self.image}: box {self.w}x{self.h} is empty")

    @property
    def xywh(self) -> Tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    def clipped(self, width: int, height: int) -> Optional["AnnotatedBox"]:
        x1, y1 = max(self.x, 0), max(self.y, 0)
        x2, y2 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x2 <= x1 or y2 <= y1:
            return None
        return AnnotatedBox(self.image, x1, y1, x2 - x1, y2 - y1, self.label, self.difficult)


@dataclass(frozen=True)
class TrainConfig:
    positive_iou: float = 0.5
    negatives_per_image: int = 50
    epochs: int = 20
    lr: float = 0.01
    C: float = 1.0
    batch_size: int = 16
    balance_classes: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.positive_iou <= 1:
            raise ValueError("positive_iou must be in (0, 1]")
        if self.negatives_per_image < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("counts must be >= 1")
        if self.lr <= 0 or self.C <= 0:
            raise ValueError("lr and C must be positive")


# --- annotations ------------------------------------------------------------

def image_key(path: str) -> str:
    """Annotation/proposal join key: file name without directory or extension."""
    return os.path.splitext(os.path.basename(path))[0]


def parse_voc_xml(path) -> List[AnnotatedBox]:
    """VOC ``<object>`` boxes; 1-based inclusive corners become 0-based x, y, w, h."""
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise BihlError("malformed", f"{path}: {exc}") from None
    fname = root.findtext("filename") or os.path.basename(os.fspath(path))
    key = image_key(fname)
    out = []
    for obj in root.iter("object"):
        bb = obj.find("bndbox")
        if bb is None:
            continue
        try:
            xmin, ymin, xmax, ymax = (int(float(bb.findtext(t))) for t in ("xmin", "ymin", "xmax", "ymax"))
        except (TypeError, ValueError):
            raise BihlError("malformed", f"{path}: bad bndbox") from None
        out.append(AnnotatedBox(
            key, xmin - 1, ymin - 1, xmax - xmin + 1, ymax - ymin + 1,
            (obj.findtext("name") or "object").strip(),
            (obj.findtext("difficult") or "0").strip() == "1",
        ))
    return out


def parse_box_lines(path) -> List[AnnotatedBox]:
    """Lines of ``image_path,label,x,y,w,h``; blank and ``#`` lines skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 6:
                raise BihlError("malformed", f"{path}:{lineno}: expected 6 fields")
            try:
                x, y, w, h = (int(float(v)) for v in parts[2:])
            except ValueError:
                raise BihlError("malformed", f"{path}:{lineno}: non-numeric box") from None
            out.append(AnnotatedBox(image_key(parts[0]), x, y, w, h, parts[1]))
    return out


def load_annotations(path) -> Dict[str, List[AnnotatedBox]]:
    """Boxes grouped by image key, from a directory of VOC XML files or a line file."""
    path = os.fspath(path)
    if os.path.isdir(path):
        boxes = []
        for name in sorted(os.listdir(path)):
            if name.lower().endswith(".xml"):
                boxes.extend(parse_voc_xml(os.path.join(path, name)))
    elif os.path.isfile(path):
        boxes = parse_box_lines(path)
    else:
        raise BihlError("missing-path", f"annotations not found: {path}")
    grouped: Dict[str, List[AnnotatedBox]] = {}
    for b in boxes:
        grouped.setdefault(b.image, []).append(b)
    return grouped


def write_box_lines(fh, boxes: Sequence[AnnotatedBox], image_names: Dict[str, str] = None) -> None:
    for b in boxes:
        name = (image_names or {}).get(b.image, b.image)
        fh.write(f"{name},{b.label},{b.x},{b.y},{b.w},{b.h}\n")


# --- sampling ---------------------------------------------------------------

def _centered_iou(w: int, h: int, tw: int, th: int) -> float:
    inter = min(w, tw) * min(h, th)
    return inter / (w * h + tw * th - inter)


def assign_scale(box, positive_iou: float = 0.5, scales: Sequence = None) -> Optional[ScaleSpec]:
    """Scale whose template best matches the box shape (co-centered IoU), or None."""
    w, h = (box.w, box.h) if hasattr(box, "w") else (box[2], box[3])
    best, best_iou = None, -1.0
    for s in scales or enumerate_scales():
        v = _centered_iou(w, h, TEMPLATE << s.n, TEMPLATE << s.m)
        if v > best_iou:
            best, best_iou = ScaleSpec(*s), v
    if best_iou < positive_iou:
        return None
    return best


def _aligned_cell(box: AnnotatedBox, s: ScaleSpec, rows: int, cols: int) -> Tuple[int, int]:
    """Cell whose template is co-centered with the box (nearest grid position)."""
    # cell origins step 2 * 2**n px horizontally, 2 * 2**m px vertically
    left = box.x + box.w / 2 - (TEMPLATE << s.n) / 2
    top = box.y + box.h / 2 - (TEMPLATE << s.m) / 2
    cx = int(np.floor(left / (2 << s.n) + 0.5))
    cy = int(np.floor(top / (2 << s.m) + 0.5))
    return min(max(cy, 0), rows - 1), min(max(cx, 0), cols - 1)


def image_samples(img: ImagePlane, boxes: Sequence[AnnotatedBox], cfg: TrainConfig,
                  rng: np.random.Generator, scales: Sequence = None):
    """Descriptors and labels from one image."""
    scales = list(scales or enumerate_scales())
    fmaps = {s: f for s, f in feature_maps(img, scales).items() if f.height >= 8 and f.width >= 8}
    boxes = [c for c in (b.clipped(img.width, img.height) for b in boxes) if c is not None]
    feats, labels = [], []
    for b in boxes:
        s = assign_scale(b, cfg.positive_iou, scales)
        if s is None or s not in fmaps:
            continue
        fm = fmaps[s]
        cy, cx = _aligned_cell(b, s, fm.height - 7, fm.width - 7)
        if iou(box_of_cell(s, cy, cx), b.xywh) < cfg.positive_iou:
            continue
        feats.append(fm.data[cy : cy + 8, cx : cx + 8].reshape(DIM))
        labels.append(1)

    avail = list(fmaps)
    gt = np.array([b.xywh for b in boxes], dtype=np.float64).reshape(-1, 4)
    want, tries = cfg.negatives_per_image, 0
    got = 0
    while got < want and avail and tries < 50 * want:
        tries += 1
        s = avail[rng.integers(len(avail))]
        fm = fmaps[s]
        cy = int(rng.integers(fm.height - 7))
        cx = int(rng.integers(fm.width - 7))
        if len(gt) and iou_matrix([box_of_cell(s, cy, cx)], gt).max() >= NEGATIVE_MAX_IOU:
            continue
        feats.append(fm.data[cy : cy + 8, cx : cx + 8].reshape(DIM))
        labels.append(-1)
        got += 1
    return feats, labels


def extract_samples(images: Sequence[ImagePlane], annotations: Sequence[Sequence[AnnotatedBox]],
                    cfg: TrainConfig = TrainConfig(), scales: Sequence = None):
    """Stack samples over images; returns ``(X, y)`` with X ``(n, 64)`` uint8, y in {-1, +1}."""
    rng = np.random.default_rng(cfg.seed)
    feats, labels = [], []
    for img, boxes in zip(images, annotations):
        f, l = image_samples(img, boxes, cfg, rng, scales)
        feats.extend(f)
        labels.extend(l)
    y = np.array(labels, dtype=np.int8)
    if not np.any(y == 1):
        raise BihlError("no-positives", "no annotated box matches any template scale")
    X = np.array(feats, dtype=np.uint8).reshape(-1, DIM)
    return X, y


def _sgd_hinge(X: np.ndarray, y: np.ndarray, cfg: TrainConfig, history: list = None) -> np.ndarray:
    classes = set(np.unique(y).tolist())
    if classes != {-1.0, 1.0}:
        raise BihlError("single-class", "training needs both positive and negative samples")
    n, dim = X.shape
    if cfg.balance_classes:
        n_pos = np.count_nonzero(y > 0)
        cw = np.where(y > 0, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    else:
        cw = np.ones(n)
    reg = 1.0 / (cfg.C * n)
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(dim)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb, cb = X[idx], y[idx], cw[idx]
            active = yb * (xb @ w) < 1.0
            grad = reg * w
            if active.any():
                grad = grad - (cb[active] * yb[active]) @ xb[active] / len(idx)
            w -= cfg.lr * grad
        if history is not None:
            hinge = np.maximum(0.0, 1.0 - y * (X @ w))
            history.append(float(0.5 * reg * (w @ w) + np.mean(cw * hinge)))
    return w


def train_linear(X, y, cfg: TrainConfig = TrainConfig(), history: list = None) -> np.ndarray:
    """Hinge-loss linear SVM through the origin, mini-batch subgradient descent.

    Features are scaled to [0, 1] for the optimizer; the returned weights act
    on raw byte descriptors.  ``history`` receives the objective per epoch.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, DIM) / 255.0
    y = np.asarray(y, dtype=np.float64).ravel()
    return _sgd_hinge(X, y, cfg, history) / 255.0


def train_model(images, annotations, cfg: TrainConfig = TrainConfig(), ng: int = DEFAULT_NG,
                na: int = DEFAULT_NA, scales: Sequence = None, history: list = None):
    """Samples -> linear weights -> binarized model.  Returns ``(model, (X, y))``."""
    X, y = extract_samples(images, annotations, cfg, scales)
    log.info("samples: %d positive, %d negative", int((y > 0).sum()), int((y < 0).sum()))
    w = train_linear(X, y, cfg, history)
    return decompose(w, na, ng), (X, y)


def fit_calibration(model: BinarizedModel, images, annotations, cfg: TrainConfig = TrainConfig(),
                    proposer_cfg=None, scales: Sequence = None) -> BinarizedModel:
    """Per-scale affine rescaling of scores, fitted as a 1-d hinge classifier.

    For each scale, windows surviving the proposer's filters are labelled by
    IoU >= ``cfg.positive_iou`` against the ground truth and ``[score, 1]``
    is fitted with :func:`train_linear`.  Scales without both labels keep the
    identity map.
    """
    from .proposer import ProposerConfig, score_pyramid

    proposer_cfg = proposer_cfg or ProposerConfig()
    per_scale: Dict[ScaleSpec, Tuple[list, list]] = {}
    for img, boxes in zip(images, annotations):
        gt = np.array([b.xywh for b in boxes], dtype=np.float64).reshape(-1, 4)
        for s, mat in score_pyramid(img, model.with_calibration(None), proposer_cfg, scales).items():
            cy, cx = np.nonzero(np.isfinite(mat) & (mat >= proposer_cfg.tc))
            if cy.size == 0:
                continue
            cells = np.stack([(2 * cx) << s.n, (2 * cy) << s.m,
                              np.full_like(cx, TEMPLATE << s.n), np.full_like(cy, TEMPLATE << s.m)], 1)
            lab = (iou_matrix(cells, gt).max(axis=1) >= cfg.positive_iou) if len(gt) else np.zeros(cy.size, bool)
            xs, ys = per_scale.setdefault(s, ([], []))
            xs.extend(mat[cy, cx].tolist())
            ys.extend(np.where(lab, 1, -1).tolist())
    calib = {}
    for s, (xs, ys) in per_scale.items():
        ys = np.array(ys)
        if not (np.any(ys > 0) and np.any(ys < 0)):
            continue
        xs = np.array(xs)
        scale = max(np.abs(xs).max(), 1e-12)
        ab = _sgd_hinge(np.stack([xs / scale, np.ones_like(xs)], 1), ys.astype(np.float64), cfg)
        calib[s] = (float(ab[0] / scale), float(ab[1]))
    return model.with_calibration(calib)
