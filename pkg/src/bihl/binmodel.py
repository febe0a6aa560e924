"""Bit-plane descriptors, signed-binary model decomposition and bitwise scoring.

An 8x8 window of HL bytes is approximated by its top ``ng`` bit planes, each
packed into one 64-bit word (bit ``j`` = window element ``row * 8 + col``).
The 64-d linear model ``w`` is approximated greedily by ``na`` terms
``lambda_i * (2 * nu_i - 1)`` with binary ``nu_i``.  The dot product of the
two approximations then needs only AND and popcount::

    score = sum_i lambda_i * sum_k 2**(8-k) * (2*popcnt(nu_i & b_k) - popcnt(b_k))
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BihlError
from .hlfeat import HlFeatureMap
from .imgpyr import ScaleSpec, check_scale

DIM = 64
WIN = 8
DEFAULT_NG = 4
DEFAULT_NA = 2
MAX_NA = 64
FORMAT = "bihl-model"
VERSION = 1


def _check_ng(ng: int):
    if not 1 <= ng <= 8:
        raise BihlError("out-of-range", "ng must be in 1..8")


def _check_na(na: int):
    if not 1 <= na <= MAX_NA:
        raise BihlError("out-of-range", f"na must be in 1..{MAX_NA}")


def pack_bits(bits) -> int:
    """Pack 64 zero/one values into an int, element ``j`` at bit ``j``."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(DIM)
    return int(np.packbits(bits, bitorder="little").view("<u8")[0])


def unpack_bits(word: int) -> np.ndarray:
    raw = np.array([word], dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, bitorder="little")


@dataclass(frozen=True)
class BinarizedPatch:
    planes: Tuple[int, ...]

    @property
    def ng(self) -> int:
        return len(self.planes)

    def reconstruct(self) -> np.ndarray:
        """Byte values implied by the kept planes (truncation toward zero)."""
        out = np.zeros(DIM, dtype=np.int64)
        for k, word in enumerate(self.planes, start=1):
            out += unpack_bits(word).astype(np.int64) << (8 - k)
        return out


def descriptor(fmap: HlFeatureMap, y: int, x: int) -> np.ndarray:
    if not (0 <= y <= fmap.height - WIN and 0 <= x <= fmap.width - WIN):
        raise BihlError("oob", f"window ({y}, {x}) outside {fmap.width}x{fmap.height} map")
    return fmap.data[y : y + WIN, x : x + WIN].reshape(DIM)


def binarize_values(values, ng: int = DEFAULT_NG) -> BinarizedPatch:
    _check_ng(ng)
    values = np.asarray(values, dtype=np.uint8).reshape(DIM)
    return BinarizedPatch(tuple(pack_bits((values >> (8 - k)) & 1) for k in range(1, ng + 1)))


def binarize_patch(fmap: HlFeatureMap, y: int, x: int, ng: int = DEFAULT_NG) -> BinarizedPatch:
    _check_ng(ng)
    return binarize_values(descriptor(fmap, y, x), ng)


@dataclass(frozen=True, eq=False)
class BinarizedModel:
    """Linear objectness model with its signed-binary approximation.

    ``basis`` holds ``(lambda_i, nu_i)`` pairs, ``nu_i`` a 64-bit int whose set
    bits mark the +1 entries of the i-th {-1, +1} basis vector.
    ``calibration`` optionally maps a scale to an affine ``(a, b)`` applied to
    raw scores of that scale.
    """

    w: np.ndarray
    basis: Tuple[Tuple[float, int], ...]
    ng: int = DEFAULT_NG
    calibration: Optional[Dict[ScaleSpec, Tuple[float, float]]] = field(default=None)

    def __post_init__(self):
        _check_ng(self.ng)
        _check_na(len(self.basis))
        w = np.asarray(self.w, dtype=np.float64).reshape(DIM)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "basis", tuple((float(l), int(b)) for l, b in self.basis))

    @property
    def na(self) -> int:
        return len(self.basis)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([l for l, _ in self.basis], dtype=np.float64)

    @property
    def words(self) -> np.ndarray:
        return np.array([b for _, b in self.basis], dtype=np.uint64)

    def approx_weights(self) -> np.ndarray:
        """Sum of ``lambda_i * nu_i`` as a dense 64-vector."""
        out = np.zeros(DIM)
        for lam, word in self.basis:
            out += lam * (2.0 * unpack_bits(word) - 1.0)
        return out

    def with_calibration(self, calibration) -> "BinarizedModel":
        return BinarizedModel(self.w, self.basis, self.ng, calibration)

    def __eq__(self, other):
        if not isinstance(other, BinarizedModel):
            return NotImplemented
        return (
            np.array_equal(self.w, other.w)
            and self.basis == other.basis
            and self.ng == other.ng
            and self.calibration == other.calibration
        )


def decompose(w, na: int = DEFAULT_NA, ng: int = DEFAULT_NG, residuals: list = None) -> BinarizedModel:
    """Greedy residual approximation of ``w`` by ``na`` signed-binary vectors.

    If ``residuals`` is a list, the residual L2 norm before the first step and
    after every step is appended to it.
    """
    _check_na(na)
    r = np.asarray(w, dtype=np.float64).reshape(DIM).copy()
    if residuals is not None:
        residuals.append(float(np.linalg.norm(r)))
    basis = []
    for _ in range(na):
        plus = r > 0  # exact zeros go to -1
        nu = np.where(plus, 1.0, -1.0)
        lam = float(r @ nu) / DIM
        r -= lam * nu
        basis.append((lam, pack_bits(plus)))
        if residuals is not None:
            residuals.append(float(np.linalg.norm(r)))
    return BinarizedModel(np.asarray(w, dtype=np.float64), tuple(basis), ng)


def score_patch(model: BinarizedModel, patch: BinarizedPatch) -> float:
    if patch.ng != model.ng:
        raise BihlError("config-mismatch", f"patch has {patch.ng} planes, model expects {model.ng}")
    counts = [b.bit_count() for b in patch.planes]
    total = 0.0
    for lam, nu in model.basis:
        acc = 0
        for k, (b, cb) in enumerate(zip(patch.planes, counts)):
            acc += (2 * (nu & b).bit_count() - cb) << (7 - k)
        total += lam * acc
    return total


# --- persistence ------------------------------------------------------------

def _finite(x: float, what: str) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise BihlError("malformed", f"{what} is not finite")
    return x


def model_to_dict(model: BinarizedModel, scales: Sequence) -> dict:
    scales = [check_scale(s) for s in scales]
    if model.calibration is None:
        calibration = None
    else:
        calibration = [list(model.calibration.get(s, (1.0, 0.0))) for s in scales]
    return {
        "format": FORMAT,
        "version": VERSION,
        "ng": model.ng,
        "na": model.na,
        "w": [_finite(v, "w") for v in model.w],
        "basis": [{"lambda": _finite(l, "lambda"), "bits": f"{b:016x}"} for l, b in model.basis],
        "scales": [[s.m, s.n] for s in scales],
        "calibration": calibration,
    }


def model_from_dict(doc) -> Tuple[BinarizedModel, List[ScaleSpec]]:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise BihlError("malformed", "not a bihl-model document")
    if doc.get("version") != VERSION:
        raise BihlError("unsupported-version", f"version {doc.get('version')!r}")
    try:
        ng, na = doc["ng"], doc["na"]
        w, basis, scales = doc["w"], doc["basis"], doc["scales"]
        calibration = doc.get("calibration")
    except KeyError as exc:
        raise BihlError("malformed", f"missing field {exc.args[0]!r}") from None
    if not isinstance(ng, int) or not isinstance(na, int):
        raise BihlError("malformed", "ng and na must be integers")
    _check_ng(ng)
    _check_na(na)
    if not isinstance(w, list) or len(w) != DIM:
        raise BihlError("malformed", f"w must hold {DIM} numbers")
    if not isinstance(basis, list) or len(basis) != na:
        raise BihlError("malformed", "basis length must equal na")
    pairs = []
    try:
        for item in basis:
            bits = item["bits"]
            if not (isinstance(bits, str) and len(bits) == 16 and bits == bits.lower()):
                raise BihlError("malformed", f"bad bits field {bits!r}")
            pairs.append((_finite(item["lambda"], "lambda"), int(bits, 16)))
        weights = [_finite(v, "w") for v in w]
        scale_list = [check_scale(s) for s in scales]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BihlError):
            raise
        raise BihlError("malformed", str(exc)) from None
    calib = None
    if calibration is not None:
        if not isinstance(calibration, list) or len(calibration) != len(scale_list):
            raise BihlError("malformed", "calibration must align with scales")
        try:
            calib = {
                s: (_finite(a, "calibration"), _finite(b, "calibration"))
                for s, (a, b) in zip(scale_list, calibration)
            }
        except (TypeError, ValueError) as exc:
            raise BihlError("malformed", str(exc)) from None
    return BinarizedModel(np.array(weights), tuple(pairs), ng, calib), scale_list


def save_model(model: BinarizedModel, scales: Sequence, path) -> None:
    doc = model_to_dict(model, scales)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def load_model(path) -> Tuple[BinarizedModel, List[ScaleSpec]]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BihlError("malformed", f"{path}: {exc}") from None
    return model_from_dict(doc)
