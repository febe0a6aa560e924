"""Image ingestion, grayscale conversion and the fixed-ratio pyramid.

The pyramid is anisotropic: a scale ``(m, n)`` shrinks rows by ``2**m`` and
columns by ``2**n``.  Only the 17 ratio pairs returned by
:func:`enumerate_scales` are ever used.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Tuple

import numpy as np

from .errors import BihlError

MAX_DIM = 10_000
MAX_LOG2 = 4


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """8-bit single-channel raster, stored as a ``(height, width)`` uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        data = self.data
        if not isinstance(data, np.ndarray) or data.ndim != 2:
            raise BihlError("bad-image", "expected a 2-D array")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise BihlError("bad-image", "zero-dimension image")
        if data.dtype != np.uint8:
            if data.size and (data.min() < 0 or data.max() > 255):
                raise BihlError("bad-image", "values outside 0..255")
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", np.ascontiguousarray(data))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ImagePlane):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ImagePlane({self.width}x{self.height})"


class ScaleSpec(NamedTuple):
    """Row/column log2 downsampling ratio."""

    m: int
    n: int

    @property
    def row_factor(self) -> int:
        return 1 << self.m

    @property
    def col_factor(self) -> int:
        return 1 << self.n


def is_valid_scale(m: int, n: int) -> bool:
    if (m, n) == (4, 3):
        return True
    return 0 <= m <= 3 and 0 <= n <= MAX_LOG2 and abs(n - m) <= 2


def enumerate_scales() -> List[ScaleSpec]:
    """All admissible ``(m, n)`` ratio pairs in lexicographic order."""
    return [
        ScaleSpec(m, n)
        for m in range(MAX_LOG2 + 1)
        for n in range(MAX_LOG2 + 1)
        if is_valid_scale(m, n)
    ]


def check_scale(s) -> ScaleSpec:
    s = ScaleSpec(int(s[0]), int(s[1]))
    if not is_valid_scale(*s):
        raise BihlError("bad-scale", f"{tuple(s)} is not an admissible ratio pair")
    return s


def to_grayscale(rgb) -> ImagePlane:
    """Rec. 601 luma, rounded half away from zero (exact integer arithmetic)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise BihlError("bad-image", "expected an (h, w, 3) raster")
    if rgb.shape[0] == 0 or rgb.shape[1] == 0:
        raise BihlError("bad-image", "zero-dimension image")
    c = rgb.astype(np.int64)
    weighted = 299 * c[..., 0] + 587 * c[..., 1] + 114 * c[..., 2]
    luma = (2 * weighted + 1000) // 2000
    return ImagePlane(np.clip(luma, 0, 255).astype(np.uint8))


def _round_mean(sums: np.ndarray, count: int) -> np.ndarray:
    # sums are non-negative, so floor((2s + c) / 2c) rounds half away from zero
    return ((2 * sums + count) // (2 * count)).astype(np.uint8)


def downsample(img: ImagePlane, s) -> ImagePlane:
    """Block-mean downsampling by ``2**m`` rows and ``2**n`` columns.

    Trailing rows/columns that do not fill a whole block are dropped.
    """
    m, n = check_scale(s)
    fy, fx = 1 << m, 1 << n
    if img.height < fy or img.width < fx:
        raise BihlError("scale-too-large", f"{img.width}x{img.height} image, scale {tuple(s)}")
    if fy == 1 and fx == 1:
        return img
    h, w = img.height // fy, img.width // fx
    blocks = img.data[: h * fy, : w * fx].reshape(h, fy, w, fx)
    sums = blocks.sum(axis=(1, 3), dtype=np.int64)
    return ImagePlane(_round_mean(sums, fy * fx))


def pyramid(img: ImagePlane, scales: Iterable = None) -> Dict[ScaleSpec, ImagePlane]:
    """Downsample to every requested scale that fits the image.

    Block sums are built by repeated pairwise halving, so the whole pyramid
    costs a small multiple of one full-resolution pass.  Results equal
    :func:`downsample` exactly.
    """
    scales = enumerate_scales() if scales is None else [ScaleSpec(*s) for s in scales]
    row_sums = {0: img.data.astype(np.uint32)}
    out: Dict[ScaleSpec, ImagePlane] = {}
    for s in scales:
        m, n = s
        if img.height >> m < 1 or img.width >> n < 1:
            continue
        for k in range(1, m + 1):
            if k not in row_sums:
                prev = row_sums[k - 1]
                h = prev.shape[0] // 2
                row_sums[k] = prev[0 : 2 * h : 2] + prev[1 : 2 * h : 2]
        sums = row_sums[m]
        for _ in range(n):
            w = sums.shape[1] // 2
            sums = sums[:, 0 : 2 * w : 2] + sums[:, 1 : 2 * w : 2]
        out[s] = img if m == 0 and n == 0 else ImagePlane(_round_mean(sums, 1 << (m + n)))
    return out


# --- file I/O ---------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise BihlError("bad-image", "truncated PNM header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) with maxval 255."""
    tokens, offset = _pnm_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise BihlError("bad-image", f"unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise BihlError("bad-image", "non-numeric PNM header") from None
    if maxval != 255:
        raise BihlError("bad-image", "only 8-bit PNM (maxval 255) is supported")
    _check_dims(w, h)
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    if len(buf) - offset < need:
        raise BihlError("bad-image", "truncated PNM raster")
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return raster.reshape((h, w) if channels == 1 else (h, w, 3))


def encode_pgm(img: ImagePlane) -> bytes:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.data.tobytes()


def _check_dims(w: int, h: int):
    if w < 1 or h < 1:
        raise BihlError("bad-image", "zero-dimension image")
    if w > MAX_DIM or h > MAX_DIM:
        raise BihlError("image-too-large", f"{w}x{h} exceeds {MAX_DIM}x{MAX_DIM}")


def read_image(path) -> ImagePlane:
    """Load PGM/PPM natively; PNG (and JPEG) through Pillow.  Color is reduced to luma."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] in (b"P5", b"P6"):
        arr = decode_pnm(buf)
    else:
        from PIL import Image

        Image.MAX_IMAGE_PIXELS = MAX_DIM * MAX_DIM
        try:
            with Image.open(io.BytesIO(buf)) as pil:
                _check_dims(*pil.size)
                if pil.mode not in ("L", "RGB"):
                    pil = pil.convert("RGB")
                arr = np.asarray(pil)
        except BihlError:
            raise
        except Exception as exc:
            raise BihlError("bad-image", f"{path}: {exc}") from None
    if arr.ndim == 3:
        return to_grayscale(arr)
    return ImagePlane(arr)


def write_pgm(img: ImagePlane, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))


def write_image(img: ImagePlane, path) -> None:
    """Write by extension: ``.pgm`` natively, anything else through Pillow."""
    path = os.fspath(path)
    if path.lower().endswith(".pgm"):
        write_pgm(img, path)
        return
    from PIL import Image

    Image.fromarray(img.data).save(path)
