"""Horizontal high-frequency (HL) feature maps.

One Haar-style analysis step: a ``[-1, 1] / 1.41`` high-pass along each row
and a ``[1, 1] / 1.41`` low-pass down each column, both with stride 2.  Each
2x2 pixel block therefore collapses to one feature cell::

    raw = (b - a + d - c) / (1.41 * 1.41)      # block [[a, b], [c, d]]

and the stored byte is ``min(255, round(|raw|))``.  The literal 1.41 (not
sqrt 2) is kept so results match the reference arithmetic bit for bit.

Cost per output cell: four loads, three add/subtracts, one multiply and one
integer divide.  No abs/max/min on the float path: the magnitude and clamp
are folded into the integer rounding below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BihlError
from .imgpyr import ImagePlane, ScaleSpec

# 1.41 * 1.41 = 19881 / 10000; round(|d| * 10000 / 19881) half away from zero
# is floor((20000 |d| + 19881) / 39762), exact in integers.
_NUM = 20000
_HALF = 19881
_DEN = 39762


@dataclass(frozen=True, eq=False)
class HlFeatureMap:
    data: np.ndarray
    scale: ScaleSpec = ScaleSpec(0, 0)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, HlFeatureMap):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.data, other.data)


def hl_response(pixels: np.ndarray) -> np.ndarray:
    """Quantized HL magnitudes of a uint8 array; output is half size, uint8."""
    h, w = pixels.shape[0] // 2, pixels.shape[1] // 2
    p = pixels[: 2 * h, : 2 * w].astype(np.int32)
    d = (p[0::2, 1::2] - p[0::2, 0::2]) + (p[1::2, 1::2] - p[1::2, 0::2])
    q = (np.abs(d) * _NUM + _HALF) // _DEN
    return np.minimum(q, 255).astype(np.uint8)


def hl_map(img: ImagePlane, s=ScaleSpec(0, 0)) -> HlFeatureMap:
    """HL map of ``img``, which is already the pyramid level ``s``; ``s`` only tags the result."""
    if img.width < 2 or img.height < 2:
        raise BihlError("too-small", f"{img.width}x{img.height} image has no 2x2 block")
    return HlFeatureMap(hl_response(img.data), ScaleSpec(*s))


def feature_image(fmap: HlFeatureMap) -> ImagePlane:
    """View a feature map as an image, e.g. for a PGM debug dump."""
    return ImagePlane(fmap.data.copy())
