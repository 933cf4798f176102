"""Patch preprocessing: bicubic short-side resize to 256, center crop 224,
scale to [0, 1], ImageNet mean/std normalization.

This mirrors the recipe used on the navigation side; the cross-component
golden test pins agreement to 1e-5 per element. Some published encoders
expect different crops; this bridge applies exactly this recipe and nothing
else.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

RESIZE_SHORT = 256
CROP = 224
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def preprocess_patch(patch: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 patch -> normalized float32 3x224x224 grid."""
    h, w = patch.shape[:2]
    if h < CROP or w < CROP:
        raise ValueError(f"patch {w}x{h} too small, need at least {CROP} per side")
    if w <= h:
        ow, oh = RESIZE_SHORT, int(RESIZE_SHORT * h / w)
    else:
        ow, oh = int(RESIZE_SHORT * w / h), RESIZE_SHORT
    img = Image.fromarray(np.ascontiguousarray(patch)).resize((ow, oh), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32)
    top = int(round((oh - CROP) / 2.0))
    left = int(round((ow - CROP) / 2.0))
    arr = arr[top : top + CROP, left : left + CROP]
    arr /= 255.0
    arr = (arr - MEAN) / STD
    return arr.transpose(2, 0, 1)
