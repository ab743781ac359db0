"""Image preparation shared by training, evaluation, and the pipeline.

The pose model never sees a raw slice: the predicted brain mask is
dilated by a square all-ones kernel, multiplied into the image, and the
result resized to the pose input size. An empty mask means there is no
brain to regress against and is raised as a typed error so callers skip
the frame.
"""

from __future__ import annotations

import cv2
import numpy as np


class EmptyMaskError(ValueError):
    """The mask selects nothing; the frame carries no brain to work with."""


def resize_image(image: np.ndarray, out_px: int) -> np.ndarray:
    """Resize a float image to out_px x out_px (area for shrink, linear for grow)."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    if (h, w) == (out_px, out_px):
        return img.copy()
    interp = cv2.INTER_AREA if out_px < min(h, w) else cv2.INTER_LINEAR
    return cv2.resize(img, (out_px, out_px), interpolation=interp)


def resize_mask(mask: np.ndarray, out_px: int) -> np.ndarray:
    m = np.asarray(mask, dtype=np.uint8)
    if m.shape == (out_px, out_px):
        return m.copy()
    return cv2.resize(m, (out_px, out_px), interpolation=cv2.INTER_NEAREST)


def center_crop_square(image: np.ndarray) -> np.ndarray:
    h, w = image.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return image[top : top + side, left : left + side]


def letterbox_square(image: np.ndarray) -> np.ndarray:
    """Pad with zeros to a square, content centered; no aspect distortion."""
    h, w = image.shape
    side = max(h, w)
    out = np.zeros((side, side), dtype=np.float32)
    top = (side - h) // 2
    left = (side - w) // 2
    out[top : top + h, left : left + w] = image
    return out


def replicate_channels(image: np.ndarray, channels: int = 3) -> np.ndarray:
    """Grayscale (H, W) to (C, H, W) by replication."""
    img = np.asarray(image, dtype=np.float32)
    return np.repeat(img[None], channels, axis=0)


def dilate_mask(mask: np.ndarray, kernel_px: int) -> np.ndarray:
    """Binary dilation with a kernel_px x kernel_px all-ones element."""
    if kernel_px < 1:
        raise ValueError(f"kernel must be at least 1, got {kernel_px}")
    m = (np.asarray(mask) > 0).astype(np.uint8)
    kernel = np.ones((kernel_px, kernel_px), dtype=np.uint8)
    return cv2.dilate(m, kernel)


def mask_and_prepare(
    image: np.ndarray,
    pred_mask: np.ndarray,
    dilation_px: int,
    out_px: int,
) -> np.ndarray:
    """Dilate the mask, multiply it into the image, resize to the model input.

    Raises EmptyMaskError when the mask selects no pixel at all.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.shape != pred_mask.shape:
        raise ValueError(f"image {img.shape} and mask {pred_mask.shape} differ")
    mask = (np.asarray(pred_mask) > 0).astype(np.uint8)
    if mask.sum() == 0:
        raise EmptyMaskError("mask is empty; frame has no brain")
    masked = img * dilate_mask(mask, dilation_px).astype(np.float32)
    return resize_image(masked, out_px)


def prepare_unmasked(image: np.ndarray, out_px: int) -> np.ndarray:
    """The no-mask ablation arm: resize only."""
    return resize_image(np.asarray(image, dtype=np.float32), out_px)
