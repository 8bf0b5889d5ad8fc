"""Frozen synthetic feature extractor standing in for a learned image encoder."""

import numpy as np
from scipy.ndimage import correlate

from src.errors import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])
BLUR = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

CHANNELS = ("r", "g", "b", "blur", "sobel_x", "sobel_y", "laplacian", "gray")
N_CHANNELS = len(CHANNELS)


def extract_features(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image in [0, 1] to a (C, H, W) feature map, C = 8.

    Borders replicate the nearest pixel.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"Expected an (H, W, 3) image, got {image.shape}")
    gray = image @ LUMA
    filtered = [correlate(gray, kernel, mode="nearest") for kernel in (BLUR, SOBEL_X, SOBEL_Y, LAPLACIAN)]
    return np.stack([image[..., 0], image[..., 1], image[..., 2], *filtered, gray])


def extract_batch(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) to (N, C, H, W)."""
    return np.stack([extract_features(img) for img in images])
