import numpy as np
import pytest

from src.errors import ShapeError
from src.features import BLUR, CHANNELS, LAPLACIAN, LUMA, N_CHANNELS, SOBEL_X, SOBEL_Y, extract_batch, extract_features


def loop_correlate(gray, kernel):
    """Plain-loop 3x3 correlation with replicated borders."""
    h, w = gray.shape
    out = np.zeros_like(gray)
    for v in range(h):
        for u in range(w):
            acc = 0.0
            for dv in (-1, 0, 1):
                for du in (-1, 0, 1):
                    y = min(max(v + dv, 0), h - 1)
                    x = min(max(u + du, 0), w - 1)
                    acc += kernel[dv + 1, du + 1] * gray[y, x]
            out[v, u] = acc
    return out


def test_channel_layout():
    feats = extract_features(np.zeros((5, 7, 3)))
    assert feats.shape == (N_CHANNELS, 5, 7)
    assert CHANNELS[:3] == ("r", "g", "b")


def test_constant_image_has_flat_edges():
    image = np.full((6, 6, 3), [0.2, 0.4, 0.6])
    feats = extract_features(image)
    gray = float(np.array([0.2, 0.4, 0.6]) @ LUMA)
    np.testing.assert_allclose(feats[3], gray, atol=1e-12)
    np.testing.assert_allclose(feats[4:7], 0.0, atol=1e-12)
    np.testing.assert_allclose(feats[7], gray, atol=1e-12)


def test_filters_match_loop_oracle():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(9, 11, 3))
    feats = extract_features(image)
    gray = image @ LUMA
    for channel, kernel in zip(range(3, 7), (BLUR, SOBEL_X, SOBEL_Y, LAPLACIAN)):
        np.testing.assert_allclose(feats[channel], loop_correlate(gray, kernel), atol=1e-12, err_msg=CHANNELS[channel])


def test_shift_equivariance_away_from_borders():
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(12, 12, 3))
    shifted = np.roll(image, (2, 3), axis=(0, 1))
    a = extract_features(image)
    b = extract_features(shifted)
    np.testing.assert_allclose(b[:, 4:11, 5:11], a[:, 2:9, 2:8], atol=1e-12)


def test_sobel_x_sign_on_horizontal_ramp():
    ramp = np.tile(np.linspace(0.0, 1.0, 8), (8, 1))
    feats = extract_features(np.repeat(ramp[..., None], 3, axis=2))
    assert np.all(feats[4, :, 1:-1] > 0)


def test_extract_batch_and_bad_shape():
    images = np.zeros((2, 4, 4, 3))
    assert extract_batch(images).shape == (2, N_CHANNELS, 4, 4)
    with pytest.raises(ShapeError):
        extract_features(np.zeros((4, 4)))
