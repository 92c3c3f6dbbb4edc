"""Input checks shared by the estimator API."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .bitstream import MIN_SIDE


def check_images(X, min_side: int = MIN_SIDE, copy: bool = False) -> np.ndarray:
    """Return ``X`` as float32 N x 3 x H x W in [0, 1].

    Accepts a single 3 x H x W image, channel-last N x H x W x 3 arrays, and
    uint8 pixel data (scaled by 1/255).
    """
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x) for x in X])
    X = np.asarray(X)
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    X = check_array(X, dtype=np.float32, allow_nd=True, ensure_2d=False, copy=copy,
                    ensure_all_finite=True, input_name="X")
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped N x 3 x H x W, got {X.shape}")
    if X.shape[1] != 3 and X.shape[3] == 3:
        X = np.ascontiguousarray(X.transpose(0, 3, 1, 2))
    if X.shape[1] != 3:
        raise ValueError(f"expected 3 colour channels, got shape {X.shape}")
    if min(X.shape[2:]) < min_side:
        raise ValueError(f"images must be at least {min_side}x{min_side}, got {X.shape[2]}x{X.shape[3]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y).astype(str)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} identity labels, got shape {y.shape}")
    return y


def check_fraction(name: str, value: float, low_open: bool = True) -> float:
    value = float(value)
    ok = (0 < value < 1) if low_open else (0 <= value < 1)
    if not ok:
        raise ValueError(f"{name} must lie in {'(0, 1)' if low_open else '[0, 1)'}, got {value}")
    return value
