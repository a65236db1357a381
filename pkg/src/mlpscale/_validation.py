"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, image_shape=None) -> np.ndarray:
    """Coerce ``X`` to a uint8 N x h x w x c batch.

    Accepts 4-D image batches, 3-D grayscale batches, or flat N x d rows
    when ``image_shape`` says how to fold them. Values must be integers in
    [0, 255].
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=None)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError("flat input needs image_shape=(h, w, c)")
        image_shape = tuple(image_shape)
        if X.shape[1] != int(np.prod(image_shape)):
            raise ValueError(f"rows of length {X.shape[1]} cannot be folded into {image_shape}")
        X = X.reshape((len(X),) + image_shape)
    elif X.ndim == 3:
        X = X[..., None]
    elif X.ndim != 4:
        raise ValueError(f"expected images of rank 2, 3 or 4, got shape {X.shape}")
    if image_shape is not None and X.shape[1:] != tuple(image_shape):
        raise ValueError(f"images of shape {X.shape[1:]} do not match image_shape {tuple(image_shape)}")
    if X.dtype != np.uint8:
        if np.any(X < 0) or np.any(X > 255) or np.any(X != np.round(X)):
            raise ValueError("pixel values must be integers in [0, 255]")
        X = X.astype(np.uint8)
    return X


def check_compute(C) -> np.ndarray:
    C = check_array(np.asarray(C, dtype=np.float64).reshape(-1, 1) if np.ndim(C) == 1 else C,
                    dtype=np.float64)
    if C.shape[1] != 1:
        raise ValueError("compute must be a single feature column")
    C = C.ravel()
    if np.any(C <= 0):
        raise ValueError("compute values must be positive")
    return C
