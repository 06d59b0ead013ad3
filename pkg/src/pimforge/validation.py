"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d


def check_images(X, input_shape=None) -> np.ndarray:
    """Return ``X`` as float64 ``(n, C, H, W)``.

    Accepts ``(n, C, H, W)``, ``(n, H, W)`` (single channel) or flattened
    ``(n, C*H*W)`` rows when ``input_shape`` is given.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if input_shape is not None:
        input_shape = tuple(int(v) for v in input_shape)
        if X[0].size != int(np.prod(input_shape)):
            raise ValueError(
                f"samples have {X[0].size} values, expected {int(np.prod(input_shape))} for shape {input_shape}"
            )
        return X.reshape((X.shape[0],) + input_shape)
    if X.ndim == 3:
        return X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected image batch (n, C, H, W), got shape {X.shape}")
    return X


def check_images_labels(X, y, input_shape=None):
    X = check_images(X, input_shape)
    y = column_or_1d(y, warn=True)
    check_consistent_length(X, y)
    return X, y

