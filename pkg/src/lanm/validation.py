"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_observations(X, n_features=None) -> np.ndarray:
    """2-D finite float64 array, optionally with a fixed column count."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=1)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def check_segments(u, n_rows: int, n_segments=None):
    """Accept segment labels (ints) or a one-hot matrix; return ``(labels, one_hot)``.

    When ``n_segments`` is ``None`` it is inferred as ``max(label) + 1``.
    """
    if u is None:
        raise ValueError("segment labels are required")
    arr = np.asarray(u)
    if arr.ndim == 2 and arr.shape[1] > 1:
        if not np.isin(arr, (0, 1)).all() or not np.all(arr.sum(axis=1) == 1):
            raise ValueError("one-hot segment matrix must have exactly one 1 per row")
        labels = np.argmax(arr, axis=1)
        width = arr.shape[1]
    else:
        arr = arr.ravel()
        if arr.dtype.kind == "f":
            if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
                raise ValueError("segment labels must be integers")
        elif arr.dtype.kind not in "iu":
            raise ValueError(f"segment labels must be integers, got dtype {arr.dtype}")
        labels = arr.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise ValueError("segment labels must be non-negative")
        width = int(labels.max()) + 1 if labels.size else 0
    if labels.shape[0] != n_rows:
        raise ValueError(f"got {labels.shape[0]} segment labels for {n_rows} rows")
    M = width if n_segments is None else int(n_segments)
    if labels.size and labels.max() >= M:
        raise ValueError(f"segment label {labels.max()} out of range for {M} segments")
    if width > M:
        raise ValueError(f"one-hot width {width} exceeds {M} segments")
    one_hot = np.zeros((n_rows, M))
    one_hot[np.arange(n_rows), labels] = 1.0
    return labels, one_hot


def check_latents(z, name="z") -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if z.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} contains non-finite values")
    return z
