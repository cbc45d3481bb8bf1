"""Input checks shared by the estimator and the protocol runner."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.utils.validation import check_consistent_length, column_or_1d

from .exceptions import DataError


def check_images(X, image_shape=None, dtype=torch.float32) -> torch.Tensor:
    """Return ``X`` as a finite (n, C, H, W) tensor, optionally matching
    ``image_shape`` = (C, H, W)."""
    arr = X.detach().cpu().numpy() if isinstance(X, torch.Tensor) else np.asarray(X, dtype=np.float64)
    if arr.ndim != 4:
        raise DataError(f"expected images of shape (n, C, H, W), got array of shape {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError("no images given")
    if image_shape is not None and tuple(arr.shape[1:]) != tuple(image_shape):
        raise DataError(f"images have shape {arr.shape[1:]}, the backbone expects {tuple(image_shape)}")
    if not np.isfinite(arr).all():
        raise DataError("images contain NaN or infinite values")
    return torch.as_tensor(arr, dtype=dtype)


def check_class_labels(y, n_samples: int | None = None) -> np.ndarray:
    """1-D object array of non-empty class-name strings."""
    y = column_or_1d(np.asarray(y, dtype=object), warn=True)
    if n_samples is not None:
        check_consistent_length(np.empty(n_samples), y)
    names = np.array([str(v) for v in y], dtype=object)
    if any(not n.strip() for n in names):
        raise DataError("class names must be non-empty strings")
    return names

