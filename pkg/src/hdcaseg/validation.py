"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .model import IGNORE_INDEX


def check_images(X, multiple: int = 8) -> np.ndarray:
    """Coerce to a float32 (n, 3, H, W) batch with H and W divisible by ``multiple``."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped (n, 3, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("got an empty image batch")
    if multiple and (X.shape[2] % multiple or X.shape[3] % multiple):
        raise ValueError(f"image height and width must be divisible by {multiple}, got {X.shape[2]}x{X.shape[3]}")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"images must be numeric, got {X.dtype}")
    if np.issubdtype(X.dtype, np.integer):
        X = X / 255.0
    X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    return X


def check_label_maps(y, X: np.ndarray | None = None, num_classes: int | None = None,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"expected label maps shaped (n, H, W), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("label maps must hold integer class ids")
    y = y.astype(np.int64)
    if X is not None and (y.shape[0] != X.shape[0] or y.shape[1:] != X.shape[2:]):
        raise ValueError(f"labels {y.shape} do not match images {X.shape}")
    valid = y[y != ignore_index]
    if valid.size and valid.min() < 0:
        raise ValueError(f"negative label value {valid.min()}")
    if num_classes is not None and valid.size and valid.max() >= num_classes:
        raise ValueError(f"label value {valid.max()} outside [0, {num_classes})")
    return y


def check_schedule(levels) -> tuple[int, ...]:
    levels = tuple(int(s) for s in (levels or ()))
    if any(s < 2 for s in levels):
        raise ValueError(f"every region count must be >= 2, got {list(levels)}")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"region schedule must be strictly increasing, got {list(levels)}")
    return levels
