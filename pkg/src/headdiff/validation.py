"""Input validation helpers shared by the estimators and free functions."""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes do not match what an operation expects."""


class EmptyInputError(ValueError):
    pass


def check_frame(frame, n_landmarks=None, name="frame"):
    """Return ``frame`` as a float64 (L, 3) array, raising on bad input."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"{name} must have shape (L, 3), got {arr.shape}")
    if arr.shape[0] < 4:
        raise ShapeError(f"{name} needs at least 4 landmarks, got {arr.shape[0]}")
    if n_landmarks is not None and arr.shape[0] != n_landmarks:
        raise ShapeError(f"{name} has {arr.shape[0]} landmarks, expected {n_landmarks}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_sequence(points, name="sequence", min_length=1):
    """Return a float64 (T, L, 3) array with at least ``min_length`` frames."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] % 3 == 0:
        arr = arr.reshape(arr.shape[0], -1, 3)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"{name} must have shape (T, L, 3), got {arr.shape}")
    if arr.shape[0] < min_length:
        if arr.shape[0] == 0:
            raise EmptyInputError(f"{name} is empty")
        raise ShapeError(f"{name} needs at least {min_length} frames, got {arr.shape[0]}")
    return arr


def check_same_shape(a, b, names=("pred", "gt")):
    if a.shape != b.shape:
        raise ShapeError(f"{names[0]} shape {a.shape} != {names[1]} shape {b.shape}")


def check_image(img, factor=None, name="image"):
    """Validate an (H, W, 3) float image; optionally require divisibility by ``factor``."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if factor is not None and (arr.shape[0] % factor or arr.shape[1] % factor):
        raise ShapeError(f"{name} size {arr.shape[:2]} not divisible by factor {factor}")
    return arr


def check_random_state(seed):
    """Turn ``seed`` into a ``np.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
