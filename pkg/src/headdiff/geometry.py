"""Landmark containers, rigid pose transforms and per-video normalization.

Landmark frames are plain ``(L, 3)`` float arrays; sequences are ``(T, L, 3)``.
Poses map canonical points into image space as ``scale * R @ p + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import EmptyInputError, ShapeError, check_frame, check_sequence

DEFAULT_EPS = 1e-8


class InvalidPoseError(ValueError):
    pass


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "scale", float(self.scale))
        self.validate()

    def validate(self):
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidPoseError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.translation))):
            raise InvalidPoseError("pose contains non-finite values")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6, rtol=0):
            raise InvalidPoseError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise InvalidPoseError("rotation has det != +1")
        if not self.scale > 0:
            raise InvalidPoseError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def from_euler(cls, angles, translation=(0.0, 0.0, 0.0), scale=1.0, seq="yxz"):
        """Build a pose from (yaw, pitch, roll) radians."""
        rot = Rotation.from_euler(seq, angles).as_matrix()
        return cls(rot, np.asarray(translation, dtype=np.float64), scale)

    def as_array(self):
        """Flatten to 13 floats: 9 rotation, 3 translation, 1 scale."""
        return np.concatenate([self.rotation.ravel(), self.translation, [self.scale]])

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (13,):
            raise InvalidPoseError(f"pose array must have 13 entries, got {arr.shape}")
        return cls(arr[:9].reshape(3, 3), arr[9:12], arr[12])


@dataclass
class LandmarkSequence:
    """``points`` has shape (T, L, 3); ``fps`` is frames per second."""

    points: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        self.points = check_sequence(self.points, "LandmarkSequence")
        if self.points.shape[1] < 4:
            raise ShapeError("LandmarkSequence needs at least 4 landmarks")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    def __len__(self):
        return self.points.shape[0]

    def __getitem__(self, i):
        return self.points[i]

    @property
    def n_landmarks(self):
        return self.points.shape[1]

    @property
    def frames(self):
        return list(self.points)

    def flat(self):
        """(T, 3L) view used as the diffusion state."""
        return self.points.reshape(len(self), -1)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.std):
            raise ShapeError("mean and std must share a shape")
        if np.any(np.asarray(self.std) < 0):
            raise ValueError("std must be non-negative")


def apply_pose(frame, pose: RigidPose):
    """Map canonical points into pose space: ``scale * R p + t``."""
    pose.validate()
    pts = np.asarray(frame, dtype=np.float64)
    return pose.scale * pts @ pose.rotation.T + pose.translation


def canonicalize(frame, pose: RigidPose, remove_scale=True):
    """Invert ``pose`` on ``frame``.

    With ``remove_scale=False`` only rotation and translation are undone, and the
    result stays in the posed scale.
    """
    pose.validate()
    pts = np.asarray(frame, dtype=np.float64)
    out = (pts - pose.translation) @ pose.rotation
    if remove_scale:
        out = out / pose.scale
    return out


def apply_poses(points, poses):
    """Vectorized :func:`apply_pose` over a (T, L, 3) sequence and T poses."""
    pts = check_sequence(points)
    if len(poses) != pts.shape[0]:
        raise ShapeError(f"{len(poses)} poses for {pts.shape[0]} frames")
    return np.stack([apply_pose(f, p) for f, p in zip(pts, poses)])


def canonicalize_sequence(points, poses, remove_scale=True):
    pts = check_sequence(points)
    if len(poses) != pts.shape[0]:
        raise ShapeError(f"{len(poses)} poses for {pts.shape[0]} frames")
    return np.stack([canonicalize(f, p, remove_scale) for f, p in zip(pts, poses)])


def compute_stats(seq, eps=DEFAULT_EPS):
    """Per-(landmark, axis) mean and population std over the frames of ``seq``."""
    points = seq.points if isinstance(seq, LandmarkSequence) else seq
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0 or arr.shape[0] == 0:
        raise EmptyInputError("cannot compute stats of an empty sequence")
    arr = check_sequence(arr)
    return NormalizationStats(arr.mean(axis=0), arr.std(axis=0), eps)


def normalize(frame, stats: NormalizationStats):
    arr = np.asarray(frame, dtype=np.float64)
    _check_stats_shape(arr, stats)
    return (arr - stats.mean) / (stats.std + stats.eps)


def denormalize(frame, stats: NormalizationStats):
    arr = np.asarray(frame, dtype=np.float64)
    _check_stats_shape(arr, stats)
    return arr * (stats.std + stats.eps) + stats.mean


def _check_stats_shape(arr, stats):
    if arr.shape[-2:] != np.shape(stats.mean):
        raise ShapeError(f"frame shape {arr.shape} does not match stats {np.shape(stats.mean)}")


class LandmarkNormalizer(TransformerMixin, BaseEstimator):
    """Normalize canonical landmarks by per-video mean and std.

    Accepts (T, L, 3) or flattened (T, 3L) input and returns the same layout.
    """

    def __init__(self, eps=DEFAULT_EPS):
        self.eps = eps

    def fit(self, X, y=None):
        pts = check_sequence(X, "X")
        stats = compute_stats(pts, self.eps)
        self.mean_ = stats.mean
        self.std_ = stats.std
        self.n_landmarks_ = pts.shape[1]
        return self

    @property
    def stats_(self):
        check_is_fitted(self, "mean_")
        return NormalizationStats(self.mean_, self.std_, self.eps)

    def transform(self, X):
        check_is_fitted(self, "mean_")
        arr = np.asarray(X, dtype=np.float64)
        out = normalize(check_sequence(arr, "X"), self.stats_)
        return out.reshape(arr.shape)

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        arr = np.asarray(X, dtype=np.float64)
        out = denormalize(check_sequence(arr, "X"), self.stats_)
        return out.reshape(arr.shape)


__all__ = [
    "InvalidPoseError",
    "RigidPose",
    "LandmarkSequence",
    "NormalizationStats",
    "LandmarkNormalizer",
    "apply_pose",
    "apply_poses",
    "canonicalize",
    "canonicalize_sequence",
    "compute_stats",
    "normalize",
    "denormalize",
    "check_frame",
]
