from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

INVISIBLE = -1.0


@dataclass
class LandmarkSet:
    """N keypoints in image pixels (x = column, y = row, pixel centres at
    integers).  ``points`` is (N, 2) or (N, 3); the optional third column is
    depth.  Invisible points are stored as (-1, -1) with ``visible`` False."""

    points: np.ndarray
    visible: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] not in (2, 3):
            raise ContractError(f"landmarks must be (N, 2) or (N, 3), got {self.points.shape}")
        if self.visible is None:
            self.visible = np.ones(len(self.points), dtype=bool)
        else:
            self.visible = np.asarray(self.visible, dtype=bool)
        if not np.all(np.isfinite(self.points[self.visible, :2])):
            raise ContractError("visible landmark coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def num_coords(self) -> int:
        return self.points.shape[1]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def z(self) -> np.ndarray | None:
        return self.points[:, 2] if self.num_coords == 3 else None

    def copy(self) -> "LandmarkSet":
        return LandmarkSet(self.points.copy(), self.visible.copy())

    def permuted(self, perm) -> "LandmarkSet":
        perm = np.asarray(perm)
        return LandmarkSet(self.points[perm], self.visible[perm])


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    @property
    def d(self) -> float:
        """Normaliser sqrt(w * h)."""
        return math.sqrt(max(self.w, 0.0) * max(self.h, 0.0))

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    @classmethod
    def full_image(cls, width: int, height: int) -> "BoundingBox":
        """The box covering every pixel (pixel centres at integers)."""
        return cls(-0.5, -0.5, float(width), float(height))

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x * s, self.y * s, self.w * s, self.h * s)


def bbox_from_landmarks(landmarks: LandmarkSet) -> BoundingBox:
    pts = landmarks.xy[landmarks.visible]
    if len(pts) == 0:
        raise DataError("cannot derive a bounding box: no visible landmarks")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    return BoundingBox(float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
