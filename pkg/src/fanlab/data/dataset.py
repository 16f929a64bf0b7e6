"""Samples and the tab-separated dataset manifest."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from ..errors import DataError
from ..landmarks import BoundingBox, LandmarkSet, bbox_from_landmarks
from .pts import read_pts

MANIFEST_NAME = "manifest.tsv"


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    landmarks: LandmarkSet
    bbox: BoundingBox | None = None
    yaw: float | None = None
    id: str = ""

    def __post_init__(self):
        if self.bbox is None:
            self.bbox = bbox_from_landmarks(self.landmarks)

    def with_(self, **changes) -> "Sample":
        return replace(self, **changes)


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    landmarks: str
    depth: str | None = None
    yaw: float | None = None

    def to_line(self) -> str:
        yaw = "" if self.yaw is None else repr(float(self.yaw))
        return "\t".join([self.image, self.landmarks, self.depth or "", yaw])

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> "ManifestRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) < 2 or len(parts) > 4:
            raise DataError(f"manifest line {lineno}: expected 2-4 tab-separated fields, got {len(parts)}")
        parts += [""] * (4 - len(parts))
        try:
            yaw = float(parts[3]) if parts[3] else None
        except ValueError:
            raise DataError(f"manifest line {lineno}: bad yaw {parts[3]!r}") from None
        return cls(parts[0], parts[1], parts[2] or None, yaw)


def write_manifest(path, records) -> None:
    text = "".join(r.to_line() + "\n" for r in records)
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    lines = path.read_text(encoding="utf-8").split("\n")
    return [ManifestRecord.from_line(l, i + 1) for i, l in enumerate(lines) if l.strip()]


def read_depth(path) -> np.ndarray:
    lines = [l for l in Path(path).read_text(encoding="utf-8").split("\n") if l.strip()]
    try:
        return np.array([float(l) for l in lines])
    except ValueError as exc:
        raise DataError(f"{path}: bad depth value ({exc})") from None


def write_depth(path, z) -> None:
    Path(path).write_text("".join(repr(float(v)) + "\n" for v in z), encoding="utf-8", newline="\n")


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return (img[:, :, ::-1].astype(np.float32) / 255.0)


def write_image(path, image: np.ndarray) -> None:
    img = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)[:, :, ::-1]
    if not cv2.imwrite(str(path), img):
        raise DataError(f"cannot write image {path}")


def load_sample(record: ManifestRecord, root, require_depth: bool = False) -> Sample:
    root = Path(root)
    landmarks = read_pts(root / record.landmarks)
    if record.depth is not None:
        z = read_depth(root / record.depth)
        if len(z) != len(landmarks):
            raise DataError(f"{record.depth}: {len(z)} depth values for {len(landmarks)} landmarks")
        landmarks = LandmarkSet(np.column_stack([landmarks.xy, z]), landmarks.visible)
    elif require_depth:
        raise DataError(f"{record.landmarks}: missing depth sidecar")
    image = read_image(root / record.image)
    return Sample(image, landmarks, yaw=record.yaw, id=Path(record.image).stem)


def load_dataset(manifest, require_depth: bool = False) -> list[Sample]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    return [load_sample(r, manifest.parent, require_depth) for r in read_manifest(manifest)]


def split_train_val(items: list, val_fraction: float = 0.1) -> tuple[list, list]:
    """The last ``val_fraction`` of manifest order is held out."""
    n_val = max(1, int(round(len(items) * val_fraction))) if len(items) > 1 else 0
    return items[:len(items) - n_val], items[len(items) - n_val:]
