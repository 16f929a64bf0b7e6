"""Similarity cropping, training augmentation and the ablation perturbations.

Coordinates follow the pixel-centre convention: pixel (i, j) is centred at
x=j, y=i and an image of width W spans [-0.5, W-0.5].  Every image warp is
paired with the identical affine on landmark coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from ..errors import ConfigurationError, DataError
from ..landmarks import BoundingBox, LandmarkSet, bbox_from_landmarks
from .dataset import Sample
from .markup import flip_permutation


@dataclass(frozen=True)
class Affine:
    """2x3 similarity (possibly reflected) mapping original -> canonical."""

    matrix: np.ndarray

    @property
    def scale(self) -> float:
        return math.sqrt(abs(np.linalg.det(self.matrix[:, :2])))

    def apply(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "Affine":
        a = self.matrix[:, :2]
        ainv = np.linalg.inv(a)
        return Affine(np.column_stack([ainv, -ainv @ self.matrix[:, 2]]))

    def compose(self, first: "Affine") -> "Affine":
        """``self`` applied after ``first``."""
        a = self.matrix[:, :2] @ first.matrix[:, :2]
        t = self.matrix[:, :2] @ first.matrix[:, 2] + self.matrix[:, 2]
        return Affine(np.column_stack([a, t]))

    def to_canonical(self, landmarks: LandmarkSet) -> LandmarkSet:
        return _map_landmarks(landmarks, self)

    def to_original(self, landmarks: LandmarkSet) -> LandmarkSet:
        return _map_landmarks(landmarks, self.inverse())

    def map_bbox(self, bbox: BoundingBox) -> BoundingBox:
        """Box with the mapped centre and scaled sides (exact for similarities
        without rotation)."""
        cx, cy = self.apply(np.array(bbox.center))
        s = self.scale
        return BoundingBox(cx - s * bbox.w / 2, cy - s * bbox.h / 2, s * bbox.w, s * bbox.h)


def _map_landmarks(landmarks: LandmarkSet, aff: Affine) -> LandmarkSet:
    pts = landmarks.points.copy()
    vis = landmarks.visible
    pts[vis, :2] = aff.apply(pts[vis, :2])
    if pts.shape[1] == 3:
        pts[vis, 2] *= aff.scale
    return LandmarkSet(pts, vis.copy())


def warp_image(image: np.ndarray, aff: Affine, size: tuple[int, int], border=0.0) -> np.ndarray:
    """``size`` is (width, height) of the output."""
    return cv2.warpAffine(image, aff.matrix.astype(np.float64), size, flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=(border, border, border))


def crop_transform(bbox: BoundingBox, out_resolution: int, margin: float = 0.1) -> Affine:
    side = max(bbox.w, bbox.h)
    if not (np.isfinite(side) and side > 0):
        raise DataError(f"degenerate bounding box {bbox}")
    s = out_resolution / ((1 + 2 * margin) * side)
    cx, cy = bbox.center
    c_out = (out_resolution - 1) / 2
    return Affine(np.array([[s, 0.0, c_out - s * cx], [0.0, s, c_out - s * cy]]))


def crop_and_resize(sample: Sample, bbox: BoundingBox, out_resolution: int,
                    margin: float = 0.1) -> tuple[Sample, Affine]:
    """Map the margin-expanded box onto an ``out_resolution`` square."""
    aff = crop_transform(bbox, out_resolution, margin)
    image = warp_image(sample.image, aff, (out_resolution, out_resolution))
    out = Sample(image, aff.to_canonical(sample.landmarks), aff.map_bbox(sample.bbox), sample.yaw, sample.id)
    return out, aff


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    rotation: float = 50.0  # degrees, symmetric range
    scale_range: tuple[float, float] = (0.8, 1.2)
    color_jitter: float = 0.2  # per-channel multiplicative factor in [1-j, 1+j]
    occlusion_prob: float = 0.5
    occlusion_size: tuple[float, float] = (0.1, 0.3)  # fraction of image side
    seed: int = 0


FAN_AUGMENT = AugmentConfig()
GUIDED_AUGMENT = AugmentConfig(rotation=70.0, scale_range=(0.7, 1.3))
NO_AUGMENT = AugmentConfig(flip_prob=0.0, rotation=0.0, scale_range=(1.0, 1.0), color_jitter=0.0,
                           occlusion_prob=0.0)
AUGMENT_PRESETS = {"fan": FAN_AUGMENT, "guided": GUIDED_AUGMENT, "none": NO_AUGMENT}


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle: float = 0.0  # degrees, counter-clockwise on screen
    scale: float = 1.0
    jitter: tuple[float, float, float] = (1.0, 1.0, 1.0)
    occlusion: tuple[float, float, float, float] | None = None  # x0, y0, w, h as image fractions
    noise_seed: int = 0


def sample_augment(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    flip = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.rotation, cfg.rotation)) if cfg.rotation else 0.0
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    j = cfg.color_jitter
    jitter = tuple(float(v) for v in rng.uniform(1 - j, 1 + j, 3)) if j else (1.0, 1.0, 1.0)
    occlusion = None
    if rng.random() < cfg.occlusion_prob:
        w, h = rng.uniform(*cfg.occlusion_size, 2)
        x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        occlusion = (float(x0), float(y0), float(w), float(h))
    return AugmentParams(flip, angle, scale, jitter, occlusion, int(rng.integers(2 ** 31)))


def augment_transform(params: AugmentParams, width: int, height: int) -> Affine:
    cx, cy = (width - 1) / 2, (height - 1) / 2
    m = np.eye(3)
    if params.flip:
        m = np.array([[-1.0, 0.0, width - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    if params.angle != 0.0 or params.scale != 1.0:
        t = math.radians(params.angle)
        c, s = math.cos(t) * params.scale, math.sin(t) * params.scale
        # y points down, so this rotates counter-clockwise on screen
        rot = np.array([[c, s, cx - c * cx - s * cy], [-s, c, cy + s * cx - c * cy], [0.0, 0.0, 1.0]])
        m = rot @ m
    return Affine(m[:2])


def apply_augment(sample: Sample, params: AugmentParams) -> Sample:
    H, W = sample.image.shape[:2]
    image = sample.image
    landmarks = sample.landmarks
    identity = not params.flip and params.angle == 0.0 and params.scale == 1.0
    if not identity:
        aff = augment_transform(params, W, H)
        if params.flip and params.angle == 0.0 and params.scale == 1.0:
            image = np.ascontiguousarray(image[:, ::-1])
        else:
            image = warp_image(image, aff, (W, H))
        landmarks = aff.to_canonical(landmarks)
        if params.flip:
            landmarks = landmarks.permuted(flip_permutation(len(landmarks)))
    image = _photometric(image, params)
    if image is sample.image:
        image = image.copy()
    bbox = sample.bbox if landmarks is sample.landmarks else _safe_bbox(landmarks, sample.bbox)
    return Sample(image, landmarks, bbox, sample.yaw, sample.id)


def _photometric(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    H, W = image.shape[:2]
    if params.jitter != (1.0, 1.0, 1.0):
        image = np.clip(image * np.asarray(params.jitter, dtype=image.dtype), 0.0, 1.0)
    if params.occlusion is not None:
        x0, y0, w, h = params.occlusion
        c0, r0 = int(x0 * W), int(y0 * H)
        c1, r1 = c0 + max(1, int(round(w * W))), r0 + max(1, int(round(h * H)))
        image = image.copy()
        noise = np.random.default_rng(params.noise_seed).random((r1 - r0, c1 - c0, 3))
        image[r0:r1, c0:c1] = noise[: H - r0, : W - c0].astype(image.dtype)
    return image


def augmented_crop(sample: Sample, bbox: BoundingBox, out_resolution: int, params: AugmentParams,
                   margin: float = 0.1) -> tuple[Sample, Affine]:
    """Crop followed by an augmentation in the crop frame, resampled once.

    Equivalent to ``apply_augment(crop_and_resize(...))`` up to interpolation.
    The returned box is the ground-truth box carried through the affine, so
    its ``d`` stays the correct normaliser under rotation.
    """
    crop = crop_transform(bbox, out_resolution, margin)
    total = augment_transform(params, out_resolution, out_resolution).compose(crop)
    image = warp_image(sample.image, total, (out_resolution, out_resolution))
    landmarks = total.to_canonical(sample.landmarks)
    if params.flip:
        landmarks = landmarks.permuted(flip_permutation(len(landmarks)))
    image = _photometric(image, params)
    return Sample(image, landmarks, total.map_bbox(sample.bbox), sample.yaw, sample.id), total


def _safe_bbox(landmarks: LandmarkSet, fallback: BoundingBox) -> BoundingBox:
    try:
        return bbox_from_landmarks(landmarks)
    except DataError:
        return fallback


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator | None = None) -> Sample:
    """Apply one randomly drawn augmentation.  Without ``rng`` the draw is
    seeded from ``cfg.seed``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return apply_augment(sample, sample_augment(cfg, rng))


# ---------------------------------------------------------------------------
# ablation perturbations


def perturb_bbox(bbox: BoundingBox, noise_level: float, seed=None) -> BoundingBox:
    """Shift the centre uniformly within +-p*d per axis and rescale the sides
    by a uniform factor in [1-p, 1+p]."""
    if not 0 <= noise_level < 1:
        raise ConfigurationError(f"noise level must be in [0, 1), got {noise_level}")
    if noise_level == 0:
        return bbox
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p, d = noise_level, bbox.d
    dx, dy = rng.uniform(-p * d, p * d, 2)
    f = rng.uniform(1 - p, 1 + p)
    cx, cy = bbox.center
    w, h = bbox.w * f, bbox.h * f
    return BoundingBox(cx + dx - w / 2, cy + dy - h / 2, w, h)


def face_size(bbox: BoundingBox) -> float:
    return max(bbox.w, bbox.h)


def downscale_face(sample: Sample, target_face_px: float) -> Sample:
    """Low-pass the image so the face box would measure ``target_face_px``,
    then resample back to the original size.  Landmarks are untouched."""
    if target_face_px < 8:
        raise ConfigurationError(f"target face size must be >= 8 px, got {target_face_px}")
    factor = target_face_px / face_size(sample.bbox)
    H, W = sample.image.shape[:2]
    if factor >= 1:
        return sample.with_(image=sample.image.copy())
    small = cv2.resize(sample.image, (max(1, round(W * factor)), max(1, round(H * factor))),
                       interpolation=cv2.INTER_AREA)
    back = cv2.resize(small, (W, H), interpolation=cv2.INTER_LINEAR)
    return sample.with_(image=np.clip(back, 0.0, 1.0).astype(sample.image.dtype))
