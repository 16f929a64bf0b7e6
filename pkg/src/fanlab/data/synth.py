"""Procedural synthetic faces.

A 68-point 3D template sits on the front of a head ellipsoid.  Each sample
draws an identity variation, a pose and an orthographic camera, renders a
shaded head with the facial features drawn along the projected template, and
stores the projected landmarks (pts), their camera-frame depth (sidecar) and
the camera parameters (json).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from ..landmarks import LandmarkSet
from .dataset import MANIFEST_NAME, ManifestRecord, Sample, write_depth, write_image, write_manifest
from .markup import FLIP_PAIRS_68, subset_indices
from .pts import write_pts

HEAD_AXES = np.array([1.0, 1.3, 1.0])  # ellipsoid semi-axes (x, y, z)
IMAGE_SIZE = 160
# landmark coordinates are snapped to this grid so they survive the +1 pts offset exactly
COORD_QUANTUM = 2.0 ** -12


def _surface_z(x, y, lift=0.0):
    a, b, c = HEAD_AXES
    return c * np.sqrt(np.clip(1 - (x / a) ** 2 - (y / b) ** 2, 0.0, None)) + lift


def _left_half() -> dict[int, tuple[float, float, float]]:
    """Points on the image-left half and the midline, template units
    (x right, y down, z towards the camera)."""
    pts: dict[int, tuple[float, float, float]] = {}
    for i in range(8):
        phi = math.pi * i / 16
        x, y = -0.9 * math.cos(phi), 1.05 * math.sin(phi)
        pts[i] = (x, y, 0.0)
    pts[8] = (0.0, 1.05, 0.0)
    for k, t in enumerate(np.linspace(0, 1, 5)):
        pts[17 + k] = (-0.78 + 0.62 * t, -0.5 - 0.12 * math.sin(math.pi * t), 0.04)
    for k, (y, lift) in enumerate([(-0.32, 0.04), (-0.17, 0.1), (-0.02, 0.18), (0.14, 0.28)]):
        pts[27 + k] = (0.0, y, lift)
    pts[31] = (-0.2, 0.28, 0.06)
    pts[32] = (-0.1, 0.31, 0.1)
    pts[33] = (0.0, 0.33, 0.14)
    eye = [(-0.58, -0.25), (-0.47, -0.31), (-0.33, -0.31), (-0.22, -0.25), (-0.33, -0.2), (-0.47, -0.2)]
    for k, (x, y) in enumerate(eye):
        pts[36 + k] = (x, y, 0.02)
    mouth = {48: (-0.38, 0.62), 49: (-0.25, 0.56), 50: (-0.1, 0.53), 51: (0.0, 0.55),
             59: (-0.25, 0.7), 58: (-0.1, 0.74), 57: (0.0, 0.75),
             60: (-0.3, 0.625), 61: (-0.1, 0.6), 62: (0.0, 0.6), 67: (-0.1, 0.66), 66: (0.0, 0.67)}
    for k, (x, y) in mouth.items():
        pts[k] = (x, y, 0.03)
    return pts


def template_68() -> np.ndarray:
    """Bilaterally symmetric (68, 3) template; mirrored points are exact negations in x."""
    left = _left_half()
    out = np.zeros((68, 3))
    for k, (x, y, lift) in left.items():
        out[k] = (x, y, float(_surface_z(x, y, lift)))
    pairs = {}
    for a, b in FLIP_PAIRS_68:
        pairs[a], pairs[b] = b, a
    for k in range(68):
        if k not in left:
            src = pairs[k]
            out[k] = (-out[src, 0], out[src, 1], out[src, 2])
    return out


TEMPLATE = template_68()

# groups drawn as connected strokes: (indices, closed, colour, width px)
_STROKES = [
    (list(range(0, 17)), False, (0.35, 0.22, 0.15), 1.1),
    (list(range(17, 22)), False, (0.2, 0.12, 0.05), 1.6),
    (list(range(22, 27)), False, (0.2, 0.12, 0.05), 1.6),
    (list(range(27, 31)), False, (0.45, 0.3, 0.22), 1.0),
    (list(range(31, 36)), False, (0.4, 0.25, 0.2), 1.0),
    (list(range(36, 42)), True, (0.08, 0.08, 0.1), 1.0),
    (list(range(42, 48)), True, (0.08, 0.08, 0.1), 1.0),
    (list(range(48, 60)), True, (0.7, 0.15, 0.15), 1.3),
    (list(range(60, 68)), True, (0.45, 0.05, 0.08), 0.9),
]


@dataclass
class Camera:
    yaw: float
    pitch: float
    roll: float
    scale: float  # pixels per template unit
    tx: float
    ty: float
    identity: tuple[float, float, float]  # eye spacing, mouth width, jaw width factors

    def rotation(self) -> np.ndarray:
        y, p, r = (math.radians(v) for v in (self.yaw, self.pitch, self.roll))
        ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
        rx = np.array([[1, 0, 0], [0, math.cos(p), -math.sin(p)], [0, math.sin(p), math.cos(p)]])
        rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
        return rz @ rx @ ry


def shaped_template(identity) -> np.ndarray:
    """Symmetric identity variation: x-scalings of eyes, mouth and jaw."""
    eye_f, mouth_f, jaw_f = identity
    t = TEMPLATE.copy()
    t[36:48, 0] *= eye_f
    t[48:68, 0] *= mouth_f
    t[0:17, 0] *= jaw_f
    return t


def project(points3d: np.ndarray, cam: Camera) -> np.ndarray:
    """Camera-frame coordinates (x, y in pixels, z in pixels towards the viewer)."""
    p = points3d @ cam.rotation().T * cam.scale
    p[:, 0] += cam.tx
    p[:, 1] += cam.ty
    return p


def quantize(v: np.ndarray) -> np.ndarray:
    return np.round(v / COORD_QUANTUM) * COORD_QUANTUM


def sample_camera(rng: np.random.Generator, yaw_range=(-90.0, 90.0), size: int = IMAGE_SIZE) -> Camera:
    return Camera(
        yaw=float(rng.uniform(*yaw_range)),
        pitch=float(rng.uniform(-15, 15)),
        roll=float(rng.uniform(-20, 20)),
        scale=float(rng.uniform(0.24, 0.31) * size),
        tx=float(size / 2 + rng.uniform(-0.06, 0.06) * size),
        ty=float(size / 2 + rng.uniform(-0.04, 0.06) * size),
        identity=tuple(float(v) for v in rng.uniform(0.93, 1.07, 3)),
    )


def _segment_distance(px, py, a, b):
    d = b - a
    L2 = float(d @ d)
    if L2 == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2, 0, 1)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def render(cam: Camera, rng: np.random.Generator, size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Render one face; returns (image HxWx3 in [0,1], camera-frame 68-point landmarks)."""
    template = shaped_template(cam.identity)
    pts = project(template, cam)
    R = cam.rotation()
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    # background: random linear gradient plus coarse noise
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    ang = rng.uniform(0, 2 * math.pi)
    ramp = ((xs * math.cos(ang) + ys * math.sin(ang)) / size + 1) / 2
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]
    coarse = rng.normal(0, 0.05, (size // 16 + 1, size // 16 + 1, 3))
    img += np.kron(coarse, np.ones((16, 16, 1)))[:size, :size]

    # head: ray-cast the ellipsoid under the orthographic camera
    D = np.diag(1.0 / HEAD_AXES ** 2)
    o = np.stack([(xs - cam.tx) / cam.scale, (ys - cam.ty) / cam.scale, np.zeros_like(xs)], -1) @ R  # head frame
    dvec = R[2]  # camera z axis expressed in the head frame
    A = dvec @ D @ dvec
    B = 2 * np.einsum("...i,ij,j->...", o, D, dvec)
    C = np.einsum("...i,ij,...j->...", o, D, o) - 1
    disc = B * B - 4 * A * C
    hit = disc >= 0
    t = (-B + np.sqrt(np.where(hit, disc, 0))) / (2 * A)
    surf = o + t[..., None] * dvec
    normal = (surf @ D) @ R.T
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True) + 1e-12
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 1.5
    light /= np.linalg.norm(light)
    shade = 0.45 + 0.55 * np.clip(normal @ light, 0, 1)
    skin = rng.uniform([0.55, 0.35, 0.25], [0.95, 0.8, 0.7])
    edge = np.clip(np.sqrt(np.where(hit, disc, 0)) * cam.scale * 0.5, 0, 1)  # soft silhouette
    img = img * (1 - edge[..., None]) + (shade[..., None] * skin) * edge[..., None]

    # features: strokes between consecutive visible landmarks, dots on landmarks
    facing = (template / HEAD_AXES ** 2) @ R.T
    visible = facing[:, 2] > 0.05
    for idx, closed, colour, width in _STROKES:
        seq = idx + ([idx[0]] if closed else [])
        ink = np.zeros((size, size))
        for a, b in zip(seq[:-1], seq[1:]):
            if visible[a] and visible[b]:
                dist = _segment_distance(xs, ys, pts[a, :2], pts[b, :2])
                ink = np.maximum(ink, np.exp(-0.5 * (dist / (0.6 * width)) ** 2))
        img = img * (1 - 0.85 * ink[..., None]) + np.asarray(colour) * 0.85 * ink[..., None]
    dots = np.zeros((size, size))
    for k in np.flatnonzero(visible):
        dots = np.maximum(dots, np.exp(-0.5 * ((xs - pts[k, 0]) ** 2 + (ys - pts[k, 1]) ** 2) / 0.8 ** 2))
    img = img * (1 - 0.6 * dots[..., None]) + 0.95 * 0.6 * dots[..., None] * np.array([1.0, 1.0, 0.6])

    img += rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0, 1).astype(np.float32), pts


def generate_sample(rng: np.random.Generator, num_landmarks: int = 68, yaw_range=(-90.0, 90.0),
                    size: int = IMAGE_SIZE, sample_id: str = "") -> tuple[Sample, Camera]:
    cam = sample_camera(rng, yaw_range, size)
    image, pts = render(cam, rng, size)
    pts = quantize(pts[subset_indices(num_landmarks)])
    return Sample(image, LandmarkSet(pts), yaw=cam.yaw, id=sample_id), cam


def synth_generate(count: int, seed: int, out_dir, num_landmarks: int = 68, yaw_range=(-90.0, 90.0),
                   size: int = IMAGE_SIZE) -> Path:
    """Write ``count`` samples plus ``manifest.tsv`` under ``out_dir``; returns the manifest path."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    for sub in ("images", "landmarks", "depth", "camera"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    width = max(5, len(str(count - 1)))
    for i in range(count):
        sid = f"face_{i:0{width}d}"
        sample, cam = generate_sample(rng, num_landmarks, yaw_range, size, sid)
        write_image(out / "images" / f"{sid}.png", sample.image)
        write_pts(out / "landmarks" / f"{sid}.pts", LandmarkSet(sample.landmarks.xy))
        write_depth(out / "depth" / f"{sid}.depth", sample.landmarks.z)
        (out / "camera" / f"{sid}.json").write_text(json.dumps(asdict(cam), sort_keys=True) + "\n",
                                                   encoding="utf-8")
        records.append(ManifestRecord(f"images/{sid}.png", f"landmarks/{sid}.pts", f"depth/{sid}.depth", cam.yaw))
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, records)
    return manifest


def load_camera(path) -> Camera:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    d["identity"] = tuple(d["identity"])
    return Camera(**d)
