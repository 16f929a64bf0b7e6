"""Running predictors over datasets and the ablation protocols."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .arch import FAN, DepthRegressor
from .data.dataset import Sample
from .data.transforms import Affine, crop_and_resize, downscale_face, perturb_bbox
from .errors import ConfigurationError, ContractError
from .heatmap import decode_array, guide_channels, heatmap_to_image
from .landmarks import LandmarkSet
from .metrics import YAW_BIN_LABELS, EvalResult, auc_from_results, nme_and_count, yaw_bin
from .nn import Module
from .tensor import Tensor

DEFAULT_NOISE_LEVELS = (0.0, 0.1, 0.2, 0.3)
DEFAULT_FACE_PX = (None, 60, 45, 30, 20)
CROP_MARGIN = 0.1


def model_dtype(model: Module):
    return model.parameters()[0].dtype


def images_to_batch(samples: Sequence[Sample], dtype=np.float32) -> np.ndarray:
    """Stack (H, W, 3) images into a (B, 3, H, W) array."""
    return np.ascontiguousarray(np.stack([s.image for s in samples]).transpose(0, 3, 1, 2), dtype=dtype)


def guides_to_batch(landmarks: Sequence[LandmarkSet], resolution: int, dtype=np.float32) -> np.ndarray:
    return np.stack([guide_channels(l, (resolution, resolution)) for l in landmarks]).astype(dtype)


def heatmaps_to_landmarks(maps: np.ndarray, scale: float) -> list[LandmarkSet]:
    uv, visible = decode_array(maps)
    xy = heatmap_to_image(uv, scale)
    return [LandmarkSet(xy[i], visible[i]) for i in range(len(xy))]


class Predictor:
    """Maps canonical-frame crops to canonical-frame landmarks."""

    input_resolution: int
    num_landmarks: int

    def predict(self, crops: Sequence[Sample]) -> list[LandmarkSet]:
        raise NotImplementedError


class FanPredictor(Predictor):
    """Decodes the last stack of a (possibly guided) FAN.

    For guided models ``guide_fn`` supplies the canonical 2D landmarks used to
    build the guide channels; by default the crops' own landmarks, i.e. the
    ground truth.  ``zero_guides`` feeds all-zero guide channels instead.
    """

    def __init__(self, model: FAN, batch_size: int = 16, guide_fn: Callable | None = None,
                 zero_guides: bool = False):
        self.model = model
        self.batch_size = batch_size
        self.guide_fn = guide_fn or (lambda crop: crop.landmarks)
        self.zero_guides = zero_guides
        self.input_resolution = model.cfg.input_resolution
        self.num_landmarks = model.cfg.num_landmarks
        self.last_guides: np.ndarray | None = None

    def heatmaps(self, crops: Sequence[Sample]) -> np.ndarray:
        self.model.eval()
        out = []
        res = self.input_resolution
        dtype = model_dtype(self.model)
        for i in range(0, len(crops), self.batch_size):
            chunk = crops[i:i + self.batch_size]
            x = Tensor(images_to_batch(chunk, dtype))
            guides = None
            if self.model.cfg.guided:
                if self.zero_guides:
                    g = np.zeros((len(chunk), self.num_landmarks, res, res), dtype)
                else:
                    g = guides_to_batch([self.guide_fn(c) for c in chunk], res, dtype)
                self.last_guides = g
                guides = Tensor(g)
            out.append(self.model(x, guides)[-1].data)
        return np.concatenate(out)

    def predict(self, crops: Sequence[Sample]) -> list[LandmarkSet]:
        maps = self.heatmaps(crops)
        return heatmaps_to_landmarks(maps, self.input_resolution / maps.shape[-1])


class PassthroughPredictor(Predictor):
    """Returns the ground truth of each crop; a harness sanity stub."""

    def __init__(self, input_resolution: int = 64, num_landmarks: int | None = None):
        self.input_resolution = input_resolution
        self.num_landmarks = num_landmarks

    def predict(self, crops: Sequence[Sample]) -> list[LandmarkSet]:
        return [LandmarkSet(c.landmarks.xy.copy(), c.landmarks.visible.copy()) for c in crops]


def as_predictor(model) -> Predictor:
    if isinstance(model, Predictor):
        return model
    if isinstance(model, FAN):
        return FanPredictor(model)
    raise ConfigurationError(f"cannot evaluate a {type(model).__name__}")


def prepare_crops(samples: Sequence[Sample], resolution: int, noise: float = 0.0,
                  face_px: float | None = None, seed: int = 0,
                  margin: float = CROP_MARGIN) -> list[tuple[Sample, Affine]]:
    """Apply the requested degradations and crop each sample.

    The box perturbation for sample i is drawn from a generator keyed on
    (seed, i), so results do not depend on batching or evaluation order.
    """
    out = []
    for i, s in enumerate(samples):
        if face_px is not None:
            s = downscale_face(s, face_px)
        box = perturb_bbox(s.bbox, noise, np.random.default_rng([seed, i])) if noise else s.bbox
        out.append(crop_and_resize(s, box, resolution, margin))
    return out


def evaluate(model, samples: Sequence[Sample], noise: float = 0.0, face_px: float | None = None,
             seed: int = 0) -> list[EvalResult]:
    """Per-sample NME in the original frame, normalised by the ground-truth box."""
    predictor = as_predictor(model)
    if predictor.num_landmarks is not None:
        for s in samples:
            if len(s.landmarks) != predictor.num_landmarks:
                raise ContractError(f"sample {s.id!r} has {len(s.landmarks)} landmarks, "
                                    f"model predicts {predictor.num_landmarks}")
    crops = prepare_crops(samples, predictor.input_resolution, noise, face_px, seed)
    preds = predictor.predict([c for c, _ in crops])
    results = []
    for s, (_, aff), pred in zip(samples, crops, preds):
        value, n = nme_and_count(s.landmarks, aff.to_original(pred), s.bbox)
        results.append(EvalResult(value, s.id, s.yaw, n))
    return results


def mean_nme(results: Sequence[EvalResult]) -> float:
    return float(np.mean([r.nme for r in results]))


def predict_depth(regressor: DepthRegressor, crops: Sequence[Sample], batch_size: int = 16) -> np.ndarray:
    """Normalised depth (z / d of the canonical box) per crop, guided by the
    crops' own 2D landmarks."""
    regressor.eval()
    res = regressor.cfg.input_resolution
    dtype = model_dtype(regressor)
    out = []
    for i in range(0, len(crops), batch_size):
        chunk = crops[i:i + batch_size]
        x = Tensor(images_to_batch(chunk, dtype))
        g = Tensor(guides_to_batch([c.landmarks for c in chunk], res, dtype))
        out.append(regressor(x, g).data.astype(np.float64))
    return np.concatenate(out)


def depth_errors(regressor: DepthRegressor, samples: Sequence[Sample]) -> np.ndarray:
    """Per-sample mean |z_pred - z_gt| / d using ground-truth 2D guides."""
    crops = [c for c, _ in prepare_crops(samples, regressor.cfg.input_resolution)]
    pred = predict_depth(regressor, crops)
    errs = []
    for c, p in zip(crops, pred):
        vis = c.landmarks.visible
        gt = c.landmarks.z / c.bbox.d
        errs.append(float(np.mean(np.abs(p[vis] - gt[vis]))))
    return np.array(errs)


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationTable:
    protocol: str
    conditions: list[str]
    columns: list[str] = field(default_factory=lambda: list(YAW_BIN_LABELS))
    values: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    counts: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["condition", *self.columns])
            for cond, row in zip(self.conditions, self.values):
                w.writerow([cond, *(repr(float(v)) for v in row)])


def auc_by_yaw(results: Sequence[EvalResult]) -> tuple[np.ndarray, np.ndarray]:
    """AUC@0.07 per |yaw| bin; NaN for empty bins."""
    bins: list[list[EvalResult]] = [[], [], []]
    for r in results:
        if r.yaw is None:
            raise ContractError(f"result {r.id!r} has no yaw label")
        bins[yaw_bin(r.yaw)].append(r)
    values = np.array([auc_from_results(b) if b else np.nan for b in bins])
    return values, np.array([len(b) for b in bins])


def ablation_report(model, dataset: Sequence[Sample], protocol: str, params: dict | None = None) -> AblationTable:
    """AUC per condition x yaw bin.

    protocol ``yaw``: one row on the dataset as given.
    ``noise``: one row per box-noise level (``levels``).
    ``resolution``: one row per face size in pixels (``face_px``; None = native).
    ``size``: ``model`` is a list of (label, model) pairs, one row each.
    """
    params = dict(params or {})
    seed = int(params.get("seed", 0))
    rows: list[tuple[str, list[EvalResult]]] = []
    if protocol == "yaw":
        rows.append(("all", evaluate(model, dataset, seed=seed)))
    elif protocol == "noise":
        for p in params.get("levels", DEFAULT_NOISE_LEVELS):
            rows.append((f"{p:g}", evaluate(model, dataset, noise=float(p), seed=seed)))
    elif protocol == "resolution":
        for px in params.get("face_px", DEFAULT_FACE_PX):
            rows.append(("native" if px is None else f"{px:g}px",
                         evaluate(model, dataset, face_px=px, seed=seed)))
    elif protocol == "size":
        if isinstance(model, (Module, Predictor)):
            raise ConfigurationError("size protocol needs a list of (label, model) pairs")
        for label, m in model:
            rows.append((str(label), evaluate(m, dataset, seed=seed)))
    else:
        raise ConfigurationError(f"unknown ablation protocol {protocol!r}")
    values, counts = zip(*(auc_by_yaw(r) for _, r in rows))
    return AblationTable(protocol, [c for c, _ in rows], values=np.array(values), counts=np.array(counts))
