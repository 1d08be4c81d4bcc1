"""Accuracy, confusion matrices, Grad-CAM and the 1-NN domain probe."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .data.synth import SPECIES_NAMES, ImageSample
from .errors import InvalidData, InvalidLabel
from .model import ModelParams, classify, extract_features
from .training import predict, stack_pixels

logger = logging.getLogger(__name__)


def predictions(params: ModelParams, samples: list[ImageSample]) -> np.ndarray:
    logits, _ = predict(params, samples)
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(logits, axis=1)


def accuracy_from(labels, preds) -> float:
    labels, preds = np.asarray(labels), np.asarray(preds)
    if labels.size == 0:
        raise InvalidData("empty test set")
    return float(np.mean(labels == preds))


def accuracy(params: ModelParams, testset: list[ImageSample]) -> float:
    if not testset:
        raise InvalidData("empty test set")
    return accuracy_from([s.class_label for s in testset], predictions(params, testset))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    classes: list[str]

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def to_json(self) -> str:
        return json.dumps({"classes": list(self.classes), "counts": self.counts.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ConfusionMatrix":
        d = json.loads(text)
        return cls(np.array(d["counts"], dtype=np.int64), d["classes"])


def confusion_from(labels, preds, classes) -> ConfusionMatrix:
    k = len(classes)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels), np.asarray(preds)), 1)
    return ConfusionMatrix(counts, list(classes))


def confusion_matrix(params: ModelParams, testset: list[ImageSample], classes=None) -> ConfusionMatrix:
    if not testset:
        raise InvalidData("empty test set")
    k = params.config.num_classes
    classes = list(classes) if classes is not None else list(SPECIES_NAMES[:k])
    return confusion_from([s.class_label for s in testset], predictions(params, testset), classes)


# ---------------------------------------------------------------------------
# Grad-CAM

@dataclass
class CamHeatmap:
    values: np.ndarray
    target_class: int
    image_id: str | None = None
    raw_max: float = 0.0


def cam_from_maps(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """``ReLU(sum_k w_k A_k)`` with ``w_k`` the spatial mean of ``dy/dA_k``.

    Both inputs have shape (C, h, w).
    """
    weights = gradients.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, activations, axes=1), 0.0)


def upsample_bilinear(cam: np.ndarray, size: int) -> np.ndarray:
    if cam.shape == (size, size):
        return cam.copy()
    zoom = (size / cam.shape[0], size / cam.shape[1])
    return np.maximum(ndimage.zoom(cam, zoom, order=1, mode="nearest", grid_mode=True), 0.0)


def grad_cam(params: ModelParams, image: ImageSample, target_class: int, stage: int | None = None) -> CamHeatmap:
    """Class activation map for ``target_class``, rescaled to max 1.

    Taps the post-ReLU output of the last conv stage unless ``stage`` says
    otherwise.
    """
    k = params.config.num_classes
    if not 0 <= target_class < k:
        raise InvalidLabel(f"target class {target_class} outside [0, {k})")
    stage = len(params.config.stage_channels) - 1 if stage is None else stage
    e = extract_features(params, stack_pixels([image]))
    tape = e.tape
    score = ad.sum_all(ad.select_column(classify(params, e), target_class))
    grads = ad.backward(score)
    fmap = tape.marks[f"stage{stage}"]
    acts = fmap.values[0]
    g = grads.get(fmap.node_id, np.zeros_like(fmap.values))[0]
    cam = upsample_bilinear(cam_from_maps(acts, g), image.pixels.shape[0])
    peak = float(cam.max())
    if peak > 0:
        cam = cam / peak
    return CamHeatmap(cam, target_class, image.source_path, peak)


def cam_localization(cam: CamHeatmap, mask: np.ndarray) -> tuple[float, float]:
    """Mean heatmap value inside and outside ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    inside = cam.values[mask].mean() if mask.any() else 0.0
    outside = cam.values[~mask].mean() if (~mask).any() else 0.0
    return float(inside), float(outside)


# ---------------------------------------------------------------------------
# domain probe

def domain_probe(embeddings, domain_labels) -> float:
    """Leave-one-out 1-nearest-neighbour domain accuracy (Euclidean).

    Lower means better-aligned domains; chance is 1/m for balanced sets.
    Distance ties go to the lowest sample index.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    d = np.asarray(domain_labels)
    domains, counts = np.unique(d, return_counts=True)
    if len(domains) < 2:
        raise InvalidData("domain probe needs at least 2 domains")
    if counts.min() < 10:
        raise InvalidData("domain probe needs at least 10 points per domain")
    if np.allclose(X, X[0]):
        warnings.warn("all embeddings identical; returning chance level", stacklevel=2)
        return 1.0 / len(domains)
    sq = (X * X).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(dist, np.inf)
    nn = np.argmin(dist, axis=1)
    return float(np.mean(d[nn] == d))
