"""Image-folder layout: ``<root>/<domain>/<species>/<index>.png``."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import IngestionError, InvalidData
from .synth import SPECIES_NAMES, ImageSample

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")


def normalize(raw) -> np.ndarray:
    """8-bit intensities to [0, 1] by dividing by 255."""
    return np.asarray(raw, dtype=np.uint8).astype(np.float64) / 255.0


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def write_image_folder(samples: list[ImageSample], root, domain_name: str | None = None,
                       class_names=SPECIES_NAMES) -> list[Path]:
    """Write samples as 8-bit grayscale PNGs under ``root[/domain_name]/<species>/``.

    Files are numbered per species in the order samples appear.
    """
    if not samples:
        raise InvalidData("no samples to write")
    base = Path(root) / domain_name if domain_name else Path(root)
    counters: dict[int, int] = {}
    paths = []
    for s in samples:
        idx = counters.get(s.class_label, 0)
        counters[s.class_label] = idx + 1
        d = base / class_names[s.class_label]
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{idx:04d}.png"
        Image.fromarray(to_uint8(s.pixels), mode="L").save(path)
        paths.append(path)
    return paths


def load_image_folder(root, domain_label: int = 0) -> list[ImageSample]:
    """Load ``root/<species>/*.png|*.pgm``; labels follow sorted directory names."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"{root}: no class directories")
    out = []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            warnings.warn(f"{d}: empty class directory", stacklevel=2)
            continue
        for f in files:
            try:
                with Image.open(f) as im:
                    raw = np.asarray(im.convert("L"))
            except Exception as exc:
                raise IngestionError(f"{f}: cannot read image ({exc})") from exc
            out.append(ImageSample(normalize(raw), label, domain_label, str(f)))
    logger.debug("loaded %d images from %s", len(out), root)
    return out


def class_names_of(root) -> list[str]:
    return sorted(p.name for p in Path(root).iterdir() if p.is_dir())


def write_manifest(root, manifest: dict) -> str:
    """Write ``manifest.json``; returns the sha256 of its bytes."""
    blob = json.dumps(manifest, sort_keys=True, indent=2).encode()
    (Path(root) / "manifest.json").write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()
