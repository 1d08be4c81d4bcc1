"""Synthetic microcolony images with controllable domain shift.

Each species is a distribution over blob morphology (count, size, elongation,
clustering, contrast).  Images are rendered on a canvas twice the output size,
block-averaged down, then get Gaussian background noise.  Domain transforms
mimic the shift axes between microscope set-ups: lower contrast, lower
resolution, and longer growth (bigger, more scattered colonies).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InvalidConfig

SPECIES_NAMES = ("Bc", "Bs", "Ec", "Li", "SE", "ST")

BACKGROUND_LEVEL = 0.2
NOISE_SIGMA = 0.05
# blob geometry is specified in pixels of this reference canvas
REFERENCE_CANVAS = 64
EDGE_SHARPNESS = 6.0


@dataclass
class ImageSample:
    pixels: np.ndarray
    class_label: int
    domain_label: int = 0
    source_path: str | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")


@dataclass(frozen=True)
class SpeciesSpec:
    species_id: int
    blob_count_range: tuple[int, int]
    blob_radius_range: tuple[float, float]
    eccentricity_range: tuple[float, float]
    cluster_spread: float
    intensity_contrast: float

    def __post_init__(self):
        lo, hi = self.blob_count_range
        if not 1 <= lo < hi:
            raise InvalidConfig(f"bad blob_count_range {self.blob_count_range}")
        lo, hi = self.blob_radius_range
        if not 0 < lo < hi:
            raise InvalidConfig(f"bad blob_radius_range {self.blob_radius_range}")
        lo, hi = self.eccentricity_range
        if not 0 <= lo < hi < 1:
            raise InvalidConfig(f"bad eccentricity_range {self.eccentricity_range}")
        if not 0 < self.intensity_contrast <= 1:
            raise InvalidConfig("intensity_contrast must lie in (0, 1]")
        if self.cluster_spread < 0:
            raise InvalidConfig("cluster_spread must be >= 0")

    @property
    def name(self) -> str:
        return SPECIES_NAMES[self.species_id]


# Species differ in morphology only.  A shared contrast keeps brightness from
# acting as a class cue that a contrast shift would then destroy.
DEFAULT_SPECIES = (
    SpeciesSpec(0, (2, 3), (7.0, 9.0), (0.0, 0.2), 12.0, 0.5),
    SpeciesSpec(1, (7, 10), (2.5, 3.5), (0.0, 0.3), 16.0, 0.5),
    SpeciesSpec(2, (3, 5), (4.5, 6.0), (0.8, 0.92), 14.0, 0.5),
    SpeciesSpec(3, (6, 9), (3.0, 4.0), (0.3, 0.5), 5.0, 0.5),
    SpeciesSpec(4, (1, 2), (11.0, 14.0), (0.55, 0.75), 4.0, 0.5),
    SpeciesSpec(5, (3, 4), (5.5, 7.0), (0.0, 0.3), 20.0, 0.5),
)


@dataclass(frozen=True)
class DomainTransform:
    """One shift step.  ``kind`` is identity, contrast_reduce, downsample or growth."""

    kind: str = "identity"
    factor: float = 1.0
    scale: int = 1
    dilation: float = 0.0
    extra_jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "contrast_reduce", "downsample", "growth"):
            raise InvalidConfig(f"unknown transform kind {self.kind!r}")
        if not 0 < self.factor <= 1:
            raise InvalidConfig("contrast factor must lie in (0, 1]")
        if int(self.scale) != self.scale or self.scale < 1:
            raise InvalidConfig("downsample scale must be an integer >= 1")
        if self.dilation < 0 or self.extra_jitter < 0:
            raise InvalidConfig("growth dilation and jitter must be >= 0")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def contrast_reduce(cls, factor):
        return cls("contrast_reduce", factor=factor)

    @classmethod
    def downsample(cls, scale):
        return cls("downsample", scale=int(scale))

    @classmethod
    def growth(cls, dilation, extra_jitter=0.0):
        return cls("growth", dilation=dilation, extra_jitter=extra_jitter)

    def to_dict(self):
        return asdict(self)


def _as_steps(transform) -> tuple[DomainTransform, ...]:
    if transform is None:
        return ()
    if isinstance(transform, DomainTransform):
        return (transform,)
    return tuple(transform)


@dataclass
class _Geometry:
    centers: np.ndarray
    radii: np.ndarray
    ecc: np.ndarray
    angles: np.ndarray
    contrast: float = field(default=0.5)


def _sample_geometry(spec: SpeciesSpec, rng, canvas, dilation, jitter) -> _Geometry:
    s = canvas / REFERENCE_CANVAS
    n = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
    radii = rng.uniform(*spec.blob_radius_range, size=n)
    ecc = rng.uniform(*spec.eccentricity_range, size=n)
    angles = rng.uniform(0, np.pi, size=n)
    margin = spec.blob_radius_range[1] * s
    center = rng.uniform(margin, canvas - margin, size=2)
    offsets = rng.normal(0.0, (spec.cluster_spread + jitter) * s, size=(n, 2))
    centers = np.clip(center + offsets, 0, canvas - 1)
    return _Geometry(centers, (radii + dilation) * s, ecc, angles, spec.intensity_contrast)


def _render(geom: _Geometry, canvas) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
    signal = np.zeros((canvas, canvas))
    rnorm_min = np.full((canvas, canvas), np.inf)
    for (cy, cx), a, e, th in zip(geom.centers, geom.radii, geom.ecc, geom.angles):
        b = a * np.sqrt(1.0 - e * e)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        rn = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        signal = np.maximum(signal, 1.0 / (1.0 + np.exp(-EDGE_SHARPNESS * (1.0 - rn))))
        rnorm_min = np.minimum(rnorm_min, rn)
    return geom.contrast * signal, rnorm_min < 1.0


def block_mean(img: np.ndarray, s: int) -> np.ndarray:
    """Average over ``s x s`` blocks; edge blocks are padded by replication."""
    h, w = img.shape
    ph, pw = -h % s, -w % s
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    return img.reshape(img.shape[0] // s, s, img.shape[1] // s, s).mean(axis=(1, 3))


def apply_pixel_transform(img: np.ndarray, step: DomainTransform) -> np.ndarray:
    if step.kind == "contrast_reduce":
        # shrink deviations about the image's own mean brightness
        mean = img.mean()
        img = mean + step.factor * (img - mean)
    elif step.kind == "downsample" and step.scale > 1:
        h, w = img.shape
        small = block_mean(img, step.scale)
        img = np.repeat(np.repeat(small, step.scale, axis=0), step.scale, axis=1)[:h, :w]
    return np.clip(img, 0.0, 1.0)


def render_sample(spec: SpeciesSpec, transform, image_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """One image and its blob mask at ``image_size`` resolution."""
    steps = _as_steps(transform)
    canvas = 2 * image_size
    dilation = sum(st.dilation for st in steps if st.kind == "growth")
    jitter = sum(st.extra_jitter for st in steps if st.kind == "growth")
    geom = _sample_geometry(spec, rng, canvas, dilation, jitter)
    signal, mask = _render(geom, canvas)
    img = BACKGROUND_LEVEL + block_mean(signal, 2)
    mask = block_mean(mask.astype(np.float64), 2) >= 0.5
    # optical steps act on the specimen image, sampling steps on the sensor output
    for st in steps:
        if st.kind == "contrast_reduce":
            img = apply_pixel_transform(img, st)
    img = np.clip(img + rng.normal(0.0, NOISE_SIGMA, size=img.shape), 0.0, 1.0)
    for st in steps:
        if st.kind == "downsample":
            img = apply_pixel_transform(img, st)
    return img, mask


def synth_generate(spec: SpeciesSpec, transform, n: int, image_size: int = 32, seed: int = 0,
                   domain_label: int = 0, tag: str = "synth") -> list[ImageSample]:
    """Render ``n`` images of one species under a domain transform.

    ``transform`` is a :class:`DomainTransform` or a sequence of them applied
    in order.  Image ``i`` uses its own child seed of ``(seed, species, i)``,
    so output does not depend on how generation is chunked.
    """
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    steps = _as_steps(transform)
    canvas = 2 * image_size
    grow = sum(st.dilation for st in steps if st.kind == "growth")
    max_r = (spec.blob_radius_range[1] + grow) * canvas / REFERENCE_CANVAS
    min_r = spec.blob_radius_range[0] * canvas / REFERENCE_CANVAS
    if 2 * max_r >= canvas or min_r < 0.5:
        raise InvalidConfig(
            f"image_size {image_size} cannot hold blobs of radius {spec.blob_radius_range} for {spec.name}"
        )
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, spec.species_id, i]))
        img, mask = render_sample(spec, steps, image_size, rng)
        out.append(ImageSample(img, spec.species_id, domain_label, f"{tag}/{spec.name}/{i:04d}", mask))
    return out


def generate_domain(transform, n_per_class: int, image_size: int = 32, seed: int = 0, domain_label: int = 0,
                    species: Sequence[SpeciesSpec] = DEFAULT_SPECIES, tag: str = "synth") -> list[ImageSample]:
    """All species of one domain, class-major order."""
    out = []
    for spec in species:
        out.extend(synth_generate(spec, transform, n_per_class, image_size, seed, domain_label, tag))
    return out


# Synthetic counterparts of the four laboratory conditions:
# phase contrast 60x (source), brightfield, 20x, and 20x with longer growth.
DEFAULT_DOMAINS = {
    "source": (DomainTransform.identity(),),
    "t_contrast": (DomainTransform.contrast_reduce(0.3),),
    "t_lowres": (DomainTransform.downsample(3),),
    "t_lowres_growth": (DomainTransform.growth(2.0, 4.0), DomainTransform.downsample(3)),
}
