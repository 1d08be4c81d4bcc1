"""Random flips, rotations and brightness/contrast jitter."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .synth import ImageSample


@dataclass(frozen=True)
class AugmentPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 1.0
    max_degrees: float = 15.0
    p_brightness_contrast: float = 1.0
    brightness: float = 0.1
    contrast: float = 0.1

    @classmethod
    def disabled(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def hflip(pixels):
    return pixels[:, ::-1].copy()


def vflip(pixels):
    return pixels[::-1, :].copy()


def augment(sample: ImageSample, policy: AugmentPolicy, seed) -> ImageSample:
    """Return an augmented copy of ``sample``; labels are untouched.

    Rotation uses bilinear interpolation with reflected edges.  Brightness
    and contrast act as ``p * gain + shift`` followed by clamping to [0, 1].
    """
    rng = np.random.default_rng(seed)
    img = sample.pixels
    mask = sample.mask
    # draw every variate up front so the stream does not depend on which ops fire
    u = rng.uniform(size=4)
    angle = rng.uniform(-policy.max_degrees, policy.max_degrees)
    shift = rng.uniform(-policy.brightness, policy.brightness)
    gain = 1.0 + rng.uniform(-policy.contrast, policy.contrast)
    changed = False
    if u[0] < policy.p_hflip:
        img, changed = hflip(img), True
        mask = None if mask is None else hflip(mask)
    if u[1] < policy.p_vflip:
        img, changed = vflip(img), True
        mask = None if mask is None else vflip(mask)
    if u[2] < policy.p_rotate and angle != 0.0:
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="reflect")
        if mask is not None:
            mask = ndimage.rotate(mask.astype(float), angle, reshape=False, order=0, mode="reflect") > 0.5
        changed = True
    if u[3] < policy.p_brightness_contrast and (shift != 0.0 or gain != 1.0):
        img = img * gain + shift
        changed = True
    if not changed:
        return sample
    return dataclasses.replace(sample, pixels=np.clip(img, 0.0, 1.0), mask=mask)
