"""Volume augmentation: the fixed rotation / flip / noise / crop-resize
sequence, rare-case dataset expansion, and two-view generation for
contrastive pre-training with soft mask localization.

Geometric steps apply identical parameters to the volume and its mask
(bilinear resampling for intensities, nearest-neighbor for the mask);
noise touches intensities only. Rotation is in-plane about the depth
axis -- with a shallow depth dimension, through-plane rotation would be
destructive.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .data import Dataset, Sample
from .numcore import RngStream, stream_id_for

DEFAULT_EXPANSIONS = 5          # augmented copies per rare training example
DEFAULT_LOCALIZATION = 0.1      # background attenuation outside the mask


@dataclass(frozen=True)
class AugmentSpec:
    rotation_max_degrees: float = 15.0
    flip_prob: float = 0.5
    noise_sigma_range: tuple = (0.0, 0.05)
    crop_scale_range: tuple = (0.8, 1.0)

    def __post_init__(self):
        if self.rotation_max_degrees < 0:
            raise ValueError("rotation_max_degrees must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        lo, hi = self.noise_sigma_range
        if lo < 0 or hi < lo:
            raise ValueError("noise_sigma_range must satisfy 0 <= low <= high")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale_range must satisfy 0 < low <= high <= 1")

    def to_dict(self):
        return {"rotation_max_degrees": self.rotation_max_degrees,
                "flip_prob": self.flip_prob,
                "noise_sigma_range": list(self.noise_sigma_range),
                "crop_scale_range": list(self.crop_scale_range)}

    @classmethod
    def from_dict(cls, d):
        return cls(rotation_max_degrees=d.get("rotation_max_degrees", 15.0),
                   flip_prob=d.get("flip_prob", 0.5),
                   noise_sigma_range=tuple(d.get("noise_sigma_range", (0.0, 0.05))),
                   crop_scale_range=tuple(d.get("crop_scale_range", (0.8, 1.0))))


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source_id: str
    stream_ids: tuple


def augment_once(volume, mask, spec, rng):
    """One augmentation sequence: rotation, flips, noise, crop + resize.

    Returns (volume', mask'); mask' is None when no mask was given.
    The rng draw pattern is fixed, so the same stream reproduces the
    same transform regardless of which steps end up as identities.
    """
    vol = np.asarray(volume, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != vol.shape:
            raise ValueError("volume/mask shape mismatch")
    shape = vol.shape

    # in-plane rotation about the depth axis
    angle = float(rng.uniform(-spec.rotation_max_degrees,
                              spec.rotation_max_degrees)) \
        if spec.rotation_max_degrees > 0 else 0.0
    if angle != 0.0:
        vol = ndimage.rotate(vol, angle, axes=(0, 1), reshape=False,
                             order=1, mode="constant", cval=0.0)
        if mask is not None:
            mask = ndimage.rotate(mask, angle, axes=(0, 1), reshape=False,
                                  order=0, mode="constant", cval=0.0)

    # independent horizontal/vertical flips
    for axis in (0, 1):
        if rng.uniform() < spec.flip_prob:
            vol = np.flip(vol, axis=axis)
            if mask is not None:
                mask = np.flip(mask, axis=axis)

    # additive Gaussian noise on intensities only
    lo, hi = spec.noise_sigma_range
    sigma = float(rng.uniform(lo, hi))
    if sigma > 0:
        vol = vol + rng.normal(0.0, sigma, size=shape)

    # random crop, identical box for volume and mask, resized back
    lo, hi = spec.crop_scale_range
    scale = float(rng.uniform(lo, hi))
    sizes = tuple(max(1, int(round(scale * s))) for s in shape)
    offsets = tuple(int(rng.integers(0, s - c + 1))
                    for s, c in zip(shape, sizes))
    if sizes != shape:
        sl = tuple(slice(o, o + c) for o, c in zip(offsets, sizes))
        vol = resize(vol[sl], shape, order=1, preserve_range=True,
                     anti_aliasing=False)
        if mask is not None:
            mask = resize(mask[sl], shape, order=0, preserve_range=True,
                          anti_aliasing=False)

    vol = np.clip(np.ascontiguousarray(vol), 0.0, 1.0)
    if mask is not None:
        mask = np.ascontiguousarray((mask > 0.5).astype(np.float64))
    return vol, mask


def expand_rare(dataset, rare_set, n_copies, spec, seed):
    """Add n_copies augmented variants of every rare training sample.

    New samples keep their source's label, join the training split, and
    are named "{source_id}#aug{k}". Validation/test splits and non-rare
    classes are untouched. Deterministic from the seed alone.
    """
    if n_copies < 1:
        raise ValueError("n_copies must be >= 1")
    if not rare_set:
        warnings.warn("expand_rare called with an empty rare set; "
                      "dataset returned unchanged")
        return dataset
    base = RngStream(seed)
    new_samples = list(dataset.samples)
    for s in dataset.samples:
        if s.split != "train" or s.label not in rare_set:
            continue
        for k in range(1, n_copies + 1):
            aug_id = f"{s.id}#aug{k}"
            vol, mask = augment_once(s.volume, s.mask, spec,
                                     base.child(aug_id))
            new_samples.append(Sample(id=aug_id, volume=vol, label=s.label,
                                      split="train", mask=mask))
    return Dataset(samples=new_samples, class_count=dataset.class_count,
                   rare_threshold=dataset.rare_threshold, seed=dataset.seed)


def localize(volume, mask, gamma=DEFAULT_LOCALIZATION):
    """Attenuate out-of-mask intensities: v * (mask + gamma * (1 - mask)).

    gamma=1 is the identity; gamma=0 hard-masks the background.
    """
    if mask is None:
        return np.asarray(volume, dtype=np.float64)
    return np.asarray(volume) * (mask + gamma * (1.0 - mask))


def make_views(volume, mask, spec, rng, gamma=DEFAULT_LOCALIZATION,
               source_id=""):
    """Two independent augmentations of a mask-localized volume."""
    local = localize(volume, mask, gamma)
    rng_a = rng.child("view_a")
    rng_b = rng.child("view_b")
    view_a, _ = augment_once(local, mask, spec, rng_a)
    view_b, _ = augment_once(local, mask, spec, rng_b)
    return ViewPair(view_a=view_a, view_b=view_b, source_id=source_id,
                    stream_ids=(rng_a.stream_id, rng_b.stream_id))
