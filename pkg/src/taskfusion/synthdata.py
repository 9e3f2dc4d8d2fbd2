"""Synthetic two-modality scenes with a known information split.

Each sample is a pair of grayscale images plus a per-pixel label map with
three classes: background (0), target (1), texture (2). Targets are bright
disks that show up only in modality A (they sit at background level in B);
texture patches are high-frequency stripe rectangles that show up only in
modality B (flat in A). A small amount of uniform noise is added to both
modalities. By construction, telling targets from background requires A and
telling texture from background requires B, which is the ground truth the
learned fusion weights are expected to recover.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SceneSpec", "ImagePair", "gen_pair", "gen_dataset"]

BACKGROUND, TARGET, TEXTURE = 0, 1, 2


@dataclass(frozen=True)
class SceneSpec:
    """Scene layout parameters; intensity levels keep each class separable by
    at least 0.3 in its informative modality and invisible (up to noise) in
    the other."""

    height: int = 64
    width: int = 64
    target_count: tuple[int, int] = (6, 10)
    target_radius: tuple[int, int] = (5, 9)
    texture_count: tuple[int, int] = (4, 6)
    texture_size: tuple[int, int] = (14, 20)
    background_a: float = 0.1
    target_level: float = 0.9
    background_b: float = 0.5
    stripe_low: float = 0.2
    stripe_high: float = 0.8
    noise_amp: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ValueError("canvas too small")
        if self.target_radius[1] * 2 + 1 > min(self.height, self.width):
            raise ValueError("target radius does not fit the canvas")
        if self.texture_size[1] > min(self.height, self.width):
            raise ValueError("texture size does not fit the canvas")
        for lo, hi in (self.target_count, self.target_radius, self.texture_count, self.texture_size):
            if lo < 1 or hi < lo:
                raise ValueError("count/size ranges must be ordered and positive")
        if abs(self.target_level - self.background_a) < 0.3:
            raise ValueError("target contrast below 0.3 in modality A")
        if min(abs(self.stripe_low - self.background_b), abs(self.stripe_high - self.background_b)) < 0.3:
            raise ValueError("stripe contrast below 0.3 in modality B")


@dataclass
class ImagePair:
    """One sample: two modalities plus the class label map."""

    i_a: np.ndarray
    i_b: np.ndarray
    labels: np.ndarray

    def mask(self, cls: int) -> np.ndarray:
        return self.labels == cls


def _place_disks(rng, labels, spec: SceneSpec) -> None:
    h, w = labels.shape
    n = int(rng.integers(spec.target_count[0], spec.target_count[1] + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n):
        r = int(rng.integers(spec.target_radius[0], spec.target_radius[1] + 1))
        for _attempt in range(100):
            cy = int(rng.integers(r, h - r))
            cx = int(rng.integers(r, w - r))
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            # disks may merge with other targets but must not touch texture
            if not (labels[disk] == TEXTURE).any():
                labels[disk] = TARGET
                break


def _place_stripes(rng, labels, stripes, spec: SceneSpec) -> None:
    h, w = labels.shape
    n = int(rng.integers(spec.texture_count[0], spec.texture_count[1] + 1))
    for _ in range(n):
        ph = int(rng.integers(spec.texture_size[0], spec.texture_size[1] + 1))
        pw = int(rng.integers(spec.texture_size[0], spec.texture_size[1] + 1))
        horizontal = bool(rng.integers(0, 2))
        for _attempt in range(100):
            y = int(rng.integers(0, h - ph + 1))
            x = int(rng.integers(0, w - pw + 1))
            region = (slice(y, y + ph), slice(x, x + pw))
            if (labels[region] == TARGET).any():
                continue
            labels[region] = TEXTURE
            sub = np.zeros((ph, pw), dtype=bool)
            if horizontal:
                sub[::2, :] = True
            else:
                sub[:, ::2] = True
            stripes[region] = sub
            break


def gen_pair(spec: SceneSpec, rng: np.random.Generator) -> ImagePair:
    """Render one scene; deterministic given the generator state."""
    spec.validate()
    h, w = spec.height, spec.width
    # redraw layouts that end up without a meaningful amount of some class
    for _layout_try in range(20):
        labels = np.zeros((h, w), dtype=np.int64)
        stripes = np.zeros((h, w), dtype=bool)
        _place_stripes(rng, labels, stripes, spec)
        _place_disks(rng, labels, spec)
        frac = np.bincount(labels.ravel(), minlength=3) / labels.size
        if frac[TARGET] >= 0.02 and frac[TEXTURE] >= 0.02:
            break

    i_a = np.full((h, w), spec.background_a)
    i_a[labels == TARGET] = spec.target_level
    # texture stays flat at background level in modality A

    i_b = np.full((h, w), spec.background_b)
    tex = labels == TEXTURE
    i_b[tex & stripes] = spec.stripe_high
    i_b[tex & ~stripes] = spec.stripe_low
    # targets stay flat at background level in modality B

    i_a = np.clip(i_a + rng.uniform(-spec.noise_amp, spec.noise_amp, size=(h, w)), 0.0, 1.0)
    i_b = np.clip(i_b + rng.uniform(-spec.noise_amp, spec.noise_amp, size=(h, w)), 0.0, 1.0)
    return ImagePair(i_a=i_a, i_b=i_b, labels=labels)


def gen_dataset(spec: SceneSpec, count: int, seed: int) -> list[ImagePair]:
    """Independent pairs; item i is reproducible in isolation from (seed, i)."""
    if count < 4:
        raise ValueError("dataset must hold at least 4 pairs")
    return [gen_pair(spec, np.random.default_rng([seed, i])) for i in range(count)]
