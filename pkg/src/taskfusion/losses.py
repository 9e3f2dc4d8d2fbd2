"""Fusion training losses.

The fusion loss has two parts: a per-pixel weighted intensity term that pulls
the fused image toward whichever source the weight maps favor, and a gradient
term that pulls the fused image's edge magnitude toward the pointwise maximum
of the source edge magnitudes. The weight maps live on the probability
simplex (w_a + w_b = 1 at every pixel) and are what the meta update learns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "FusionWeights",
    "LossTerms",
    "SOBEL_X",
    "SOBEL_Y",
    "sobel_magnitude",
    "fusion_loss",
    "task_loss",
]

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

_SIMPLEX_TOL = 1e-9


@dataclass
class FusionWeights:
    """Per-pixel source weights; w_a + w_b = 1 pointwise."""

    w_a: Tensor
    w_b: Tensor

    def validate(self) -> None:
        if self.w_a.shape != self.w_b.shape:
            raise ad.ShapeError("weight maps differ in shape")
        s = self.w_a.data + self.w_b.data
        if np.max(np.abs(s - 1.0)) > _SIMPLEX_TOL:
            raise ValueError("weights are off the simplex: w_a + w_b != 1")
        if self.w_a.data.min() < -_SIMPLEX_TOL or self.w_b.data.min() < -_SIMPLEX_TOL:
            raise ValueError("weights are off the simplex: negative entries")


@dataclass
class LossTerms:
    """Fusion loss split into its parts; total = intensity + alpha * gradient."""

    total: Tensor
    intensity: Tensor
    gradient: Tensor
    alpha: float


def sobel_magnitude(img) -> Tensor:
    """|Gx * I| + |Gy * I| with reflect padding, per pixel.

    Differentiable; the absolute value uses subgradient 0 at exact zeros.
    """
    img = ad.as_tensor(img)
    if img.ndim != 2:
        raise ad.ShapeError(f"sobel_magnitude expects H x W, got {img.shape}")
    h, w = img.shape
    x = ad.reshape(img, (1, h, w))
    gx = ad.conv2d(x, Tensor(SOBEL_X.reshape(1, 1, 3, 3)))
    gy = ad.conv2d(x, Tensor(SOBEL_Y.reshape(1, 1, 3, 3)))
    mag = ad.add(ad.abs_(gx), ad.abs_(gy))
    return ad.reshape(mag, (h, w))


def fusion_loss(i_a, i_b, i_f, weights: FusionWeights, alpha: float = 1.0) -> LossTerms:
    """Weighted-intensity plus gradient-maximum loss of a fused image.

    intensity = mean_ij [ w_a (I_f - I_a)^2 + w_b (I_f - I_b)^2 ]
    gradient  = mean_ij | grad(I_f) - max(grad(I_a), grad(I_b)) |
    """
    i_a, i_b, i_f = ad.as_tensor(i_a), ad.as_tensor(i_b), ad.as_tensor(i_f)
    if not (i_a.shape == i_b.shape == i_f.shape):
        raise ad.ShapeError("fusion_loss: image shapes differ")
    if weights.w_a.shape != i_a.shape:
        raise ad.ShapeError("fusion_loss: weight maps do not match the images")
    weights.validate()

    da = ad.sub(i_f, i_a)
    db = ad.sub(i_f, i_b)
    intensity = ad.mean_(
        ad.add(ad.mul(weights.w_a, ad.square(da)), ad.mul(weights.w_b, ad.square(db)))
    )
    gmax = ad.maximum(sobel_magnitude(i_a), sobel_magnitude(i_b))
    gradient = ad.mean_(ad.abs_(ad.sub(sobel_magnitude(i_f), gmax)))
    total = ad.add(intensity, ad.mul(gradient, float(alpha)))
    return LossTerms(total=total, intensity=intensity, gradient=gradient, alpha=float(alpha))


def task_loss(logits, labels) -> Tensor:
    """Mean per-pixel cross-entropy of class logits (C, H, W) against labels (H, W)."""
    return ad.cross_entropy0(logits, labels)
