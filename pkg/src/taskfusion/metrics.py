"""Fusion quality metrics computed on (source A, source B, fused) triples.

Six standard measures: entropy (EN), spatial frequency (SF), sum of
correlation differences (SCD), visual information fidelity (VIF), the
gradient-based edge-transfer quality Q_abf, and structural similarity
(SSIM). Inputs are grayscale images in [0, 1]. Conventions used here:

* EN quantizes to 256 levels by rounding and uses base-2 logs.
* SF takes root-mean-square first differences over valid positions.
* SCD sums Pearson correlations corr(F - B, A) + corr(F - A, B); a
  zero-variance argument contributes 0.
* SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2 and
  C2 = 0.03^2 on unit dynamic range, valid windows only, and averages the
  two source-as-reference scores.
* Q_abf follows the Sobel strength/orientation sigmoid model
  (gamma_g=0.9994, kappa_g=-15, sigma_g=0.5; gamma_a=0.9879, kappa_a=-22,
  sigma_a=0.8), each sigmoid calibrated so perfect edge preservation scores
  exactly 1, with edge-strength-weighted aggregation.
* VIF is the pixel-domain multi-scale form (4 scales, Gaussian pyramids,
  scalar GSM noise variance 2 on a 0..255 intensity scale), averaged over
  the two sources as references.

All functions are deterministic and operate on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "MetricsReport",
    "entropy",
    "spatial_frequency",
    "scd",
    "ssim_fusion",
    "qabf",
    "vif",
    "evaluate_pair",
    "summarize",
    "format_table",
    "format_records",
]


@dataclass
class MetricsReport:
    en: float
    sf: float
    scd: float
    vif: float
    qabf: float
    ssim: float


def _as_image(x, name="image") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def entropy(img) -> float:
    """Shannon entropy (bits) of the 256-level intensity histogram."""
    img = _as_image(img)
    levels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum() + 0.0)


def spatial_frequency(img) -> float:
    img = _as_image(img)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError("spatial_frequency needs at least 2x2")
    rf = np.sqrt(np.mean(np.diff(img, axis=1) ** 2))
    cf = np.sqrt(np.mean(np.diff(img, axis=0) ** 2))
    return float(np.sqrt(rf * rf + cf * cf))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    vx = (xc * xc).sum()
    vy = (yc * yc).sum()
    if vx == 0.0 or vy == 0.0:
        return 0.0
    return float((xc * yc).sum() / np.sqrt(vx * vy))


def scd(i_a, i_b, i_f) -> float:
    i_a, i_b, i_f = _as_image(i_a), _as_image(i_b), _as_image(i_f)
    if not (i_a.shape == i_b.shape == i_f.shape):
        raise ValueError("scd: shapes differ")
    return _pearson(i_f - i_b, i_a) + _pearson(i_f - i_a, i_b)


def _gaussian_window(n: int, sigma: float) -> np.ndarray:
    half = (n - 1) / 2.0
    x = np.arange(n) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    n = win.shape[0]
    if img.shape[0] < n or img.shape[1] < n:
        return np.empty((0, 0))
    v = sliding_window_view(img, (n, n))
    return np.tensordot(v, win, axes=([2, 3], [0, 1]))


def _ssim_pair(x: np.ndarray, y: np.ndarray) -> float:
    win = _gaussian_window(11, 1.5)
    if x.shape[0] < 11 or x.shape[1] < 11:
        raise ValueError("ssim needs images at least 11x11")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx = _filter_valid(x, win)
    my = _filter_valid(y, win)
    mxx = _filter_valid(x * x, win)
    myy = _filter_valid(y * y, win)
    mxy = _filter_valid(x * y, win)
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim_fusion(i_a, i_b, i_f) -> float:
    """Mean of SSIM(fused, A) and SSIM(fused, B)."""
    i_a, i_b, i_f = _as_image(i_a), _as_image(i_b), _as_image(i_f)
    if not (i_a.shape == i_b.shape == i_f.shape):
        raise ValueError("ssim_fusion: shapes differ")
    return 0.5 * (_ssim_pair(i_f, i_a) + _ssim_pair(i_f, i_b))


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _sobel_strength_angle(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pad = np.pad(img, 1, mode="reflect")
    gx = _filter_valid(pad, _SOBEL_X)
    gy = _filter_valid(pad, _SOBEL_Y)
    strength = np.sqrt(gx * gx + gy * gy)
    safe_gx = np.where(gx == 0.0, 1.0, gx)
    angle = np.where(gx == 0.0, np.pi / 2.0, np.arctan(gy / safe_gx))
    return strength, angle


# edge preservation sigmoids; each is scaled to equal 1 at perfect transfer
_GAMMA_G, _KAPPA_G, _SIGMA_G = 0.9994, -15.0, 0.5
_GAMMA_A, _KAPPA_A, _SIGMA_A = 0.9879, -22.0, 0.8


def _sigmoid_model(x: np.ndarray, gamma: float, kappa: float, sigma: float) -> np.ndarray:
    q = gamma / (1.0 + np.exp(kappa * (x - sigma)))
    top = gamma / (1.0 + np.exp(kappa * (1.0 - sigma)))
    return q / top


def _edge_preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(
            g_src > g_f,
            np.where(g_src == 0.0, 0.0, g_f / g_src),
            np.where(g_f == 0.0, 0.0, g_src / g_f),
        )
    ang = np.abs(np.abs(a_src - a_f) - np.pi / 2.0) * (2.0 / np.pi)
    qg = _sigmoid_model(ratio, _GAMMA_G, _KAPPA_G, _SIGMA_G)
    qa = _sigmoid_model(ang, _GAMMA_A, _KAPPA_A, _SIGMA_A)
    return qg * qa


def qabf(i_a, i_b, i_f) -> float:
    """Edge-transfer quality: how much source gradient information survives
    into the fused image, weighted by source edge strength."""
    i_a, i_b, i_f = _as_image(i_a), _as_image(i_b), _as_image(i_f)
    if not (i_a.shape == i_b.shape == i_f.shape):
        raise ValueError("qabf: shapes differ")
    ga, aa = _sobel_strength_angle(i_a)
    gb, ab = _sobel_strength_angle(i_b)
    gf, af = _sobel_strength_angle(i_f)
    q_af = _edge_preservation(ga, aa, gf, af)
    q_bf = _edge_preservation(gb, ab, gf, af)
    wsum = ga.sum() + gb.sum()
    if wsum == 0.0:
        return 0.0
    return float((q_af * ga + q_bf * gb).sum() / wsum)


def _vif_single(ref: np.ndarray, dist: np.ndarray) -> float:
    sigma_nsq = 2.0
    eps = 1e-10
    ref = ref * 255.0
    dist = dist * 255.0
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = _gaussian_window(n, n / 5.0)
        if scale > 1:
            ref = _filter_valid(ref, win)[::2, ::2]
            dist = _filter_valid(dist, win)[::2, ::2]
            if ref.size == 0:
                break
        mu1 = _filter_valid(ref, win)
        if mu1.size == 0:
            break
        mu2 = _filter_valid(dist, win)
        s1 = np.maximum(_filter_valid(ref * ref, win) - mu1 * mu1, 0.0)
        s2 = np.maximum(_filter_valid(dist * dist, win) - mu2 * mu2, 0.0)
        s12 = _filter_valid(ref * dist, win) - mu1 * mu2
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        g = np.where(s1 < eps, 0.0, g)
        sv = np.where(s1 < eps, s2, sv)
        s1 = np.where(s1 < eps, 0.0, s1)
        sv = np.where(s2 < eps, 0.0, np.where(g < 0, s2, sv))
        g = np.where(s2 < eps, 0.0, np.maximum(g, 0.0))
        sv = np.maximum(sv, eps)
        num += float(np.log10(1.0 + g * g * s1 / (sv + sigma_nsq)).sum())
        den += float(np.log10(1.0 + s1 / sigma_nsq).sum())
    if den == 0.0:
        raise ValueError("vif: image too small for the multi-scale pyramid")
    return num / den


def vif(i_a, i_b, i_f) -> float:
    """Pixel-domain multi-scale visual information fidelity, averaged over
    the two sources taken as references. Needs at least 17x17 images."""
    i_a, i_b, i_f = _as_image(i_a), _as_image(i_b), _as_image(i_f)
    if not (i_a.shape == i_b.shape == i_f.shape):
        raise ValueError("vif: shapes differ")
    if min(i_a.shape) < 17:
        raise ValueError("vif: image too small for the multi-scale pyramid")
    return 0.5 * (_vif_single(i_a, i_f) + _vif_single(i_b, i_f))


def evaluate_pair(i_a, i_b, i_f) -> MetricsReport:
    """All six metrics for one fused triple."""
    return MetricsReport(
        en=entropy(i_f),
        sf=spatial_frequency(i_f),
        scd=scd(i_a, i_b, i_f),
        vif=vif(i_a, i_b, i_f),
        qabf=qabf(i_a, i_b, i_f),
        ssim=ssim_fusion(i_a, i_b, i_f),
    )


def summarize(reports: list[MetricsReport]) -> MetricsReport:
    cols = {f.name: float(np.mean([getattr(r, f.name) for r in reports])) for f in fields(MetricsReport)}
    return MetricsReport(**cols)


_COLUMNS = ("en", "sf", "scd", "vif", "qabf", "ssim")


def format_table(reports: list[MetricsReport], labels: list[str] | None = None) -> str:
    """Aligned text table, one row per image plus a mean row."""
    labels = labels if labels is not None else [str(i) for i in range(len(reports))]
    head = f"{'image':>8} " + " ".join(f"{c.upper():>8}" for c in _COLUMNS)
    lines = [head]
    for label, rep in zip(labels, reports):
        lines.append(f"{label:>8} " + " ".join(f"{getattr(rep, c):8.4f}" for c in _COLUMNS))
    mean = summarize(reports)
    lines.append(f"{'mean':>8} " + " ".join(f"{getattr(mean, c):8.4f}" for c in _COLUMNS))
    return "\n".join(lines)


def format_records(reports: list[MetricsReport], labels: list[str] | None = None) -> list[str]:
    """Machine-readable lines, one per image plus the mean row."""
    labels = labels if labels is not None else [str(i) for i in range(len(reports))]
    out = []
    for label, rep in zip(labels, reports):
        out.append(
            f"row={label} " + " ".join(f"{c}={getattr(rep, c):.10g}" for c in _COLUMNS)
        )
    mean = summarize(reports)
    out.append("row=mean " + " ".join(f"{c}={getattr(mean, c):.10g}" for c in _COLUMNS))
    return out
