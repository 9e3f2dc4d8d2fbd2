"""Brute-force oracles for the second-order meta gradient.

Two independent routes are provided for checking ``trainer.hypergradient``:

* ``fd_hypergradient`` differentiates the whole pipeline numerically: perturb
  one generator coordinate, re-run the inner update and the surrogate task
  loss, and take central differences of the resulting values.
* ``expansion_hypergradient`` evaluates the chain-rule factorization of the
  meta gradient through the surrogate update: the product of the task-loss
  gradient at the surrogate parameters with the mixed second derivatives of
  the fusion loss, scaled by the negative inner step size. Every factor is
  obtained by plain finite differences, never by the tape.

Both are exhaustive coordinate loops and are only meant for toy-sized
networks.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import fusion_loss, task_loss
from .networks import ParamSet, fuse, gen_weights, task_forward
from .synthdata import ImagePair
from .trainer import TrainConfig, inner_update, meta_task_loss

__all__ = [
    "fd_hypergradient",
    "expansion_hypergradient",
    "max_relative_error",
]


def max_relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    """Largest deviation between two gradient lists, relative to their scale."""
    av = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in a])
    bv = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in b])
    scale = max(np.max(np.abs(av), initial=0.0), np.max(np.abs(bv), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(av - bv)) / scale)


def _with_coord(params: ParamSet, k: int, i: int, delta: float) -> ParamSet:
    tensors = list(params.tensors())
    v = tensors[k].data.copy()
    v.ravel()[i] += delta
    tensors[k] = Tensor(v, watched=True)
    return params.replace_tensors(tensors)


def _fusion_loss_value(batch: Sequence[ImagePair], theta_f: ParamSet, theta_g: ParamSet, cfg: TrainConfig) -> float:
    with ad.paused():
        total = 0.0
        for pair in batch:
            ia, ib = Tensor(pair.i_a), Tensor(pair.i_b)
            w = gen_weights(ia, ib, theta_g)
            i_f = fuse(ia, ib, theta_f)
            total += fusion_loss(ia, ib, i_f, w, cfg.alpha).total.item()
    return total / len(batch)


def _outer_value(batch: Sequence[ImagePair], f_prime: ParamSet, t_prime: ParamSet) -> float:
    with ad.paused():
        total = 0.0
        for pair in batch:
            i_f = fuse(Tensor(pair.i_a), Tensor(pair.i_b), f_prime)
            total += task_loss(task_forward(i_f, t_prime), pair.labels).item()
    return total / len(batch)


def fd_hypergradient(
    batch_tr: Sequence[ImagePair],
    batch_ts: Sequence[ImagePair],
    theta_f: ParamSet,
    theta_t: ParamSet,
    theta_g: ParamSet,
    cfg: TrainConfig,
    eps: float = 1e-4,
) -> list[np.ndarray]:
    """Central differences of the surrogate task loss over every generator
    coordinate; each evaluation re-runs the complete inner update."""
    out = []
    for k, t in enumerate(theta_g.tensors()):
        g = np.zeros(t.shape)
        for i in range(t.size):
            lp = meta_task_loss(batch_tr, batch_ts, theta_f, theta_t, _with_coord(theta_g, k, i, +eps), cfg)
            lm = meta_task_loss(batch_tr, batch_ts, theta_f, theta_t, _with_coord(theta_g, k, i, -eps), cfg)
            g.ravel()[i] = (lp - lm) / (2 * eps)
        out.append(g)
    return out


def expansion_hypergradient(
    batch_tr: Sequence[ImagePair],
    batch_ts: Sequence[ImagePair],
    theta_f: ParamSet,
    theta_t: ParamSet,
    theta_g: ParamSet,
    cfg: TrainConfig,
    eps_outer: float = 1e-5,
    eps_mixed: float = 1e-3,
) -> list[np.ndarray]:
    """Factored form of the meta gradient, every factor by finite differences.

    d L_t / d theta_g = (dL_t/dtheta_f') * (-eta * d^2 L_f / dtheta_f dtheta_g)
    """
    inner = inner_update(batch_tr, theta_f, theta_t, theta_g, cfg, retain=False)
    f_prime, t_prime = inner.f_prime, inner.t_prime

    # task-loss gradient at the surrogate fusion parameters
    a = []
    for k, t in enumerate(f_prime.tensors()):
        g = np.zeros(t.size)
        for i in range(t.size):
            lp = _outer_value(batch_ts, _with_coord(f_prime, k, i, +eps_outer), t_prime)
            lm = _outer_value(batch_ts, _with_coord(f_prime, k, i, -eps_outer), t_prime)
            g[i] = (lp - lm) / (2 * eps_outer)
        a.append(g)
    a_flat = np.concatenate(a)

    # mixed second derivatives of the fusion loss, four-point differences
    nf = sum(t.size for t in theta_f.tensors())
    out = []
    for kg, tg in enumerate(theta_g.tensors()):
        g = np.zeros(tg.size)
        for j in range(tg.size):
            gp = _with_coord(theta_g, kg, j, +eps_mixed)
            gm = _with_coord(theta_g, kg, j, -eps_mixed)
            col = np.zeros(nf)
            pos = 0
            for kf, tf in enumerate(theta_f.tensors()):
                for i in range(tf.size):
                    lpp = _fusion_loss_value(batch_tr, _with_coord(theta_f, kf, i, +eps_mixed), gp, cfg)
                    lpm = _fusion_loss_value(batch_tr, _with_coord(theta_f, kf, i, +eps_mixed), gm, cfg)
                    lmp = _fusion_loss_value(batch_tr, _with_coord(theta_f, kf, i, -eps_mixed), gp, cfg)
                    lmm = _fusion_loss_value(batch_tr, _with_coord(theta_f, kf, i, -eps_mixed), gm, cfg)
                    col[pos] = (lpp - lpm - lmp + lmm) / (4 * eps_mixed * eps_mixed)
                    pos += 1
            g[j] = -cfg.lr_inner_fusion * float(a_flat @ col)
        out.append(g.reshape(tg.shape))
    return out
