"""Alternating training of the loss generator and the fusion/task networks.

Each epoch has two phases. The meta phase repeats M times: an *inner* update
builds one-step surrogate copies of the fusion and task networks, where the
fusion surrogate's gradient step is recorded with graph retention so the new
parameters remain a differentiable function of the loss generator; an *outer*
update then evaluates the task loss of the surrogate's fused output on a
disjoint meta-test batch and steps the loss generator along the resulting
second-order gradient. The fusion phase repeats N times, training the actual
fusion and task networks with the (now frozen) generated loss weights.

The originals are never touched by the phase that does not own them: inner
and outer updates leave the fusion/task parameters byte-identical, fusion
updates leave the generator byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, grad, sgd_step
from .losses import fusion_loss, task_loss
from .networks import NetSpec, ParamSet, fuse, gen_weights, init_params, task_forward
from .synthdata import ImagePair

__all__ = [
    "TrainConfig",
    "DatasetSplit",
    "TrainState",
    "LogRecord",
    "TrainingAborted",
    "sample_meta_sets",
    "inner_update",
    "outer_update",
    "fusion_update",
    "run",
    "hypergradient",
    "meta_task_loss",
    "network_specs",
    "evaluate_accuracy",
]


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of a training run; defaults are the 64x64 desk scale."""

    epochs: int = 10
    meta_steps: int = 8
    fusion_steps: int = 0  # 0 = one pass over the dataset per epoch
    batch_size: int = 2
    lr_inner_fusion: float = 0.5
    lr_inner_task: float = 0.25
    lr_lossgen: float = 200.0
    lr_fusion: float = 0.5
    lr_task: float = 0.25
    alpha: float = 1.0
    seed: int = 0
    num_classes: int = 3
    hidden_channels: int = 16
    conv_layers: int = 4
    kernel_size: int = 3
    optimizer: str = "sgd"  # "sgd" | "adam" (outer/fusion phases only)
    fixed_weights: bool = False  # freeze the generator at its neutral init

    def validate(self, dataset_size: Optional[int] = None) -> None:
        for name in ("epochs", "meta_steps", "batch_size", "num_classes",
                     "hidden_channels", "conv_layers", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"TrainConfig.{name} must be >= 1")
        if self.fusion_steps < 0:
            raise ValueError("TrainConfig.fusion_steps must be >= 0")
        for name in ("lr_inner_fusion", "lr_inner_task", "lr_lossgen", "lr_fusion", "lr_task"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if dataset_size is not None and 2 * self.meta_steps > dataset_size:
            raise ValueError(
                f"meta subsets need 2*meta_steps <= dataset size "
                f"({2 * self.meta_steps} > {dataset_size})"
            )

    def resolved_fusion_steps(self, dataset_size: int) -> int:
        if self.fusion_steps > 0:
            return self.fusion_steps
        return -(-dataset_size // self.batch_size)  # ceil


@dataclass
class DatasetSplit:
    """Per-epoch partition: all pairs, plus two disjoint meta subsets."""

    fusion_train: list[ImagePair]
    meta_train: list[ImagePair]
    meta_test: list[ImagePair]


@dataclass
class LogRecord:
    phase: str
    step: int
    l_f: float
    l_int: float
    l_grad: float
    l_t: float
    w_mean: float
    w_min: float
    w_max: float

    def format(self) -> str:
        return (
            f"phase={self.phase} step={self.step} "
            f"L_f={self.l_f:.10g} L_int={self.l_int:.10g} L_grad={self.l_grad:.10g} "
            f"L_t={self.l_t:.10g} "
            f"w_mean={self.w_mean:.10g} w_min={self.w_min:.10g} w_max={self.w_max:.10g}"
        )


@dataclass
class TrainState:
    theta_f: ParamSet
    theta_t: ParamSet
    theta_g: ParamSet
    epoch: int = 0
    logs: list[LogRecord] = field(default_factory=list)


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss or gradient stops the run."""

    def __init__(self, phase: str, epoch: int, step: int, cause: Exception):
        super().__init__(f"non-finite value in {phase} update (epoch {epoch}, step {step}): {cause}")
        self.phase = phase
        self.epoch = epoch
        self.step = step


def network_specs(cfg: TrainConfig) -> tuple[NetSpec, NetSpec, NetSpec]:
    """Architectures for the fusion, task, and lossgen nets at this config."""
    common = dict(
        hidden_channels=cfg.hidden_channels,
        num_layers=cfg.conv_layers,
        kernel_size=cfg.kernel_size,
    )
    return (
        NetSpec("fusion", in_channels=2, out_channels=1, **common),
        NetSpec("task", in_channels=1, out_channels=cfg.num_classes, **common),
        NetSpec("lossgen", in_channels=2, out_channels=2, **common),
    )


def sample_meta_sets(dataset: Sequence[ImagePair], m: int, rng: np.random.Generator) -> DatasetSplit:
    """Draw two disjoint uniform subsets of size m from the training set."""
    if 2 * m > len(dataset):
        raise ValueError(f"need 2*{m} <= dataset size {len(dataset)}")
    idx = rng.permutation(len(dataset))[: 2 * m]
    return DatasetSplit(
        fusion_train=list(dataset),
        meta_train=[dataset[i] for i in idx[:m]],
        meta_test=[dataset[i] for i in idx[m:]],
    )


def _w_stats(weights) -> tuple[float, float, float]:
    wa = weights.w_a.data
    return float(wa.mean()), float(wa.min()), float(wa.max())


@dataclass
class InnerStep:
    """Result of one inner update; the tape keeps the retained graph alive."""

    f_prime: ParamSet
    t_prime: ParamSet
    tape: Tape
    record: LogRecord


def inner_update(
    batch: Sequence[ImagePair],
    theta_f: ParamSet,
    theta_t: ParamSet,
    theta_g: ParamSet,
    cfg: TrainConfig,
    retain: bool = True,
) -> InnerStep:
    """One-step surrogates of the fusion and task nets; originals untouched.

    The fusion surrogate is built with graph retention (unless ``retain`` is
    cleared for value-only evaluation), so it stays differentiable w.r.t. the
    loss generator's parameters.
    """
    if not batch:
        raise ValueError("inner_update needs a non-empty batch")
    inv = 1.0 / len(batch)
    tape = Tape()
    with tape:
        total_f = total_t = None
        int_sum = grad_sum = 0.0
        stats = np.zeros(3)
        for pair in batch:
            ia, ib = Tensor(pair.i_a), Tensor(pair.i_b)
            w = gen_weights(ia, ib, theta_g)
            i_f = fuse(ia, ib, theta_f)
            terms = fusion_loss(ia, ib, i_f, w, cfg.alpha)
            lt = task_loss(task_forward(i_f, theta_t), pair.labels)
            total_f = terms.total if total_f is None else ad.add(total_f, terms.total)
            total_t = lt if total_t is None else ad.add(total_t, lt)
            int_sum += terms.intensity.item()
            grad_sum += terms.gradient.item()
            stats += _w_stats(w)
        l_f = ad.mul(total_f, inv)
        l_t = ad.mul(total_t, inv)
        g_f = grad(l_f, theta_f.tensors(), retain=retain)
        f_prime = theta_f.replace_tensors(
            sgd_step(theta_f.tensors(), g_f, cfg.lr_inner_fusion, differentiable=retain)
        )
        g_t = grad(l_t, theta_t.tensors())
        t_prime = theta_t.replace_tensors(
            sgd_step(theta_t.tensors(), g_t, cfg.lr_inner_task)
        )
    record = LogRecord(
        phase="inner",
        step=0,
        l_f=l_f.item(),
        l_int=int_sum * inv,
        l_grad=grad_sum * inv,
        l_t=l_t.item(),
        w_mean=stats[0] * inv,
        w_min=stats[1] * inv,
        w_max=stats[2] * inv,
    )
    return InnerStep(f_prime=f_prime, t_prime=t_prime, tape=tape, record=record)


def _outer_loss(batch: Sequence[ImagePair], f_prime: ParamSet, t_prime: ParamSet):
    """Mean task loss of the surrogate pipeline on a batch; returns (loss, fused)."""
    total = None
    fused = []
    for pair in batch:
        i_f = fuse(Tensor(pair.i_a), Tensor(pair.i_b), f_prime)
        lt = task_loss(task_forward(i_f, t_prime), pair.labels)
        total = lt if total is None else ad.add(total, lt)
        fused.append(i_f.data)
    return ad.mul(total, 1.0 / len(batch)), fused


def outer_update(
    batch: Sequence[ImagePair],
    f_prime: ParamSet,
    t_prime: ParamSet,
    theta_g: ParamSet,
    cfg: TrainConfig,
    opt_state: Optional["AdamState"] = None,
) -> tuple[ParamSet, LogRecord]:
    """Step the loss generator along the gradient of the surrogate task loss.

    The gradient reaches the generator only through the retained dependence of
    the fusion surrogate on the generated weights.
    """
    if not batch:
        raise ValueError("outer_update needs a non-empty batch")
    tape = f_prime.tensors()[0].tape
    if tape is None:
        raise ad.TapeError("outer_update requires the retained graph of an inner update")
    with tape:
        l_t, fused = _outer_loss(batch, f_prime, t_prime)
        hyper = grad(l_t, theta_g.tensors())
    new_g = theta_g.replace_tensors(_step(theta_g.tensors(), hyper, cfg.lr_lossgen, opt_state))

    # diagnostics with the *updated* generator; also enforces the simplex
    int_sum = grad_sum = 0.0
    stats = np.zeros(3)
    with ad.paused():
        for pair, i_f in zip(batch, fused):
            w = gen_weights(Tensor(pair.i_a), Tensor(pair.i_b), new_g)
            terms = fusion_loss(pair.i_a, pair.i_b, i_f, w, cfg.alpha)
            int_sum += terms.intensity.item()
            grad_sum += terms.gradient.item()
            stats += _w_stats(w)
    inv = 1.0 / len(batch)
    record = LogRecord(
        phase="outer",
        step=0,
        l_f=(int_sum + cfg.alpha * grad_sum) * inv,
        l_int=int_sum * inv,
        l_grad=grad_sum * inv,
        l_t=l_t.item(),
        w_mean=stats[0] * inv,
        w_min=stats[1] * inv,
        w_max=stats[2] * inv,
    )
    return new_g, record


def fusion_update(
    batch: Sequence[ImagePair],
    theta_f: ParamSet,
    theta_t: ParamSet,
    theta_g: ParamSet,
    cfg: TrainConfig,
    opt_f: Optional["AdamState"] = None,
    opt_t: Optional["AdamState"] = None,
) -> tuple[ParamSet, ParamSet, LogRecord]:
    """Ordinary training step of the fusion and task nets; generator frozen."""
    if not batch:
        raise ValueError("fusion_update needs a non-empty batch")
    inv = 1.0 / len(batch)
    with Tape():
        total_f = total_t = None
        int_sum = grad_sum = 0.0
        stats = np.zeros(3)
        for pair in batch:
            ia, ib = Tensor(pair.i_a), Tensor(pair.i_b)
            with ad.paused():
                w = gen_weights(ia, ib, theta_g)  # weights are constants here
            i_f = fuse(ia, ib, theta_f)
            terms = fusion_loss(ia, ib, i_f, w, cfg.alpha)
            lt = task_loss(task_forward(i_f, theta_t), pair.labels)
            total_f = terms.total if total_f is None else ad.add(total_f, terms.total)
            total_t = lt if total_t is None else ad.add(total_t, lt)
            int_sum += terms.intensity.item()
            grad_sum += terms.gradient.item()
            stats += _w_stats(w)
        l_f = ad.mul(total_f, inv)
        l_t = ad.mul(total_t, inv)
        g_f = grad(l_f, theta_f.tensors())
        g_t = grad(l_t, theta_t.tensors())
    new_f = theta_f.replace_tensors(_step(theta_f.tensors(), g_f, cfg.lr_fusion, opt_f))
    new_t = theta_t.replace_tensors(_step(theta_t.tensors(), g_t, cfg.lr_task, opt_t))
    record = LogRecord(
        phase="fusion",
        step=0,
        l_f=l_f.item(),
        l_int=int_sum * inv,
        l_grad=grad_sum * inv,
        l_t=l_t.item(),
        w_mean=stats[0] * inv,
        w_min=stats[1] * inv,
        w_max=stats[2] * inv,
    )
    return new_f, new_t, record


class AdamState:
    """Adam moments for one parameter list (non-differentiable updates only)."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def apply(self, params: Sequence[Tensor], grads: Sequence[Tensor], lr: float) -> list[Tensor]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g.data
            self.v[i] = b2 * self.v[i] + (1 - b2) * g.data * g.data
            mh = self.m[i] / (1 - b1 ** self.t)
            vh = self.v[i] / (1 - b2 ** self.t)
            out.append(Tensor(p.data - lr * mh / (np.sqrt(vh) + self.eps), watched=True))
        return out


def _step(params, grads, lr, opt_state: Optional[AdamState]) -> list[Tensor]:
    if opt_state is None:
        return sgd_step(params, grads, lr)
    return opt_state.apply(params, grads, lr)


_SIMPLEX_TOL = 1e-9


def _check_simplex(theta_g: ParamSet, batch: Sequence[ImagePair]) -> None:
    with ad.paused():
        for pair in batch:
            w = gen_weights(Tensor(pair.i_a), Tensor(pair.i_b), theta_g)
            resid = np.max(np.abs(w.w_a.data + w.w_b.data - 1.0))
            if resid > _SIMPLEX_TOL or w.w_a.data.min() < 0 or w.w_a.data.max() > 1:
                raise AssertionError(f"simplex violated after outer update (residual {resid})")


def run(
    dataset: Sequence[ImagePair],
    cfg: TrainConfig,
    log_fn: Optional[Callable[[str], None]] = None,
    on_update: Optional[Callable[[LogRecord, TrainState], None]] = None,
) -> TrainState:
    """Full alternating schedule over ``cfg.epochs`` epochs.

    Per epoch: resample the meta subsets, do ``meta_steps`` inner+outer
    pairs, then ``fusion_steps`` fusion updates (one dataset pass by
    default). Aborts with :class:`TrainingAborted` on non-finite losses.
    """
    cfg.validate(dataset_size=len(dataset))
    spec_f, spec_t, spec_g = network_specs(cfg)
    root = np.random.SeedSequence(cfg.seed)
    init_ss, sample_ss = root.spawn(2)
    seeds = [int(s.generate_state(1)[0]) for s in init_ss.spawn(3)]
    state = TrainState(
        theta_f=init_params(spec_f, seeds[0]),
        theta_t=init_params(spec_t, seeds[1]),
        theta_g=init_params(spec_g, seeds[2]),
    )
    rng = np.random.default_rng(sample_ss)
    n_fusion = cfg.resolved_fusion_steps(len(dataset))
    adam: dict[str, Optional[AdamState]] = {"f": None, "t": None, "g": None}
    if cfg.optimizer == "adam":
        adam = {
            "f": AdamState(state.theta_f.tensors()),
            "t": AdamState(state.theta_t.tensors()),
            "g": AdamState(state.theta_g.tensors()),
        }
    queue: list[int] = []

    def next_fusion_batch() -> list[ImagePair]:
        nonlocal queue
        batch = []
        for _ in range(cfg.batch_size):
            if not queue:
                queue = list(rng.permutation(len(dataset)))
            batch.append(dataset[queue.pop()])
        return batch

    def emit(record: LogRecord, counter: int) -> None:
        record.step = counter
        state.logs.append(record)
        if log_fn is not None:
            log_fn(record.format())
        if on_update is not None:
            on_update(record, state)

    inner_n = outer_n = fusion_n = 0
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        if not cfg.fixed_weights:
            split = sample_meta_sets(dataset, cfg.meta_steps, rng)
            frozen_f = state.theta_f.tobytes()
            frozen_t = state.theta_t.tobytes()
            for _ in range(cfg.meta_steps):
                tr_idx = rng.integers(0, cfg.meta_steps, size=cfg.batch_size)
                ts_idx = rng.integers(0, cfg.meta_steps, size=cfg.batch_size)
                batch_tr = [split.meta_train[i] for i in tr_idx]
                batch_ts = [split.meta_test[i] for i in ts_idx]
                try:
                    inner = inner_update(batch_tr, state.theta_f, state.theta_t, state.theta_g, cfg)
                    inner_n += 1
                    emit(inner.record, inner_n)
                    state.theta_g, record = outer_update(
                        batch_ts, inner.f_prime, inner.t_prime, state.theta_g, cfg, adam["g"]
                    )
                except ad.NonFiniteError as e:
                    raise TrainingAborted("meta", epoch, inner_n + 1, e) from e
                outer_n += 1
                _check_simplex(state.theta_g, batch_ts)
                if state.theta_f.tobytes() != frozen_f or state.theta_t.tobytes() != frozen_t:
                    raise RuntimeError("fusion/task params drifted during the meta phase")
                emit(record, outer_n)
        frozen_g = state.theta_g.tobytes()
        for _ in range(n_fusion):
            batch = next_fusion_batch()
            try:
                state.theta_f, state.theta_t, record = fusion_update(
                    batch, state.theta_f, state.theta_t, state.theta_g, cfg,
                    adam["f"], adam["t"],
                )
            except ad.NonFiniteError as e:
                raise TrainingAborted("fusion", epoch, fusion_n + 1, e) from e
            fusion_n += 1
            if state.theta_g.tobytes() != frozen_g:
                raise RuntimeError("lossgen params drifted during the fusion phase")
            emit(record, fusion_n)
    return state


# --------------------------------------------------------------------------
# Verification entry points (used by tests and the check-grad command)


def hypergradient(
    batch_tr: Sequence[ImagePair],
    batch_ts: Sequence[ImagePair],
    theta_f: ParamSet,
    theta_t: ParamSet,
    theta_g: ParamSet,
    cfg: TrainConfig,
) -> list[np.ndarray]:
    """Gradient of the surrogate task loss w.r.t. the generator parameters,
    computed by the same retained-graph route the trainer uses."""
    inner = inner_update(batch_tr, theta_f, theta_t, theta_g, cfg)
    with inner.tape:
        l_t, _ = _outer_loss(batch_ts, inner.f_prime, inner.t_prime)
        hyper = grad(l_t, theta_g.tensors())
    return [h.data.copy() for h in hyper]


def meta_task_loss(
    batch_tr: Sequence[ImagePair],
    batch_ts: Sequence[ImagePair],
    theta_f: ParamSet,
    theta_t: ParamSet,
    theta_g: ParamSet,
    cfg: TrainConfig,
) -> float:
    """Value of the surrogate task loss (the function ``hypergradient``
    differentiates); used as the target of finite-difference oracles."""
    inner = inner_update(batch_tr, theta_f, theta_t, theta_g, cfg, retain=False)
    l_t, _ = _outer_loss(batch_ts, inner.f_prime, inner.t_prime)
    return l_t.item()


def evaluate_accuracy(theta_f: ParamSet, theta_t: ParamSet, pairs: Sequence[ImagePair]) -> float:
    """Mean per-pixel accuracy of the task head on fused images."""
    correct = 0
    total = 0
    with ad.paused():
        for pair in pairs:
            i_f = fuse(Tensor(pair.i_a), Tensor(pair.i_b), theta_f)
            logits = task_forward(i_f, theta_t)
            pred = np.argmax(logits.data, axis=0)
            correct += int((pred == pair.labels).sum())
            total += pair.labels.size
    return correct / total
