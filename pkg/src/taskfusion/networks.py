"""The three small convolutional models: fusion, per-pixel task head, and the
loss-weight generator.

All three are plain stacks of same-size 3x3 convolutions with ReLU between
layers. The fusion net ends in a sigmoid so outputs stay in [0, 1]; the
weight generator ends in a channel softmax so its two output maps sum to one
per pixel; the task head emits raw class logits. The generator's final layer
is zero-initialized, which makes the very first generated weights exactly
one half everywhere (softmax of equal logits), i.e. training starts from the
neutral fixed-half weighting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import FusionWeights

__all__ = ["NetSpec", "ParamSet", "init_params", "fuse", "task_forward", "gen_weights"]

KINDS = ("fusion", "task", "lossgen")


@dataclass(frozen=True)
class NetSpec:
    """Architecture description for one conv stack."""

    kind: str
    in_channels: int
    hidden_channels: int
    num_layers: int
    out_channels: int
    kernel_size: int = 3
    seed: int = 0

    def layer_channels(self) -> list[tuple[int, int]]:
        if self.num_layers == 1:
            return [(self.in_channels, self.out_channels)]
        pairs = [(self.in_channels, self.hidden_channels)]
        pairs += [(self.hidden_channels, self.hidden_channels)] * (self.num_layers - 2)
        pairs.append((self.hidden_channels, self.out_channels))
        return pairs

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        for name in ("in_channels", "hidden_channels", "num_layers", "out_channels", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"NetSpec.{name} must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")


class ParamSet:
    """Ordered, named collection of trainable tensors for one network."""

    def __init__(self, kind: str, entries: list[tuple[str, Tensor]]):
        if kind not in KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.kind = kind
        self.entries = list(entries)

    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.entries]

    def get(self, name: str) -> Tensor:
        for n, t in self.entries:
            if n == name:
                return t
        raise KeyError(name)

    def replace_tensors(self, tensors: list[Tensor]) -> "ParamSet":
        if len(tensors) != len(self.entries):
            raise ValueError("tensor count mismatch")
        return ParamSet(self.kind, [(n, t) for (n, _), t in zip(self.entries, tensors)])

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def tobytes(self) -> bytes:
        """Byte image of all parameter payloads, for freeze checks and digests."""
        return b"".join(t.data.tobytes() for t in self.tensors())

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def conv_layers(self) -> list[tuple[Tensor, Tensor]]:
        """(weight, bias) pairs in layer order."""
        ts = self.tensors()
        if len(ts) % 2 != 0:
            raise ValueError("parameter list is not (weight, bias) pairs")
        return [(ts[i], ts[i + 1]) for i in range(0, len(ts), 2)]


def init_params(spec: NetSpec, seed: Optional[int] = None) -> ParamSet:
    """Deterministic fan-in-scaled uniform initialization.

    The lossgen final layer (weights and bias) is zeroed so the generated
    weights start at exactly one half everywhere.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    k = spec.kernel_size
    pairs = spec.layer_channels()
    entries: list[tuple[str, Tensor]] = []
    for li, (cin, cout) in enumerate(pairs):
        last = li == len(pairs) - 1
        if spec.kind == "lossgen" and last:
            w = np.zeros((cout, cin, k, k))
            b = np.zeros((cout,))
        else:
            bound = 1.0 / np.sqrt(cin * k * k)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
            b = rng.uniform(-bound, bound, size=(cout,))
        entries.append((f"conv{li}.weight", Tensor(w, watched=True)))
        entries.append((f"conv{li}.bias", Tensor(b, watched=True)))
    return ParamSet(spec.kind, entries)


def _conv_stack(x: Tensor, params: ParamSet) -> Tensor:
    layers = params.conv_layers()
    for i, (w, b) in enumerate(layers):
        x = ad.conv2d(x, w, b)
        if i < len(layers) - 1:
            x = ad.relu(x)
    return x


def _stack_pair(i_a, i_b) -> Tensor:
    i_a, i_b = ad.as_tensor(i_a), ad.as_tensor(i_b)
    if i_a.ndim != 2 or i_a.shape != i_b.shape:
        raise ad.ShapeError(f"expected two H x W images, got {i_a.shape} and {i_b.shape}")
    h, w = i_a.shape
    return ad.concat0([ad.reshape(i_a, (1, h, w)), ad.reshape(i_b, (1, h, w))])


def fuse(i_a, i_b, params: ParamSet) -> Tensor:
    """Fuse two same-size images in [0,1] into one; output bounded to [0,1]."""
    if params.kind != "fusion":
        raise ValueError("fuse needs fusion parameters")
    x = _stack_pair(i_a, i_b)
    y = ad.sigmoid(_conv_stack(x, params))
    _, h, w = y.shape
    return ad.reshape(y, (h, w))


def task_forward(i_f, params: ParamSet) -> Tensor:
    """Per-pixel class logits (C, H, W) for a fused image."""
    if params.kind != "task":
        raise ValueError("task_forward needs task parameters")
    i_f = ad.as_tensor(i_f)
    if i_f.ndim != 2:
        raise ad.ShapeError(f"expected an H x W image, got {i_f.shape}")
    h, w = i_f.shape
    return _conv_stack(ad.reshape(i_f, (1, h, w)), params)


def gen_weights(i_a, i_b, params: ParamSet) -> FusionWeights:
    """Per-pixel fusion weights on the simplex (channel softmax of a 2-channel head)."""
    if params.kind != "lossgen":
        raise ValueError("gen_weights needs lossgen parameters")
    x = _stack_pair(i_a, i_b)
    logits = _conv_stack(x, params)
    if logits.shape[0] != 2:
        raise ad.ShapeError("lossgen head must have exactly 2 channels")
    w = ad.softmax0(logits)
    _, h, wd = w.shape
    hw = h * wd
    w_a = ad.take(w, np.arange(0, hw, dtype=np.intp), (h, wd))
    w_b = ad.take(w, np.arange(hw, 2 * hw, dtype=np.intp), (h, wd))
    return FusionWeights(w_a=w_a, w_b=w_b)
