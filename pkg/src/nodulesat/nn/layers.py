"""Module base class and elementary layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..exceptions import DimensionError, StateError
from . import functional as F
from .tensor import Tensor


class Module:
    """Container of named parameters, buffers and child modules.

    Attribute assignment of a :class:`Tensor` with ``requires_grad`` registers
    a parameter; assignment of a :class:`Module` registers a child. Names in
    :meth:`state_dict` are dotted paths, e.g. ``head.W``.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, Module]]:
        yield from self._children.items()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, flag: bool = True) -> Module:
        object.__setattr__(self, "training", flag)
        for child in self._children.values():
            child.train(flag)
        return self

    def eval(self) -> Module:
        return self.train(False)

    # -- serialization hooks --------------------------------------------------

    def _local_state(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self._params.items():
            yield name, p.data

    def _load_local(self, name: str, value: np.ndarray) -> bool:
        p = self._params.get(name)
        if p is None:
            return False
        if p.shape != value.shape:
            raise DimensionError(f"cannot load {name}: shape {value.shape} != {p.shape}")
        p.data = np.array(value, dtype=np.float64)
        return True

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._local_state()}
        for cname, child in self._children.items():
            out.update(child.state_dict(f"{prefix}{cname}."))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        consumed = set()
        self._load_into(state, "", consumed)
        if strict:
            missing = [k for k in self.state_dict() if k not in consumed]
            if missing:
                raise KeyError(f"checkpoint lacks entries: {missing[:5]}")

    def _load_into(self, state, prefix, consumed) -> None:
        for key, value in state.items():
            if key.startswith(prefix):
                local = key[len(prefix):]
                if "." not in local or self._accepts_dotted(local):
                    if self._load_local(local, value):
                        consumed.add(key)
        for cname, child in self._children.items():
            child._load_into(state, f"{prefix}{cname}.", consumed)

    def _accepts_dotted(self, local: str) -> bool:
        return False


class Linear(Module):
    """y = x W + b with W of shape (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        bound = np.sqrt(6.0 / (in_features + out_features))
        self.W = Tensor(rng.uniform(-bound, bound, (in_features, out_features)), requires_grad=True)
        if bias:
            self.b = Tensor(np.zeros(out_features), requires_grad=True)
        else:
            self.b = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects width {self.in_features}, got shape {x.shape}")
        out = x @ self.W
        return out + self.b if self.b is not None else out


class BatchNorm(Module):
    """Per-channel batch normalization over all leading axes.

    ``frozen`` pins both the running statistics and the affine parameters:
    the layer then always runs in eval mode and takes no gradient.
    """

    def __init__(self, channels: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running = F.RunningStats(channels, momentum)
        self.frozen = False

    def freeze(self, flag: bool = True) -> None:
        if flag and not self.running.populated:
            raise StateError("cannot freeze a BatchNorm whose running statistics are empty")
        self.frozen = flag
        self.gamma.requires_grad = not flag
        self.beta.requires_grad = not flag

    def forward(self, x: Tensor, row_mask: np.ndarray | None = None) -> Tensor:
        mode = "train" if self.training and not self.frozen else "eval"
        return F.batch_norm(
            x, self.gamma, self.beta, mode=mode, running=self.running, row_mask=row_mask, eps=self.eps
        )

    def _local_state(self):
        yield "gamma", self.gamma.data
        yield "beta", self.beta.data
        if self.running.populated:
            yield "mean", self.running.mean
            yield "var", self.running.var

    def _load_local(self, name, value):
        if name in ("mean", "var"):
            if value.shape != (self.channels,):
                raise DimensionError(f"running {name} shape {value.shape} != ({self.channels},)")
            setattr(self.running, name, np.array(value, dtype=np.float64))
            return True
        return super()._load_local(name, value)


class BatchNorm3d(BatchNorm):
    """BatchNorm over (n, c, D, H, W) volumes, channel axis 1."""

    def forward(self, x: Tensor, row_mask=None) -> Tensor:
        moved = x.transpose(0, 2, 3, 4, 1)
        return super().forward(moved).transpose(0, 4, 1, 2, 3)
