"""Shared-KQV attention, Group Shuffle Attention and the Set Attention Transformer.

All functions operate on the last two axes ``(..., N, c)``: ``N`` set elements
with ``c`` channels. An optional boolean ``mask`` of shape ``(..., N)`` marks
valid elements of padded batches; invalid elements are excluded from the
softmax and from batch statistics and produce zero outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .exceptions import ConfigurationError, DimensionError, EmptySetError
from .nn import functional as F
from .nn.layers import BatchNorm, Module
from .nn.tensor import Tensor

# Negative-control hook for the verification suite: when set, channel_shuffle
# applies a row-dependent permutation, which breaks set equivariance.
_CORRUPT_SHUFFLE = False


def set_corrupt_shuffle(flag: bool) -> None:
    global _CORRUPT_SHUFFLE
    _CORRUPT_SHUFFLE = bool(flag)


def scaled_dot_attn(
    x: Tensor, sigma: str = "elu", mask: np.ndarray | None = None
) -> Tensor:
    """softmax(x x^T / sqrt(c)) @ sigma(x), with c = x.shape[-1]."""
    if x.ndim < 2:
        raise DimensionError(f"attention expects (..., N, c), got shape {x.shape}")
    n, c = x.shape[-2], x.shape[-1]
    if n == 0:
        raise EmptySetError("attention over an empty set: a bag needs at least one instance")
    if c == 0:
        raise DimensionError("attention over zero channels")
    scores = (x @ x.swapaxes(-1, -2)) * (1.0 / math.sqrt(c))
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    probs = F.softmax(scores, axis=-1, mask=key_mask)
    return probs @ F.get_activation(sigma)(x)


def _check_groups(c: int, g: int) -> int:
    if g < 1 or c % g:
        raise ConfigurationError(f"channel count {c} is not divisible by group count {g}")
    return c // g


def shuffle_permutation(c: int, g: int) -> np.ndarray:
    """Column order produced by channel_shuffle: out[:, j] = x[:, perm[j]]."""
    cg = _check_groups(c, g)
    return np.arange(c).reshape(g, cg).T.reshape(-1)


def channel_shuffle(x: Tensor, g: int) -> Tensor:
    """View channels as a g x (c/g) grid, transpose, flatten."""
    c = x.shape[-1]
    cg = _check_groups(c, g)
    lead = x.shape[:-1]
    out = x.reshape(*lead, g, cg).swapaxes(-1, -2).reshape(*lead, c)
    if _CORRUPT_SHUFFLE and x.ndim >= 2:
        n = x.shape[-2]
        idx = (np.arange(c)[None, :] + np.arange(n)[:, None]) % c
        out = out[(..., np.arange(n)[:, None], idx)]
    return out


def split_groups(x: Tensor, g: int) -> Tensor:
    """(..., N, c) -> (..., g, N, c/g)."""
    c = x.shape[-1]
    cg = _check_groups(c, g)
    return x.reshape(*x.shape[:-1], g, cg).swapaxes(-3, -2)


def merge_groups(x: Tensor) -> Tensor:
    """(..., g, N, cg) -> (..., N, g*cg), groups concatenated in order."""
    g, n, cg = x.shape[-3:]
    return x.swapaxes(-3, -2).reshape(*x.shape[:-3], n, g * cg)


def group_linear(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply channel group i by weights[i]; weights has shape (g, cg, cg)."""
    g, cg, cg2 = weights.shape
    if cg != cg2 or x.shape[-1] != g * cg:
        raise ConfigurationError(
            f"group_linear: input width {x.shape[-1]} incompatible with weights {weights.shape}"
        )
    return merge_groups(split_groups(x, g) @ weights)


class GSALayer(Module):
    """One Group Shuffle Attention layer: per-group weights plus a BatchNorm.

    Checkpoint names: ``group{j}.W`` for each group and ``bn.{gamma,beta,mean,var}``.
    """

    def __init__(self, c: int, g: int, rng: np.random.Generator, sigma: str = "elu"):
        super().__init__()
        self.c = c
        self.g = g
        self.cg = _check_groups(c, g)
        F.get_activation(sigma)
        self.sigma = sigma
        self.W = Tensor(rng.normal(0.0, 1.0 / math.sqrt(self.cg), (g, self.cg, self.cg)), requires_grad=True)
        self.bn = BatchNorm(c)

    def n_projection_params(self) -> int:
        return self.W.size

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return gsa_forward(x, self, mask=mask)

    def _local_state(self):
        for j in range(self.g):
            yield f"group{j}.W", self.W.data[j]

    def _accepts_dotted(self, local):
        return local.startswith("group") and local.endswith(".W")

    def _load_local(self, name, value):
        if self._accepts_dotted(name):
            j = int(name[len("group"):-len(".W")])
            if not 0 <= j < self.g or value.shape != (self.cg, self.cg):
                raise DimensionError(f"cannot load {name} with shape {value.shape}")
            self.W.data[j] = value
            return True
        return False


GSAParams = GSALayer


def gsa_forward(
    x: Tensor, params: GSALayer, mode: str | None = None, mask: np.ndarray | None = None
) -> Tensor:
    """BN(shuffle(concat_i attn(X^(i) W_i)) + X).

    ``mode`` overrides the BatchNorm's own train/eval state when given.
    """
    if x.shape[-1] != params.c:
        raise ConfigurationError(f"GSA layer width {params.c} != input width {x.shape[-1]}")
    xi = split_groups(x, params.g) @ params.W
    group_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    att = scaled_dot_attn(xi, params.sigma, mask=group_mask)
    y = channel_shuffle(merge_groups(att), params.g) + x
    bn = params.bn
    if mode is None:
        return bn(y, row_mask=mask)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return F.batch_norm(
        y, bn.gamma, bn.beta, mode=mode, running=bn.running, row_mask=mask, eps=bn.eps
    )


@dataclass(frozen=True)
class SATConfig:
    L: int = 3
    H: int = 256
    g: int = 8
    sigma: str = "elu"

    def __post_init__(self):
        if self.L < 0:
            raise ConfigurationError(f"layer count L must be >= 0, got {self.L}")
        if self.H < 1:
            raise ConfigurationError(f"hidden width H must be >= 1, got {self.H}")
        _check_groups(self.H, self.g)
        F.get_activation(self.sigma)


class SetAttentionTransformer(Module):
    """An L-layer stack of GSA layers (children ``layer0`` .. ``layer{L-1}``)."""

    def __init__(self, config: SATConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.layers = []
        for i in range(config.L):
            layer = GSALayer(config.H, config.g, rng, config.sigma)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return sat_forward(x, self, mask=mask)


def sat_forward(
    x: Tensor, sat: SetAttentionTransformer, mode: str | None = None, mask: np.ndarray | None = None
) -> Tensor:
    if x.shape[-1] != sat.config.H:
        raise ConfigurationError(f"SAT width H={sat.config.H} != input width {x.shape[-1]}")
    for layer in sat.layers:
        x = gsa_forward(x, layer, mode=mode, mask=mask)
    return x


class MultiHeadAttentionReference(Module):
    """Standard MHA projections (Q, K, V, output), kept only for parameter counting."""

    def __init__(self, c: int, rng: np.random.Generator):
        super().__init__()
        self.c = c
        scale = 1.0 / math.sqrt(c)
        self.Wq = Tensor(rng.normal(0, scale, (c, c)), requires_grad=True)
        self.Wk = Tensor(rng.normal(0, scale, (c, c)), requires_grad=True)
        self.Wv = Tensor(rng.normal(0, scale, (c, c)), requires_grad=True)
        self.Wo = Tensor(rng.normal(0, scale, (c, c)), requires_grad=True)

    def n_projection_params(self) -> int:
        return sum(p.size for p in (self.Wq, self.Wk, self.Wv, self.Wo))


def param_count_ratio(c: int, g: int) -> Fraction:
    """MHA projection parameters over GSA projection parameters, from live buffers."""
    _check_groups(c, g)
    rng = np.random.default_rng(0)
    mha = MultiHeadAttentionReference(c, rng).n_projection_params()
    gsa = GSALayer(c, g, rng).n_projection_params()
    return Fraction(mha, gsa)
