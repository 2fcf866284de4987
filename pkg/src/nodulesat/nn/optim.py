"""Adam and the three learning-rate schedules used in training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..exceptions import ConfigurationError, DimensionError, NumericDomainError
from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, shape) -> AdamState:
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    name: str = "<param>",
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
) -> np.ndarray:
    """One bias-corrected Adam update, in place on ``param`` and ``state``."""
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise DimensionError(
            f"adam_step shape mismatch for {name}: param {param.shape}, grad {grad.shape}, "
            f"moments {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericDomainError(f"non-finite gradient for parameter {name}")
    state.step += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.step)
    v_hat = state.v / (1 - beta2**state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class Adam:
    """Adam over a name -> Tensor mapping. Parameters with ``requires_grad`` off are skipped."""

    def __init__(self, params: Iterable[tuple[str, Tensor]], lr: float = 1e-3):
        self.params = dict(params)
        self.lr = lr
        self.state: dict[str, AdamState] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdamState.fresh(p.shape)
            adam_step(p.data, p.grad, st, self.lr, name=name)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"adam.m.{name}"] = st.m
            out[f"adam.v.{name}"] = st.v
            out[f"adam.step.{name}"] = np.array([float(st.step)])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for key, value in state.items():
            if key.startswith("adam.m."):
                name = key[len("adam.m."):]
                self.state[name] = AdamState(
                    np.array(value), np.array(state[f"adam.v.{name}"]), int(state[f"adam.step.{name}"][0])
                )


SCHEDULE_KINDS = ("exponential-decay", "step-multiply", "halve-every-k", "constant")


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"
    lr0: float = 1e-3
    ratio: float = 0.03
    factor: float = 0.2
    milestones: tuple[int, ...] = field(default=(100, 130, 170))
    period: int = 30

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.lr0 <= 0:
            raise ConfigurationError("initial learning rate must be positive")
        if not 0 <= self.ratio < 1:
            raise ConfigurationError("decay ratio must lie in [0, 1)")
        if not 0 < self.factor <= 1:
            raise ConfigurationError("step factor must lie in (0, 1]")
        if self.period < 1:
            raise ConfigurationError("halving period must be >= 1")

    def __call__(self, epoch: int) -> float:
        return schedule_lr(self, epoch)


def schedule_lr(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    s = schedule
    if s.kind == "exponential-decay":
        return s.lr0 * (1.0 - s.ratio) ** epoch
    if s.kind == "step-multiply":
        return s.lr0 * s.factor ** sum(1 for m in s.milestones if m <= epoch)
    if s.kind == "halve-every-k":
        return s.lr0 * 0.5 ** (epoch // s.period)
    return s.lr0
