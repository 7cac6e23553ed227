"""White-box L-infinity attacks on the input image: FGSM and PGD.

Attacks take a ``loss_fn`` mapping an image tensor to a scalar loss. Pixels
live in [0, 1]; every returned image is inside both that range and the
epsilon-ball around the clean input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import NonFiniteError, Tensor

LossFn = Callable[[Tensor], Tensor]
KINDS = ("fgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.03
    alpha: Optional[float] = None  # None -> default_alpha(epsilon, steps)
    steps: int = 40
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind == "pgd":
            if self.steps < 1:
                raise ValueError("PGD needs steps >= 1")
            if self.alpha is not None and not self.alpha > 0:
                raise ValueError("PGD needs alpha > 0")

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else default_alpha(self.epsilon, self.steps)


@dataclass(frozen=True)
class AdversarialResult:
    adversarial_image: np.ndarray
    loss_before: float
    loss_after: float
    linf_distance: float


def default_alpha(epsilon: float, steps: int) -> float:
    """``max(eps/4, 2.5*eps/T)``; a zero budget gets a nominal positive step."""
    alpha = max(epsilon / 4, 2.5 * epsilon / steps)
    return alpha if alpha > 0 else 1.0 / 255


def sign(t) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    return np.sign(arr)


def project_linf(candidate, center, epsilon: float) -> np.ndarray:
    candidate = np.asarray(candidate)
    center = np.asarray(center)
    if candidate.shape != center.shape:
        raise ValueError(f"shape mismatch {candidate.shape} vs {center.shape}")
    return np.clip(candidate, center - epsilon, center + epsilon)


def clamp_valid(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def loss_and_input_grad(loss_fn: LossFn, x: np.ndarray):
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    loss = loss_fn(xt)
    loss.backward()
    if not np.isfinite(xt.grad).all():
        raise NonFiniteError("input gradient")
    return float(loss.data), xt.grad


def _loss(loss_fn: LossFn, x: np.ndarray) -> float:
    return float(loss_fn(Tensor(x, dtype=x.dtype)).data)


def _step(x_cur: np.ndarray, grad: np.ndarray, x0: np.ndarray, step: float, epsilon: float) -> np.ndarray:
    return clamp_valid(project_linf(x_cur + step * np.sign(grad), x0, epsilon))


def fgsm(loss_fn: LossFn, image, epsilon: float) -> AdversarialResult:
    """Single signed-gradient step of size epsilon from the clean image."""
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    x0 = np.array(image.data if isinstance(image, Tensor) else image, dtype=_dtype(image))
    loss_before, grad = loss_and_input_grad(loss_fn, x0)
    x_adv = _step(x0, grad, x0, epsilon, epsilon)
    return _result(loss_fn, x0, x_adv, loss_before)


def pgd(loss_fn: LossFn, image, config: AttackConfig) -> AdversarialResult:
    """``config.steps`` signed-gradient ascent steps, each projected onto the
    epsilon-ball and then clamped to [0, 1]. Returns the last iterate."""
    if config.kind != "pgd":
        raise ValueError("pgd() needs an AttackConfig with kind='pgd'")
    eps = config.epsilon
    x0 = np.array(image.data if isinstance(image, Tensor) else image, dtype=_dtype(image))
    x = x0
    if config.random_start:
        rng = np.random.default_rng(config.seed)
        x = clamp_valid(x0 + rng.uniform(-eps, eps, x0.shape).astype(x0.dtype))
    loss_before = None
    for _ in range(config.steps):
        loss, grad = loss_and_input_grad(loss_fn, x)
        if loss_before is None:
            loss_before = loss if not config.random_start else _loss(loss_fn, x0)
        x = _step(x, grad, x0, config.step_size, eps)
    return _result(loss_fn, x0, x, loss_before)


def run_attack(loss_fn: LossFn, image, config: AttackConfig) -> AdversarialResult:
    if config.kind == "fgsm":
        return fgsm(loss_fn, image, config.epsilon)
    return pgd(loss_fn, image, config)


def _dtype(image):
    dt = image.dtype if hasattr(image, "dtype") else np.float64
    return dt if dt in (np.float32, np.float64) else np.float64


def _result(loss_fn: LossFn, x0: np.ndarray, x_adv: np.ndarray, loss_before: float) -> AdversarialResult:
    x_adv.flags.writeable = False
    return AdversarialResult(
        adversarial_image=x_adv,
        loss_before=loss_before,
        loss_after=_loss(loss_fn, x_adv),
        linf_distance=float(np.max(np.abs(x_adv - x0))) if x0.size else 0.0,
    )
