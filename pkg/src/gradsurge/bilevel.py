"""Bi-level learning of auxiliary task weights and rotation scalars.

Task weights w are learned on held-out target loss through implicit
differentiation of the inner problem; the inverse Hessian of the inner
loss is replaced by a truncated Neumann series evaluated with
finite-difference Hessian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import hvp
from .errors import ConfigError, NeumannDivergenceError, UsageError

GradFn = Callable[[np.ndarray], np.ndarray]

W_MAX = 10.0
GROWTH_LIMIT = 1e3


@dataclass
class BiLevelConfig:
    M: int = 3
    beta: float = 0.001
    r: int = 10
    eta_w: float = 0.001

    def __post_init__(self):
        if self.M < 0 or self.beta <= 0 or self.r < 1 or self.eta_w <= 0:
            raise ConfigError(f"invalid bi-level settings {self}")


@dataclass
class TaskWeights:
    w: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def init(cls, k: int) -> "TaskWeights":
        return cls(np.full(k, 1.0 / k) if k else np.zeros(0))

    def step(self, hypergrad: np.ndarray, eta: float, w_max: float = W_MAX, clamp: bool = True) -> "TaskWeights":
        w = self.w - eta * np.asarray(hypergrad, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise NeumannDivergenceError("task-weight update produced non-finite values")
        return TaskWeights(np.clip(w, 0.0, w_max) if clamp else w)


def mixed_partial_rows(theta: np.ndarray, aux_grad_fns: Sequence[GradFn]) -> list[np.ndarray]:
    """Rows of d/dw grad_theta L_total; row i is grad_theta L_aux_i, independent of w."""
    return [np.asarray(fn(theta), dtype=np.float64) for fn in aux_grad_fns]


def estimate_spectral_radius(grad_fn: GradFn, theta: np.ndarray, n_iter: int = 300, seed: int = 0,
                             tol: float = 1e-12) -> float:
    """Largest |eigenvalue| of the Hessian of the loss behind ``grad_fn``.

    Power iteration; the Rayleigh quotient is the estimate, since for a
    symmetric Hessian its error shrinks twice as fast as the iterate's.
    """
    v = np.random.default_rng(seed).standard_normal(theta.shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        hv = hvp(grad_fn, theta, v)
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            return 0.0
        new_lam = abs(float(v @ hv))
        v = hv / norm
        if abs(new_lam - lam) <= tol * new_lam:
            return new_lam
        lam = new_lam
    return lam


def neumann_inverse_hvp(
    total_grad_fn: GradFn,
    theta: np.ndarray,
    v: np.ndarray,
    M: int,
    beta: float,
    growth_limit: float = GROWTH_LIMIT,
) -> np.ndarray:
    """q = sum_{j=0..M} (I - beta H)^j v, with H the Hessian of the inner loss at theta.

    ``beta * q`` approximates ``H^{-1} v``. Raises
    :class:`NeumannDivergenceError` if the iterate blows up.
    """
    p = np.array(v, dtype=np.float64)
    q = p.copy()
    p0 = float(np.linalg.norm(p))
    for j in range(1, M + 1):
        p = p - beta * hvp(total_grad_fn, theta, p)
        q = q + p
        pn = float(np.linalg.norm(p))
        if not np.isfinite(pn) or not np.all(np.isfinite(q)):
            raise NeumannDivergenceError(f"Neumann series non-finite at step {j}; reduce beta")
        if p0 > 0 and pn > growth_limit * p0:
            raise NeumannDivergenceError(
                f"Neumann series diverging at step {j} (|p| grew {pn / p0:.3g}x); reduce beta"
            )
    return q


def neumann_hypergrad(
    theta: np.ndarray,
    total_grad_fn: GradFn,
    val_grad_fn: GradFn,
    aux_grad_fns: Sequence[GradFn],
    cfg: BiLevelConfig,
    radius_check: bool = False,
) -> np.ndarray:
    """Hypergradient of the held-out target loss w.r.t. the task weights.

    p = q = grad L_val; repeat M times: p -= beta * H p, q += p; return
    -(q . grad L_aux_i) for each i. The result carries the 1/beta scale of
    the raw series (beta * q ~ H^{-1} grad L_val).

    With ``radius_check`` the dominant Hessian eigenvalue is estimated first
    and a step size outside the convergence radius (beta * lambda >= 2) is
    rejected before iterating.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if radius_check:
        lam = estimate_spectral_radius(total_grad_fn, theta)
        if cfg.beta * lam >= 2.0:
            raise NeumannDivergenceError(
                f"beta={cfg.beta:.4g} is outside the Neumann convergence radius "
                f"(beta * lambda_max = {cfg.beta * lam:.4g} >= 2); use beta < {2.0 / lam:.4g}"
            )
    g_val = np.asarray(val_grad_fn(theta), dtype=np.float64)
    if g_val.shape != theta.shape:
        raise UsageError("validation gradient does not match the parameter vector")
    rows = mixed_partial_rows(theta, aux_grad_fns)
    if not np.any(g_val):
        return np.zeros(len(rows))
    q = neumann_inverse_hvp(total_grad_fn, theta, g_val, cfg.M, cfg.beta)
    return np.array([-float(q @ row) for row in rows])


def blo_train(model, split, cfg, epochs: int | None = None, **kwargs):
    """Train with task weights learned by implicit hypergradients.

    ``cfg`` is a :class:`~gradsurge.training.TrainConfig`; its method is
    forced to ``blo``. Returns the :class:`~gradsurge.training.TrainResult`,
    whose ``w_trace`` lists ``(step, task index, value)``.
    """
    from .training import Trainer

    return Trainer(cfg.replace(method="blo", **({"epochs": epochs} if epochs else {})), **kwargs).fit(model, split)


def blorc_train(model, split, cfg, epochs: int | None = None, **kwargs):
    """Train with RCGrad directions whose rotation scalars are tuned on held-out target loss."""
    from .training import Trainer

    return Trainer(cfg.replace(method="blorc", **({"epochs": epochs} if epochs else {})), **kwargs).fit(model, split)
