"""Analytically solvable bi-level problem used as a hypergradient oracle.

Inner loss:  L_total(theta, w) = 1/2 theta^T H(w) theta - c(w)^T theta
with H(w) = A + sum_i w_i A_i and c(w) = b + sum_i w_i b_i.
Outer loss:  L_val(theta) = 1/2 theta^T A_v theta - b_v^T theta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

MAX_CONDITION = 1e10


def random_spd(rng: np.random.Generator, dim: int, eig_range: tuple[float, float] = (1.0, 2.0)) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = rng.uniform(*eig_range, size=dim)
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


@dataclass
class QuadraticBilevelProblem:
    A: np.ndarray
    b: np.ndarray
    A_aux: list[np.ndarray]
    b_aux: list[np.ndarray]
    A_val: np.ndarray
    b_val: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, dim: int, k: int,
               eig_range: tuple[float, float] = (1.0, 2.0)) -> "QuadraticBilevelProblem":
        return cls(
            random_spd(rng, dim, eig_range),
            rng.standard_normal(dim),
            [random_spd(rng, dim, eig_range) for _ in range(k)],
            [rng.standard_normal(dim) for _ in range(k)],
            random_spd(rng, dim, eig_range),
            rng.standard_normal(dim),
        )

    @property
    def k(self) -> int:
        return len(self.A_aux)

    def hessian(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        return self.A + sum((wi * Ai for wi, Ai in zip(w, self.A_aux)), np.zeros_like(self.A))

    def linear(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        return self.b + sum((wi * bi for wi, bi in zip(w, self.b_aux)), np.zeros_like(self.b))

    def theta_star(self, w) -> np.ndarray:
        return np.linalg.solve(self.hessian(w), self.linear(w))

    def total_grad(self, theta, w) -> np.ndarray:
        return self.hessian(w) @ theta - self.linear(w)

    def aux_grad(self, theta, i: int) -> np.ndarray:
        return self.A_aux[i] @ theta - self.b_aux[i]

    def val_loss(self, theta) -> float:
        return float(0.5 * theta @ self.A_val @ theta - self.b_val @ theta)

    def val_grad(self, theta) -> np.ndarray:
        return self.A_val @ theta - self.b_val


def quadratic_oracle_hypergrad(problem: QuadraticBilevelProblem, w) -> np.ndarray:
    """Exact d L_val(theta*(w)) / dw by differentiating the closed-form best response."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (problem.k,):
        raise UsageError(f"expected {problem.k} task weights, got shape {w.shape}")
    if np.any(w < 0):
        raise UsageError("task weights must be non-negative")
    H = problem.hessian(w)
    if np.linalg.cond(H) > MAX_CONDITION:
        raise UsageError("inner Hessian is near-singular (condition number > 1e10)")
    theta = np.linalg.solve(H, problem.linear(w))
    # d theta*/d w_i = H^{-1} (b_i - A_i theta*)
    u = np.linalg.solve(H, problem.val_grad(theta))
    return np.array([u @ (bi - Ai @ theta) for Ai, bi in zip(problem.A_aux, problem.b_aux)])
