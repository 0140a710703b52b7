"""Single-level strategies for merging target and auxiliary gradients.

All functions act on flat shared-encoder gradients and return a new array;
inputs are never modified.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import UsageError

log = logging.getLogger(__name__)

KAPPA_MAX = 10.0


class CombinerKind(str, enum.Enum):
    FT = "ft"
    MTL = "mtl"
    GRADSIM = "gradsim"
    GRADSCALE = "gradscale"
    PCGRAD = "pcgrad"
    RCGRAD = "rcgrad"


@dataclass
class GradientBundle:
    g_t: np.ndarray
    g_aux: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.g_t = np.asarray(self.g_t, dtype=np.float64)
        self.g_aux = [np.asarray(g, dtype=np.float64) for g in self.g_aux]
        for g in self.g_aux:
            if g.shape != self.g_t.shape:
                raise UsageError(f"auxiliary gradient shape {g.shape} differs from target {self.g_t.shape}")

    @property
    def k(self) -> int:
        return len(self.g_aux)

    def conflicts(self) -> np.ndarray:
        """Per-task flag: strictly negative dot product with the target gradient."""
        return np.array([float(self.g_t @ g) < 0.0 for g in self.g_aux], dtype=bool)


@dataclass
class RotationScalars:
    kappa_t: float = 0.0
    kappa_aux: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def init(cls, k: int) -> "RotationScalars":
        """Start at PCGrad behaviour: kappa_t = 0, kappa_i = 1."""
        return cls(0.0, np.ones(k))

    def clamp(self, kappa_max: float = KAPPA_MAX) -> "RotationScalars":
        return RotationScalars(float(np.clip(self.kappa_t, 0.0, kappa_max)),
                               np.clip(self.kappa_aux, 0.0, kappa_max))

    def as_vector(self) -> np.ndarray:
        return np.r_[self.kappa_t, self.kappa_aux]


def combine_mtl(bundle: GradientBundle, w: Sequence[float] | None = None) -> np.ndarray:
    """g_t + sum_i w_i g_i (equal weights of 1 when ``w`` is omitted)."""
    w = np.ones(bundle.k) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (bundle.k,):
        raise UsageError(f"{bundle.k} auxiliary gradients but {w.size} weights")
    out = bundle.g_t.copy()
    for wi, g in zip(w, bundle.g_aux):
        out += wi * g
    return out


def norm(x: np.ndarray) -> float:
    """Euclidean norm that survives entries whose squares under- or overflow."""
    scale = float(np.max(np.abs(x), initial=0.0))
    if scale == 0.0 or not np.isfinite(scale):
        return scale
    return scale * float(np.linalg.norm(x / scale))


def unit(x: np.ndarray) -> np.ndarray:
    """x / |x|, accurate even when |x| itself is subnormal (zero vector maps to zero)."""
    scale = float(np.max(np.abs(x), initial=0.0))
    if scale == 0.0:
        return np.zeros_like(x, dtype=np.float64)
    y = x / scale
    return y / float(np.linalg.norm(y))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    if not (np.any(a) and np.any(b)):
        return 0.0
    # normalise first so tiny or huge norms cannot under/overflow the product
    return float(np.clip(unit(a) @ unit(b), -1.0, 1.0))


def gradsim_weights(bundle: GradientBundle) -> np.ndarray:
    return np.array([max(0.0, cosine(bundle.g_t, g)) for g in bundle.g_aux])


def combine_gradsim(bundle: GradientBundle) -> np.ndarray:
    """Keep auxiliary gradients weighted by their positive cosine with g_t; drop conflicting ones."""
    if bundle.k and not np.any(bundle.g_t):
        log.warning("gradsim: target gradient is zero, every cosine treated as 0")
    return combine_mtl(bundle, gradsim_weights(bundle))


def gradscale_factor(g_t: np.ndarray, g_a: np.ndarray, symmetric: bool = False) -> float:
    na = norm(g_a)
    if na == 0.0:
        return 0.0
    ratio = norm(g_t) / na
    return ratio if symmetric else max(1.0, ratio)


def gradscale_term(g_t: np.ndarray, g_a: np.ndarray, symmetric: bool = False) -> np.ndarray:
    """The scaled auxiliary contribution ``gradscale_factor * g_a``.

    When the factor is a norm ratio the product is formed as
    ``unit(g_a) * |g_t|``, which stays finite even if |g_t| / |g_a| overflows.
    """
    na, nt = norm(g_a), norm(g_t)
    if na == 0.0:
        return np.zeros_like(g_a, dtype=np.float64)
    if symmetric or nt > na:
        return unit(g_a) * nt
    return np.array(g_a, dtype=np.float64)


def combine_gradscale(bundle: GradientBundle, symmetric: bool = False) -> np.ndarray:
    """g_t + sum_i max(1, |g_t| / |g_i|) g_i.

    ``symmetric=True`` rescales every auxiliary gradient to the target norm,
    attenuating dominant ones as well; off by default.
    """
    out = bundle.g_t.copy()
    for g in bundle.g_aux:
        out += gradscale_term(bundle.g_t, g, symmetric)
    return out


def pcgrad_project(g_a: np.ndarray, g_t: np.ndarray) -> np.ndarray:
    """Remove the component of ``g_a`` along ``g_t``."""
    g_a = np.asarray(g_a, dtype=np.float64)
    g_t = np.asarray(g_t, dtype=np.float64)
    if not np.any(g_t):
        raise UsageError("cannot project onto the normal plane of a zero target gradient")
    u = unit(g_t)
    out = g_a - (g_a @ u) * u
    # one refinement pass removes the cancellation residue of the first subtraction
    return out - (out @ u) * u


def combine_pcgrad(bundle: GradientBundle) -> np.ndarray:
    """Project each conflicting auxiliary gradient onto the normal plane of g_t, then sum."""
    out = bundle.g_t.copy()
    for g, conflict in zip(bundle.g_aux, bundle.conflicts()):
        out += pcgrad_project(g, bundle.g_t) if conflict else g
    return out


def combine_rcgrad(bundle: GradientBundle, kappa: RotationScalars, symmetric: bool = False) -> np.ndarray:
    """Rotation-of-conflicting-gradients update direction.

    Conflicting task i contributes ``kappa_i * oproj(g_i)``; a non-conflicting
    task contributes its gradient-scaled form. The target term is
    ``(1 + kappa_t) g_t`` once any task conflicts, plain ``g_t`` otherwise.
    """
    if kappa.kappa_aux.shape != (bundle.k,):
        raise UsageError(f"{bundle.k} auxiliary gradients but {kappa.kappa_aux.size} rotation scalars")
    conflicts = bundle.conflicts()
    out = (1.0 + kappa.kappa_t) * bundle.g_t if conflicts.any() else bundle.g_t.copy()
    for g, k_i, conflict in zip(bundle.g_aux, kappa.kappa_aux, conflicts):
        if conflict:
            out += k_i * pcgrad_project(g, bundle.g_t)
        else:
            out += gradscale_term(bundle.g_t, g, symmetric)
    return out


def combine(kind: CombinerKind | str, bundle: GradientBundle, *, w=None, kappa: RotationScalars | None = None,
            symmetric: bool = False) -> np.ndarray:
    kind = CombinerKind(kind)
    if kind is CombinerKind.FT:
        return bundle.g_t.copy()
    if kind is CombinerKind.MTL:
        return combine_mtl(bundle, w)
    if kind is CombinerKind.GRADSIM:
        return combine_gradsim(bundle)
    if kind is CombinerKind.GRADSCALE:
        return combine_gradscale(bundle, symmetric)
    if kind is CombinerKind.PCGRAD:
        return combine_pcgrad(bundle)
    return combine_rcgrad(bundle, kappa if kappa is not None else RotationScalars.init(bundle.k), symmetric)


def kappa_partials(
    theta: np.ndarray,
    bundle: GradientBundle,
    kappa: RotationScalars,
    alpha: float,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    symmetric: bool = False,
) -> np.ndarray:
    """d L(theta') / d kappa for the lookahead theta' = theta - alpha * g(kappa).

    Returns ``[dL/dkappa_t, dL/dkappa_1, ...]``. Only conflicting tasks
    depend on kappa, so every other entry is exactly zero.
    """
    conflicts = bundle.conflicts()
    out = np.zeros(bundle.k + 1)
    if not conflicts.any():
        return out
    theta_next = theta - alpha * combine_rcgrad(bundle, kappa, symmetric)
    g_next = grad_fn(theta_next)
    out[0] = -alpha * float(g_next @ bundle.g_t)
    for i, (g, conflict) in enumerate(zip(bundle.g_aux, conflicts)):
        if conflict:
            out[i + 1] = -alpha * float(g_next @ pcgrad_project(g, bundle.g_t))
    return out


def update_kappa(
    theta: np.ndarray,
    bundle: GradientBundle,
    kappa: RotationScalars,
    alpha: float,
    eta: float,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    kappa_max: float = KAPPA_MAX,
    symmetric: bool = False,
) -> RotationScalars:
    """One projected gradient step on kappa through the one-step lookahead."""
    if alpha <= 0 or eta <= 0:
        raise UsageError("alpha and eta must be positive")
    d = kappa_partials(theta, bundle, kappa, alpha, grad_fn, symmetric)
    if not d.any():
        return RotationScalars(kappa.kappa_t, kappa.kappa_aux.copy())
    step = kappa.as_vector() - eta * d
    return RotationScalars(float(step[0]), step[1:]).clamp(kappa_max)
