"""Self-checks against independent references, runnable from the CLI.

Each check yields a :class:`CheckResult` with the worst observed error, the
value it should have, and the tolerance it was held to. Tolerances can be
scaled (a scale below 1 tightens every threshold).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .bilevel import BiLevelConfig, neumann_hypergrad
from .combiners import (
    GradientBundle,
    RotationScalars,
    combine_gradscale,
    combine_gradsim,
    combine_mtl,
    combine_pcgrad,
    combine_rcgrad,
    cosine,
    kappa_partials,
    pcgrad_project,
)
from .errors import NeumannDivergenceError
from .graphs import GraphBatch, SyntheticGraph, gen_dataset
from .metrics import roc_auc
from .models import Pass, flatten
from .quadratic import QuadraticBilevelProblem, quadratic_oracle_hypergrad
from .tasks import build_model, task_loss


@dataclass
class CheckResult:
    module: str
    property: str
    observed: float
    expected: float
    tolerance: float
    status: str  # "pass", "fail" or "divergent"
    advisory: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def line(self) -> str:
        msg = (f"[{self.status.upper():9s}] {self.module}: {self.property}  "
               f"observed={self.observed:.3g} expected={self.expected:.3g} tol={self.tolerance:.3g}")
        return msg + (f"  ({self.advisory})" if self.advisory else "")

    def to_json(self) -> dict:
        return asdict(self)


def _result(module, prop, observed, tol, expected=0.0) -> CheckResult:
    ok = bool(np.isfinite(observed)) and abs(observed - expected) <= tol
    return CheckResult(module, prop, float(observed), float(expected), float(tol), "pass" if ok else "fail")


def _fd(f, x, h=1e-6, coords=None):
    coords = range(x.size) if coords is None else coords
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        e = np.zeros_like(x)
        e.flat[i] = h
        out[j] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def _rel(a, b, floor=1e-6) -> float:
    scale = np.maximum(np.abs(a), np.abs(b))
    mask = scale > floor
    if not mask.any():
        return float(np.max(np.abs(a - b), initial=0.0))
    return float(np.max(np.abs(a - b)[mask] / scale[mask]))


# -- autodiff -------------------------------------------------------------------------

def _op_instances(rng):
    """(operand arrays, builder) per op kind; builders take tape leaves."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    idx = rng.integers(0, 3, size=5)
    labels = (rng.random((3, 4)) > 0.5).astype(float)
    S = sp.csr_matrix(rng.standard_normal((2, 3)) * (rng.random((2, 3)) > 0.3))
    return {
        "matmul": ([a, b], lambda x, y: ad.forward_op("matmul", x, y)),
        "matmul (sparse left)": ([a], lambda x: ad.forward_op("matmul", S, x)),
        "add": ([a, rng.standard_normal(4)], lambda x, y: ad.forward_op("add", x, y)),
        "mul": ([a, rng.standard_normal((3, 4))], lambda x, y: ad.forward_op("mul", x, y)),
        "scalar-mul": ([a], lambda x: ad.forward_op("scalar-mul", x, 1.7)),
        "relu": ([a], lambda x: ad.forward_op("relu", x)),
        "sigmoid": ([a], lambda x: ad.forward_op("sigmoid", x)),
        "mean-reduce": ([a], lambda x: ad.forward_op("mean-reduce", x, axis=0)),
        "sum-reduce": ([a], lambda x: ad.forward_op("sum-reduce", x, axis=1)),
        "concat": ([a, rng.standard_normal((2, 4))], lambda x, y: ad.forward_op("concat", x, y)),
        "index-gather": ([a], lambda x: ad.forward_op("index-gather", x, idx)),
        "reshape": ([a], lambda x: ad.forward_op("reshape", x, (4, 3))),
        "bce-with-logits": ([a], lambda x: ad.forward_op("bce-with-logits", x, labels)),
        "softmax-cross-entropy": ([a], lambda x: ad.forward_op("softmax-cross-entropy", x, idx[:3] % 4)),
        "mean-squared-error": ([a], lambda x: ad.forward_op("mean-squared-error", x, labels)),
    }


def _scalarize(tape, out, rng):
    if out.data.ndim == 0:
        return out
    return ad.sum_reduce(ad.mul(out, tape.constant(rng.standard_normal(out.data.shape))))


def check_op_gradients(n_instances: int = 7, tol: float = 1e-4) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for trial in range(n_instances):
        rng = np.random.default_rng(trial)
        for name, (arrays, build) in _op_instances(rng).items():
            contract_seed = 10_000 + trial

            def value(xs, grads=False):
                tape = ad.Tape()
                leaves = [tape.leaf(x) for x in xs]
                loss = _scalarize(tape, build(*leaves), np.random.default_rng(contract_seed))
                return tape.backward(loss, leaves) if grads else loss.item()

            grads = value(arrays, grads=True)
            err = 0.0
            for j, x in enumerate(arrays):
                def f(v, j=j):
                    xs = list(arrays)
                    xs[j] = v
                    return value(xs)
                err = max(err, _rel(np.asarray(grads[j]).ravel(), _fd(f, x.copy()).ravel()))
            worst[name] = max(worst.get(name, 0.0), err)
    return [_result("autodiff", f"{name} gradient vs central differences", e, tol) for name, e in worst.items()]


# -- models and tasks -------------------------------------------------------------------

def check_loss_gradients(n_instances: int = 2, n_coords: int = 30, tol: float = 1e-4) -> list[CheckResult]:
    out = []
    for task in ("target", "am", "ep", "ig", "mp", "adv"):
        err = 0.0
        for trial in range(n_instances):
            m = build_model(np.random.default_rng(trial), ("am", "ep", "ig", "mp", "adv"), n_layers=2, hidden=6)
            batch = GraphBatch(gen_dataset(500 + trial, 4))
            leaves = list(m.encoder.params) + [a for h in m.heads.values() for a in h.params]
            # off the init point: zero biases over a dead unit put a relu exactly on its kink
            x0 = flatten(leaves) + 0.1 * np.random.default_rng(trial + 1).standard_normal(sum(a.size for a in leaves))

            def load(x):
                pos = 0
                for a in leaves:
                    a[...] = x[pos : pos + a.size].reshape(a.shape)
                    pos += a.size

            def value(x):
                load(x)
                return task_loss(Pass(m, batch), task, seed=trial).item()

            load(x0)
            p = Pass(m, batch)
            enc, heads = p.gradients(task_loss(p, task, seed=trial))
            analytic = np.concatenate([enc] + [np.ravel(g) for gs in heads.values() for g in gs])
            # the adversarial task reads the target head as a constant: check encoder coordinates only
            limit = m.n_shared if task == "adv" else x0.size
            coords = np.random.default_rng(trial).choice(limit, size=min(n_coords, limit), replace=False)
            fd = _fd(value, x0, coords=coords)
            load(x0)
            err = max(err, _rel(analytic[coords], fd))
        out.append(_result("tasks", f"{task} loss gradient vs central differences", err, tol))
    return out


# -- combiners ------------------------------------------------------------------------

def _bundles(rng, n, dims=(2, 10, 100), k_max=4):
    for _ in range(n):
        dim = int(rng.choice(dims))
        k = int(rng.integers(1, k_max + 1))
        yield GradientBundle(rng.standard_normal(dim), [rng.standard_normal(dim) for _ in range(k)])


def check_projection(n: int = 2000, tol: float = 1e-10) -> list[CheckResult]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for dim in (2, 10, 1000):
        for _ in range(n // 3):
            g_t, g_a = rng.standard_normal(dim), rng.standard_normal(dim)
            out = pcgrad_project(g_a, g_t)
            worst = max(worst, abs(out @ g_t) / (np.linalg.norm(g_a) * np.linalg.norm(g_t)))
    return [_result("combiners", "projected gradient orthogonal to target (|dot| / |g_a||g_t|)", worst, tol)]


def check_reductions(n: int = 2000, tol: float = 1e-12) -> list[CheckResult]:
    rng = np.random.default_rng(2)
    worst = 0.0
    for b in _bundles(rng, n):
        out = combine_rcgrad(b, RotationScalars.init(b.k))
        expected = b.g_t.copy()
        for g, c in zip(b.g_aux, b.conflicts()):
            one = GradientBundle(b.g_t, [g])
            expected += (combine_pcgrad(one) if c else combine_gradscale(one)) - b.g_t
        worst = max(worst, float(np.max(np.abs(out - expected))))
    k0 = 0.0
    for _ in range(200):
        g_t = rng.standard_normal(int(rng.integers(1, 20)))
        b = GradientBundle(g_t, [])
        for out in (combine_mtl(b), combine_gradsim(b), combine_gradscale(b), combine_pcgrad(b),
                    combine_rcgrad(b, RotationScalars.init(0))):
            k0 = max(k0, float(np.max(np.abs(out - g_t))))
    return [
        _result("combiners", "rcgrad at unit rotation equals pcgrad / gradscale per branch", worst, tol),
        _result("combiners", "every combiner returns g_t when there are no auxiliary tasks", k0, 0.0),
    ]


def check_gradsim(n: int = 2000, tol: float = 1e-12) -> list[CheckResult]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for b in _bundles(rng, n):
        out = combine_gradsim(b)
        expected = b.g_t.copy()
        for g in b.g_aux:
            c = cosine(g, b.g_t)
            if c > 0:
                expected = expected + c * g
        worst = max(worst, float(np.max(np.abs(out - expected))))
    return [_result("combiners", "gradsim keeps exactly the positively aligned tasks", worst, tol)]


def check_kappa(n: int = 10, tol: float = 1e-4) -> list[CheckResult]:
    worst = 0.0
    for seed in range(n):
        rng = np.random.default_rng(seed)
        dim = 6
        m = rng.standard_normal((dim, dim))
        A, c = m @ m.T + np.eye(dim), rng.standard_normal(dim)
        g_t = rng.standard_normal(dim)
        aux = [-g_t + 0.3 * rng.standard_normal(dim), rng.standard_normal(dim), rng.standard_normal(dim)]
        b = GradientBundle(g_t, aux)
        kappa = RotationScalars(rng.uniform(0, 2), rng.uniform(0, 2, 3))
        theta, alpha = rng.standard_normal(dim), 0.05

        def L(vec):
            th = theta - alpha * combine_rcgrad(b, RotationScalars(vec[0], vec[1:]))
            return 0.5 * th @ A @ th - c @ th

        d = kappa_partials(theta, b, kappa, alpha, lambda th: A @ th - c)
        worst = max(worst, _rel(d, _fd(L, kappa.as_vector(), h=1e-5), floor=1e-9))
    return [_result("combiners", "rotation-scalar partials vs finite differences of the lookahead loss", worst, tol)]


# -- bilevel --------------------------------------------------------------------------

def check_neumann(beta: float | None = None, n: int = 10, M: int = 200, tol: float = 1e-4) -> list[CheckResult]:
    """Neumann hypergradient vs the closed form on random quadratics.

    By default beta = 0.1 / lambda_max per instance. An explicit ``beta``
    outside the convergence radius (beta >= 2 / lambda_max) marks the check
    divergent instead of comparing meaningless numbers.
    """
    worst, divergent, lam_top = 0.0, 0, 0.0
    for seed in range(n):
        rng = np.random.default_rng(seed)
        prob = QuadraticBilevelProblem.random(rng, int(rng.integers(2, 21)), 2)
        w = rng.uniform(0, 1, 2)
        lam = float(np.linalg.eigvalsh(prob.hessian(w)).max())
        lam_top = max(lam_top, lam)
        b = 0.1 / lam if beta is None else beta
        try:
            hg = neumann_hypergrad(
                prob.theta_star(w),
                lambda th: prob.total_grad(th, w),
                prob.val_grad,
                [lambda th, i=i: prob.aux_grad(th, i) for i in range(prob.k)],
                BiLevelConfig(M=M, beta=b),
                radius_check=beta is not None,
            )
        except NeumannDivergenceError:
            divergent += 1
            continue
        exact = quadratic_oracle_hypergrad(prob, w)
        worst = max(worst, float(np.linalg.norm(b * hg - exact) / np.linalg.norm(exact)))
    prop = "Neumann hypergradient vs closed form (relative error)"
    if divergent:
        return [CheckResult(
            "bilevel", prop, float("inf"), 0.0, tol, "divergent",
            f"beta={beta:g} exceeds the convergence radius 2/lambda_max={2 / lam_top:.4g} "
            f"on {divergent}/{n} instances; choose beta < 2/lambda_max",
        )]
    return [_result("bilevel", prop, worst, tol)]


# -- graphs and metrics ---------------------------------------------------------------

def _brute_motifs(n, edges):
    es = {frozenset(e) for e in edges}
    tri = any({frozenset((a, b)), frozenset((b, c)), frozenset((a, c))} <= es
              for a, b, c in itertools.combinations(range(n), 3))
    c4 = False
    for a, b, c, d in itertools.permutations(range(n), 4):
        ring = {frozenset((a, b)), frozenset((b, c)), frozenset((c, d)), frozenset((d, a))}
        if ring <= es and frozenset((a, c)) not in es and frozenset((b, d)) not in es:
            c4 = True
            break
    return [float(tri), float(c4)]


def check_motifs(max_exhaustive: int = 5, n_random: int = 300) -> list[CheckResult]:
    mismatches, total = 0, 0
    for n in range(1, max_exhaustive + 1):
        pairs = list(itertools.combinations(range(n), 2))
        for mask in range(1 << len(pairs)):
            edges = [p for j, p in enumerate(pairs) if mask >> j & 1]
            g = SyntheticGraph.build([0] * n, edges)
            total += 1
            mismatches += list(g.motifs) != _brute_motifs(n, edges)
    rng = np.random.default_rng(4)
    pairs = list(itertools.combinations(range(8), 2))
    for _ in range(n_random):
        edges = [p for p in pairs if rng.random() < rng.uniform(0.1, 0.6)]
        g = SyntheticGraph.build([0] * 8, edges)
        total += 1
        mismatches += list(g.motifs) != _brute_motifs(8, edges)
    return [CheckResult("graphs", f"motif labels vs brute-force enumeration ({total} graphs)",
                        float(mismatches), 0.0, 0.0, "pass" if mismatches == 0 else "fail")]


def check_auc(n: int = 1000, tol: float = 1e-12) -> list[CheckResult]:
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(n):
        size = int(rng.integers(2, 30))
        y = rng.integers(0, 2, size)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, size) / 5.0
        pos, neg = s[y == 1], s[y == 0]
        brute = (np.sum(pos[:, None] > neg[None, :]) + 0.5 * np.sum(pos[:, None] == neg[None, :])) / (pos.size * neg.size)
        worst = max(worst, abs(roc_auc(s, y) - brute))
    example = abs(roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) - 0.75)
    return [_result("metrics", "ROC-AUC vs pairwise brute force", max(worst, example), tol)]


# -- driver ---------------------------------------------------------------------------

def run_checks(tolerance_scale: float = 1.0, beta: float | None = None) -> list[CheckResult]:
    s = tolerance_scale
    return (
        check_op_gradients(tol=1e-4 * s)
        + check_loss_gradients(tol=1e-4 * s)
        + check_projection(tol=1e-10 * s)
        + check_reductions(tol=1e-12 * s)
        + check_gradsim(tol=1e-12 * s)
        + check_kappa(tol=1e-4 * s)
        + check_neumann(beta=beta, tol=1e-4 * s)
        + check_motifs()
        + check_auc(tol=1e-12 * s)
    )


def summarize(results: list[CheckResult]) -> str:
    n_ok = sum(r.passed for r in results)
    lines = [r.line() for r in results]
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)


def all_passed(results: list[CheckResult]) -> bool:
    return all(r.passed for r in results) and not any(math.isnan(r.observed) for r in results)
