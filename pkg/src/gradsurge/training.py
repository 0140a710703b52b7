"""Joint training of the shared encoder, target head and auxiliary heads.

One loop serves every method. Each step computes the target gradient and
one gradient per auxiliary task with respect to the shared encoder,
merges them with the configured strategy, and updates every head with
its own task gradient (scaled by the task weight under BLO, where all
parameters descend on the weighted total loss).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .bilevel import BiLevelConfig, TaskWeights, W_MAX, neumann_hypergrad
from .combiners import (
    KAPPA_MAX,
    CombinerKind,
    GradientBundle,
    RotationScalars,
    combine,
    combine_mtl,
    combine_rcgrad,
    update_kappa,
)
from .errors import ConfigError, UndefinedMetricError, UsageError
from .graphs import DatasetSplit, GraphBatch
from .metrics import roc_auc
from .models import Model, Pass
from .tasks import AUX_TASKS, task_loss

log = logging.getLogger(__name__)

METHODS = ("ft", "mtl", "gradsim", "gradscale", "pcgrad", "rcgrad", "blo", "blorc")

LossFn = Callable[[Pass, int], ad.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    method: str = "mtl"
    aux_tasks: tuple[str, ...] = ()
    alpha: float = 0.001
    optimizer: str = "sgd"
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    mask_ratio: float = 0.15
    n_neg_per_pos: int = 1
    eta_kappa: float = 0.01
    kappa_max: float = KAPPA_MAX
    w_max: float = W_MAX
    clamp_w: bool = True
    gradscale_symmetric: bool = False
    target_train_size: int | None = None
    pretrain_epochs: int = 0
    bilevel: BiLevelConfig = field(default_factory=BiLevelConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.alpha <= 0 or self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("alpha must be positive, batch_size >= 1 and epochs, pretrain_epochs >= 0")
        if self.eta_kappa <= 0 or self.kappa_max <= 0 or self.w_max <= 0:
            raise ConfigError("eta_kappa, kappa_max and w_max must be positive")
        for t in self.aux_tasks:
            if t not in AUX_TASKS:
                raise ConfigError(f"unknown auxiliary task {t!r}")
        if len(set(self.aux_tasks)) != len(self.aux_tasks):
            raise ConfigError("duplicate auxiliary task")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def effective_aux(self) -> tuple[str, ...]:
        return () if self.method == "ft" else self.aux_tasks


class _Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.state: dict[object, tuple[np.ndarray, np.ndarray, int]] = {}

    def direction(self, key, g: np.ndarray) -> np.ndarray:
        m, v, t = self.state.get(key, (np.zeros_like(g), np.zeros_like(g), 0))
        t += 1
        m = self.b1 * m + (1 - self.b1) * g
        v = self.b2 * v + (1 - self.b2) * g * g
        self.state[key] = (m, v, t)
        return (m / (1 - self.b1**t)) / (np.sqrt(v / (1 - self.b2**t)) + self.eps)


@dataclass
class TrainResult:
    model: Model
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    test_auc: float = float("nan")
    w_trace: list[tuple[int, int, float]] = field(default_factory=list)
    kappa_trace: list[tuple[int, int, float]] = field(default_factory=list)
    weights: np.ndarray | None = None
    kappa: RotationScalars | None = None


def _safe_auc(scores, labels) -> float | None:
    try:
        return roc_auc(scores, labels)
    except UndefinedMetricError:
        return None


class Trainer:
    """Runs one configured method on one dataset split.

    ``loss_fns`` optionally overrides or adds auxiliary tasks: a mapping from
    task name to ``fn(pass, seed) -> scalar Tensor``.
    """

    def __init__(self, cfg: TrainConfig, loss_fns: dict[str, LossFn] | None = None):
        self.cfg = cfg
        self.loss_fns = dict(loss_fns or {})

    # -- losses and gradients -------------------------------------------------

    def _aux_loss(self, p: Pass, task: str, seed: int) -> ad.Tensor:
        if task in self.loss_fns:
            return self.loss_fns[task](p, seed)
        return task_loss(p, task, seed, self.cfg.mask_ratio, self.cfg.n_neg_per_pos)

    def step_gradients(self, model: Model, tb: GraphBatch, ab: GraphBatch, seed: int, theta=None):
        """Per-task losses, shared-encoder gradients and head gradients at the current parameters."""
        pt = Pass(model, tb, theta=theta)
        lt = task_loss(pt, "target")
        g_t, heads_t = pt.gradients(lt)
        pa = pt if ab is tb else Pass(model, ab, theta=theta)
        g_aux, head_grads, losses = [], {"target": heads_t["target"]}, {"target": lt.item()}
        for task in self.cfg.effective_aux:
            li = self._aux_loss(pa, task, seed)
            gi, hi = pa.gradients(li)
            g_aux.append(gi)
            if task in hi:
                head_grads[task] = hi[task]
            losses[task] = li.item()
        return GradientBundle(g_t, g_aux), head_grads, losses

    def target_grad_fn(self, model: Model, batch: GraphBatch):
        def fn(theta):
            p = Pass(model, batch, theta=theta)
            return p.encoder_gradient(task_loss(p, "target"))

        return fn

    def total_grad_fn(self, model: Model, tb: GraphBatch, ab: GraphBatch, w: np.ndarray, seed: int):
        """theta -> grad of L_t + sum_i w_i L_i on the given batches (heads held fixed)."""

        def fn(theta):
            pt = Pass(model, tb, theta=theta)
            g = pt.encoder_gradient(task_loss(pt, "target"))
            pa = pt if ab is tb else Pass(model, ab, theta=theta)
            terms = [ad.scalar_mul(self._aux_loss(pa, t, seed), wi)
                     for t, wi in zip(self.cfg.effective_aux, w) if wi != 0.0]
            if terms:
                total = terms[0]
                for t in terms[1:]:
                    total = ad.add(total, t)
                g = g + pa.encoder_gradient(total)
            return g

        return fn

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, model: Model, batch: GraphBatch, seed: int) -> dict:
        p = Pass(model, batch)
        scores = p.head("target", p.graphs).data[:, 0]
        out = {"auc": _safe_auc(scores, batch.labels), "loss": {"target": task_loss(p, "target").item()}}
        for task in self.cfg.effective_aux:
            try:
                out["loss"][task] = self._aux_loss(p, task, seed).item()
            except UsageError as exc:  # an aux loss may be undefined on a tiny split
                log.debug("skipping %s loss on evaluation split: %s", task, exc)
        return out

    # -- main loop ------------------------------------------------------------

    def fit(self, model: Model, split: DatasetSplit) -> TrainResult:
        cfg = self.cfg
        if not split.train:
            raise ConfigError("empty training split")
        if cfg.method in ("blo", "blorc") and not split.aux_heldout:
            raise ConfigError(f"{cfg.method} needs a non-empty aux-heldout split")
        k = len(cfg.effective_aux)
        rng = np.random.default_rng([cfg.seed, 7919])
        labeled = split.train if cfg.target_train_size is None else split.train[: cfg.target_train_size]
        restricted = len(labeled) < len(split.train)
        valid = GraphBatch(split.valid) if split.valid else None
        test = GraphBatch(split.test) if split.test else None
        heldout = GraphBatch(split.aux_heldout) if split.aux_heldout else None

        weights = TaskWeights(np.ones(k)) if cfg.method != "blo" else TaskWeights.init(k)
        kappa = RotationScalars.init(k)
        adam = _Adam(cfg.alpha) if cfg.optimizer == "adam" else None
        result = TrainResult(model=model)
        if cfg.method == "blo":
            result.w_trace.extend((0, i, float(v)) for i, v in enumerate(weights.w))
        if cfg.method in ("rcgrad", "blorc"):
            result.kappa_trace.extend((0, i, float(v)) for i, v in enumerate(kappa.as_vector()))

        def apply(key, arr: np.ndarray, g: np.ndarray) -> np.ndarray:
            d = g if adam is None else adam.direction(key, g)
            return arr - cfg.alpha * d

        if cfg.pretrain_epochs and k:
            self.pretrain(model, split.train, cfg.pretrain_epochs)

        n_steps = math.ceil(len(labeled) / cfg.batch_size)
        aux_order: list[int] = []
        step = 0
        best_auc = -math.inf
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(labeled))
            sums: dict[str, float] = {}
            for s in range(n_steps):
                step += 1
                step_seed = cfg.seed * 1_000_003 + step
                tb = GraphBatch([labeled[i] for i in order[s * cfg.batch_size : (s + 1) * cfg.batch_size]])
                if restricted and k:
                    if len(aux_order) < cfg.batch_size:
                        aux_order.extend(rng.permutation(len(split.train)).tolist())
                    ab = GraphBatch([split.train[i] for i in aux_order[: cfg.batch_size]])
                    del aux_order[: cfg.batch_size]
                else:
                    ab = tb
                bundle, head_grads, losses = self.step_gradients(model, tb, ab, step_seed)
                for name, v in losses.items():
                    sums[name] = sums.get(name, 0.0) + v
                theta = model.get_theta()

                if cfg.method == "rcgrad" and k:
                    kappa = update_kappa(theta, bundle, kappa, cfg.alpha, cfg.eta_kappa,
                                         self.target_grad_fn(model, tb), cfg.kappa_max, cfg.gradscale_symmetric)
                    result.kappa_trace.extend((step, i, float(v)) for i, v in enumerate(kappa.as_vector()))
                elif cfg.method == "blorc" and k and step % cfg.bilevel.r == 0:
                    kappa = update_kappa(theta, bundle, kappa, cfg.alpha, cfg.eta_kappa,
                                         self.target_grad_fn(model, heldout), cfg.kappa_max, cfg.gradscale_symmetric)
                    result.kappa_trace.extend((step, i, float(v)) for i, v in enumerate(kappa.as_vector()))

                if cfg.method in ("mtl", "blo"):
                    g = combine_mtl(bundle, weights.w)
                elif cfg.method in ("rcgrad", "blorc"):
                    g = combine_rcgrad(bundle, kappa, cfg.gradscale_symmetric)
                else:
                    g = combine(CombinerKind(cfg.method), bundle, symmetric=cfg.gradscale_symmetric)

                model.set_theta(apply("theta", theta, g))
                if cfg.method == "blo":
                    # heads also descend on L_total, so auxiliary heads see their task weight
                    for wi, task in zip(weights.w, cfg.effective_aux):
                        if task in head_grads:
                            head_grads[task] = [wi * gj for gj in head_grads[task]]
                for name, grads in head_grads.items():
                    head = model.heads[name]
                    head.params = [apply((name, j), a, gj) for j, (a, gj) in enumerate(zip(head.params, grads))]

                if cfg.method == "blo" and k and step % cfg.bilevel.r == 0:
                    weights = self._update_weights(model, tb, ab, heldout, weights, step_seed)
                    result.w_trace.extend((step, i, float(v)) for i, v in enumerate(weights.w))

            record = {"epoch": epoch, "train_loss": {n: v / n_steps for n, v in sums.items()}}
            if valid is not None:
                ev = self.evaluate(model, valid, seed=cfg.seed)
                record["valid_loss"], record["valid_auc"] = ev["loss"], ev["auc"]
            if test is not None:
                record["test_auc"] = _safe_auc(self._scores(model, test), test.labels)
            if cfg.method == "blo":
                record["w"] = weights.w.tolist()
            if cfg.method in ("rcgrad", "blorc"):
                record["kappa"] = kappa.as_vector().tolist()
            result.epochs.append(record)
            sel = record.get("valid_auc")
            if sel is not None and sel > best_auc:
                best_auc = sel
                result.best_epoch = epoch
                result.test_auc = record.get("test_auc")

        if result.best_epoch < 0 and result.epochs:
            result.best_epoch = result.epochs[-1]["epoch"]
            result.test_auc = result.epochs[-1].get("test_auc")
        result.weights = weights.w.copy()
        result.kappa = kappa
        return result

    def pretrain(self, model: Model, graphs, epochs: int) -> None:
        """Auxiliary-only warm-up: equal-weight sum of auxiliary losses, target head untouched."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 104729])
        adam = _Adam(cfg.alpha) if cfg.optimizer == "adam" else None
        step = 0
        for _ in range(epochs):
            order = rng.permutation(len(graphs))
            for s in range(0, len(graphs), cfg.batch_size):
                step += 1
                seed = cfg.seed * 1_000_003 - step
                p = Pass(model, GraphBatch([graphs[i] for i in order[s : s + cfg.batch_size]]))
                updates = {}
                g_enc = np.zeros(model.n_shared)
                for task in cfg.effective_aux:
                    g, heads = p.gradients(self._aux_loss(p, task, seed))
                    g_enc += g
                    if task in heads:
                        updates[task] = heads[task]
                model.set_theta(model.get_theta() - cfg.alpha * (g_enc if adam is None else adam.direction("theta", g_enc)))
                for name, grads in updates.items():
                    head = model.heads[name]
                    head.params = [a - cfg.alpha * (gj if adam is None else adam.direction((name, j), gj))
                                   for j, (a, gj) in enumerate(zip(head.params, grads))]

    @staticmethod
    def _scores(model: Model, batch: GraphBatch) -> np.ndarray:
        p = Pass(model, batch)
        return p.head("target", p.graphs).data[:, 0]

    def _update_weights(self, model, tb, ab, heldout, weights: TaskWeights, seed: int) -> TaskWeights:
        cfg = self.cfg
        theta = model.get_theta()
        bundle, _, _ = self.step_gradients(model, tb, ab, seed)
        rows = [(lambda th, g=g: g) for g in bundle.g_aux]
        hyper = neumann_hypergrad(
            theta,
            self.total_grad_fn(model, tb, ab, weights.w, seed),
            self.target_grad_fn(model, heldout),
            rows,
            cfg.bilevel,
        )
        return weights.step(hyper, cfg.bilevel.eta_w, cfg.w_max, cfg.clamp_w)
