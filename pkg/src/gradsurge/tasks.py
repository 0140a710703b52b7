"""Target and auxiliary task losses on a recorded :class:`~gradsurge.models.Pass`.

Auxiliary tasks are desk-scale versions of common molecular
self-supervision objectives:

``am``   masked node-type prediction
``ep``   edge prediction from dot products of node embeddings
``ig``   bilinear node/graph discriminator (infomax style)
``mp``   multi-label motif prediction (triangle, chordless 4-cycle)
``adv``  label-flipped target scored through a constant copy of the target
         head; deliberately harmful, used to provoke negative transfer
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UsageError
from .graphs import MASK_TYPE, N_NODE_TYPES
from .models import Model, Pass, SharedEncoder, TaskHead

AUX_TASKS = ("am", "ep", "ig", "mp", "adv")
_SALT = {"target": 0, "am": 1, "ep": 2, "ig": 3, "mp": 4, "adv": 5}


def head_shape(task: str, hidden: int) -> tuple[int, int, bool] | None:
    """(in_dim, out_dim, bias) of a task's private head, or None if it has none."""
    shapes = {
        "target": (hidden, 1, True),
        "am": (hidden, N_NODE_TYPES, True),
        "ep": (1, 1, True),
        "ig": (hidden, hidden, False),
        "mp": (hidden, 2, True),
        "adv": None,
    }
    if task not in shapes:
        raise ConfigError(f"unknown task {task!r}; expected one of {('target',) + AUX_TASKS}")
    return shapes[task]


def build_model(
    rng: np.random.Generator,
    aux_tasks: Sequence[str] = (),
    variant: str = "message-passing",
    n_layers: int = 3,
    hidden: int = 32,
) -> Model:
    """Encoder plus a target head and one private head per auxiliary task that needs one."""
    model = Model(SharedEncoder.init(rng, variant, n_layers, hidden))
    for task in ("target", *aux_tasks):
        shape = head_shape(task, hidden)
        if shape is not None:
            model.heads[task] = TaskHead.init(rng, *shape)
    return model


def task_rng(seed: int, task: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _SALT[task]])


def loss_target(p: Pass) -> Tensor:
    """Mean BCE of the target head on pooled graph embeddings."""
    logits = p.head("target", p.graphs)
    return ad.bce_with_logits(logits, p.batch.labels[:, None])


def loss_adv(p: Pass) -> Tensor:
    """Target loss against flipped labels, through a constant copy of the target head.

    The copy is recorded as constants, so this loss has no gradient with
    respect to any head and pulls the encoder directly against the target.
    """
    frozen = [p.tape.constant(a) for a in p.model.heads["target"].params]
    logits = p.head("target", p.graphs, params=frozen)
    return ad.bce_with_logits(logits, 1.0 - p.batch.labels[:, None])


def n_masked(n_nodes: int, mask_ratio: float) -> int:
    # guard against 0.15 * 20 == 3.0000000000000004
    return max(1, math.ceil(mask_ratio * n_nodes - 1e-9))


def loss_am(p: Pass, mask_ratio: float = 0.15, seed: int = 0) -> Tensor:
    """Softmax cross-entropy of the AM head on masked nodes' embeddings."""
    if not 0.0 < mask_ratio <= 1.0:
        raise UsageError("mask_ratio must lie in (0, 1]")
    batch = p.batch
    rng = task_rng(seed, "am")
    picked = []
    for off, g in zip(batch.offsets, batch.graphs):
        picked.append(off + rng.choice(g.n_nodes, size=n_masked(g.n_nodes, mask_ratio), replace=False))
    idx = np.sort(np.concatenate(picked))
    types = batch.node_types.copy()
    truth = types[idx]
    types[idx] = MASK_TYPE
    h = ad.index_gather(p.encode(types), idx)
    return ad.softmax_cross_entropy(p.head("am", h), truth)


def ep_pairs(batch, n_neg_per_pos: int = 1, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled (u, v, label) node pairs, in batch-global node indices.

    Per usable graph, ``n_pos = min(|E|, |non-edges| // n_neg_per_pos)``
    edges and ``n_pos * n_neg_per_pos`` non-edges are drawn uniformly
    without replacement.
    """
    if n_neg_per_pos < 1:
        raise UsageError("n_neg_per_pos must be >= 1")
    rng = task_rng(seed, "ep")
    us, vs, ys = [], [], []
    for off, g in zip(batch.offsets, batch.graphs):
        n = g.n_nodes
        edges = np.array(g.edges, dtype=np.int64).reshape(-1, 2)
        iu, ju = np.triu_indices(n, k=1)
        adj = g.adjacency()
        non = np.stack([iu, ju], axis=1)[~adj[iu, ju]]
        n_pos = min(len(edges), len(non) // n_neg_per_pos)
        if n_pos == 0:
            continue
        pos = edges[rng.choice(len(edges), size=n_pos, replace=False)]
        neg = non[rng.choice(len(non), size=n_pos * n_neg_per_pos, replace=False)]
        pairs = np.concatenate([pos, neg]) + off
        us.append(pairs[:, 0])
        vs.append(pairs[:, 1])
        ys.append(np.r_[np.ones(len(pos)), np.zeros(len(neg))])
    if not us:
        raise UsageError("edge prediction: no graph in the batch has both an edge and a non-edge")
    return np.concatenate(us), np.concatenate(vs), np.concatenate(ys)


def loss_ep(p: Pass, n_neg_per_pos: int = 1, seed: int = 0) -> Tensor:
    """BCE on affine-calibrated dot products ``h_u . h_v`` of sampled pairs."""
    u, v, y = ep_pairs(p.batch, n_neg_per_pos, seed)
    h = p.nodes
    score = ad.sum_reduce(ad.mul(ad.index_gather(h, u), ad.index_gather(h, v)), axis=1)
    logits = p.head("ep", ad.reshape(score, (len(u), 1)))
    return ad.bce_with_logits(logits, y[:, None])


def ig_negatives(batch, seed: int = 0) -> np.ndarray:
    """For each node, the index of a different graph whose summary serves as its negative."""
    n_graphs = len(batch)
    if n_graphs < 2:
        raise UsageError("infomax loss needs at least two graphs in the batch")
    rng = task_rng(seed, "ig")
    own = batch.graph_of_node
    shift = rng.integers(1, n_graphs, size=own.size)
    return (own + shift) % n_graphs


def loss_ig(p: Pass, seed: int = 0) -> Tensor:
    """BCE of the discriminator ``h^T W s`` on (node, own graph) vs (node, other graph) pairs."""
    neg = ig_negatives(p.batch, seed)
    h = p.nodes
    s = p.graphs
    hw = p.head("ig", h)
    pos_logit = ad.sum_reduce(ad.mul(hw, ad.index_gather(s, p.batch.graph_of_node)), axis=1)
    neg_logit = ad.sum_reduce(ad.mul(hw, ad.index_gather(s, neg)), axis=1)
    logits = ad.concat([pos_logit, neg_logit])
    n = h.shape[0]
    return ad.bce_with_logits(logits, np.r_[np.ones(n), np.zeros(n)])


def loss_mp(p: Pass) -> Tensor:
    """Two-label BCE: contains a triangle, contains a chordless 4-cycle."""
    return ad.bce_with_logits(p.head("mp", p.graphs), p.batch.motifs)


def task_loss(p: Pass, task: str, seed: int = 0, mask_ratio: float = 0.15, n_neg_per_pos: int = 1) -> Tensor:
    if task == "target":
        return loss_target(p)
    if task == "am":
        return loss_am(p, mask_ratio, seed)
    if task == "ep":
        return loss_ep(p, n_neg_per_pos, seed)
    if task == "ig":
        return loss_ig(p, seed)
    if task == "mp":
        return loss_mp(p)
    if task == "adv":
        return loss_adv(p)
    raise ConfigError(f"unknown task {task!r}")

