"""Shared node encoder plus task-private affine heads.

Parameters are plain numpy arrays owned by :class:`Model`. A :class:`Pass`
binds them to a fresh :class:`~gradsurge.autodiff.Tape` for one forward
computation over a :class:`~gradsurge.graphs.GraphBatch`.

Canonical flattening order (``FLATTEN_VERSION = 1``): the type embedding
table, then encoder layers in forward order, each as ``W_self``,
``W_neigh`` (message-passing only), ``b``; every array row-major. Heads
follow in insertion order when a whole model is serialised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, UsageError
from .graphs import N_NODE_TYPES, GraphBatch, SyntheticGraph

FLATTEN_VERSION = 1
CHECKPOINT_FORMAT = "gradsurge-checkpoint"
CHECKPOINT_VERSION = 1
VOCAB = N_NODE_TYPES + 1  # node types plus the MASK id

VARIANTS = ("mlp", "message-passing")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def encoder_param_count(variant: str, n_layers: int, hidden: int) -> int:
    per_layer = (2 if variant == "message-passing" else 1) * hidden * hidden + hidden
    return VOCAB * hidden + n_layers * per_layer


@dataclass
class SharedEncoder:
    variant: str
    n_layers: int
    hidden: int
    params: list[np.ndarray]

    @classmethod
    def init(cls, rng: np.random.Generator, variant: str = "message-passing", n_layers: int = 3, hidden: int = 32):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {variant!r}")
        if n_layers < 1 or hidden < 1:
            raise ConfigError("encoder needs at least one layer of positive width")
        params = [_uniform(rng, VOCAB, (VOCAB, hidden))]
        for _ in range(n_layers):
            params.append(_uniform(rng, hidden, (hidden, hidden)))
            if variant == "message-passing":
                params.append(_uniform(rng, hidden, (hidden, hidden)))
            params.append(np.zeros(hidden))
        return cls(variant, n_layers, hidden, params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)


@dataclass
class TaskHead:
    in_dim: int
    out_dim: int
    params: list[np.ndarray]
    bias: bool = True

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True):
        params = [_uniform(rng, in_dim, (in_dim, out_dim))]
        if bias:
            params.append(np.zeros(out_dim))
        return cls(in_dim, out_dim, params, bias)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)


@dataclass
class Model:
    encoder: SharedEncoder
    heads: dict[str, TaskHead] = field(default_factory=dict)

    @property
    def n_shared(self) -> int:
        return self.encoder.n_params

    def get_theta(self) -> np.ndarray:
        """Shared encoder parameters as one flat vector (canonical order)."""
        return flatten(self.encoder.params)

    def set_theta(self, theta: np.ndarray) -> None:
        self.encoder.params = unflatten(theta, self.encoder.params)

    def all_arrays(self) -> list[np.ndarray]:
        arrays = list(self.encoder.params)
        for head in self.heads.values():
            arrays.extend(head.params)
        return arrays

    def copy(self) -> "Model":
        enc = SharedEncoder(self.encoder.variant, self.encoder.n_layers, self.encoder.hidden,
                            [p.copy() for p in self.encoder.params])
        heads = {k: TaskHead(h.in_dim, h.out_dim, [p.copy() for p in h.params], h.bias)
                 for k, h in self.heads.items()}
        return Model(enc, heads)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    total = sum(a.size for a in like)
    if vec.shape != (total,):
        raise UsageError(f"flat vector of length {vec.shape} does not match {total} parameters")
    out, pos = [], 0
    for a in like:
        out.append(np.array(vec[pos : pos + a.size]).reshape(a.shape))
        pos += a.size
    return out


class Pass:
    """One recorded forward computation of ``model`` over ``batch``.

    Unmasked node embeddings are computed once and shared by every loss
    evaluated on this pass; gradients for several losses can then be taken
    from the same tape.
    """

    def __init__(self, model: Model, batch: GraphBatch, tape: Tape | None = None,
                 theta: np.ndarray | None = None):
        self.model = model
        self.batch = batch
        self.tape = tape if tape is not None else Tape()
        enc_params = model.encoder.params if theta is None else unflatten(theta, model.encoder.params)
        self.encoder = [self.tape.leaf(p) for p in enc_params]
        self.heads = {k: [self.tape.leaf(p) for p in h.params] for k, h in model.heads.items()}
        self._nodes: Tensor | None = None
        self._graphs: Tensor | None = None

    def encode(self, node_types: np.ndarray) -> Tensor:
        if np.any(node_types < 0) or np.any(node_types >= VOCAB):
            raise UsageError(f"node type ids must lie in [0, {VOCAB})")
        enc = self.model.encoder
        h = ad.index_gather(self.encoder[0], node_types)
        i = 1
        for _ in range(enc.n_layers):
            if enc.variant == "message-passing":
                w_self, w_neigh, b = self.encoder[i : i + 3]
                i += 3
                neigh = ad.matmul(self.batch.adjacency, h)
                pre = ad.add(ad.add(ad.matmul(h, w_self), ad.matmul(neigh, w_neigh)), b)
            else:
                w, b = self.encoder[i : i + 2]
                i += 2
                pre = ad.add(ad.matmul(h, w), b)
            h = ad.relu(pre)
        return h

    @property
    def nodes(self) -> Tensor:
        if self._nodes is None:
            self._nodes = self.encode(self.batch.node_types)
        return self._nodes

    def readout(self, nodes: Tensor) -> Tensor:
        return ad.matmul(self.batch.pool, nodes)

    @property
    def graphs(self) -> Tensor:
        if self._graphs is None:
            self._graphs = self.readout(self.nodes)
        return self._graphs

    def head(self, name: str, features: Tensor, params: list[Tensor] | None = None) -> Tensor:
        head = self.model.heads[name]
        params = self.heads[name] if params is None else params
        if features.shape[-1] != head.in_dim:
            raise UsageError(f"head {name!r} expects {head.in_dim} features, got {features.shape[-1]}")
        out = ad.matmul(features, params[0])
        if head.bias:
            out = ad.add(out, params[1])
        return out

    def gradients(self, loss: Tensor) -> tuple[np.ndarray, dict[str, list[np.ndarray]]]:
        """Flat shared-encoder gradient plus per-head gradient arrays."""
        head_leaves = [t for ts in self.heads.values() for t in ts]
        grads = self.tape.backward(loss, self.encoder + head_leaves)
        enc = flatten(grads[: len(self.encoder)])
        out, pos = {}, len(self.encoder)
        for k, ts in self.heads.items():
            out[k] = grads[pos : pos + len(ts)]
            pos += len(ts)
        return enc, out

    def encoder_gradient(self, loss: Tensor) -> np.ndarray:
        return flatten(self.tape.backward(loss, self.encoder))


def _as_batch(graph) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    if isinstance(graph, SyntheticGraph):
        return GraphBatch([graph])
    return GraphBatch(list(graph))


def encode_nodes(model: Model, graph) -> np.ndarray:
    """Final-layer node embeddings, shape ``(n_nodes, hidden)``."""
    return Pass(model, _as_batch(graph)).nodes.data


def encode_graph(model: Model, graph) -> np.ndarray:
    """Mean-pooled graph embedding(s); a single graph gives shape ``(hidden,)``."""
    out = Pass(model, _as_batch(graph)).graphs.data
    return out[0] if isinstance(graph, SyntheticGraph) else out


def head_forward(head: TaskHead, features) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[-1] != head.in_dim:
        raise UsageError(f"head expects {head.in_dim} features, got {feats.shape[-1]}")
    out = feats @ head.params[0]
    return out + head.params[1] if head.bias else out


def save_checkpoint(model: Model, path: str | Path) -> None:
    """JSON header line, then every parameter as little-endian float64 in canonical order."""
    enc = model.encoder
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "flatten_version": FLATTEN_VERSION,
        "variant": enc.variant,
        "n_layers": enc.n_layers,
        "hidden": enc.hidden,
        "heads": [{"name": k, "in_dim": h.in_dim, "out_dim": h.out_dim, "bias": h.bias}
                  for k, h in model.heads.items()],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(flatten(model.all_arrays()).astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> Model:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint header {header}")
    if header.get("flatten_version") != FLATTEN_VERSION:
        raise ConfigError("checkpoint uses a different parameter flattening order")
    rng = np.random.default_rng(0)
    model = Model(SharedEncoder.init(rng, header["variant"], header["n_layers"], header["hidden"]))
    for h in header["heads"]:
        model.heads[h["name"]] = TaskHead.init(rng, h["in_dim"], h["out_dim"], h["bias"])
    like = model.all_arrays()
    arrays = unflatten(payload, like)
    n_enc = len(model.encoder.params)
    model.encoder.params = arrays[:n_enc]
    pos = n_enc
    for head in model.heads.values():
        head.params = arrays[pos : pos + len(head.params)]
        pos += len(head.params)
    return model
