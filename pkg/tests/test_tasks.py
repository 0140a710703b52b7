import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradsurge import autodiff as ad
from gradsurge.errors import ConfigError, UsageError
from gradsurge.graphs import GraphBatch, SyntheticGraph, gen_dataset
from gradsurge.models import Pass, encode_graph, encode_nodes, flatten
from gradsurge.tasks import (
    AUX_TASKS,
    build_model,
    ep_pairs,
    head_shape,
    ig_negatives,
    n_masked,
    task_loss,
)

from oracles import central_diff, rel_err

ALL_TASKS = ("target",) + AUX_TASKS
ALL_AUX = ("am", "ep", "ig", "mp", "adv")


def _bce(z, y):
    return max(z, 0) - z * y + math.log1p(math.exp(-abs(z)))


def _model(seed=0, hidden=6, n_layers=2, aux=ALL_AUX):
    return build_model(np.random.default_rng(seed), aux, n_layers=n_layers, hidden=hidden)


def _zero_head(m, name):
    for a in m.heads[name].params:
        a[:] = 0.0


def test_head_shapes():
    assert head_shape("target", 7) == (7, 1, True)
    assert head_shape("am", 7) == (7, 4, True)
    assert head_shape("ig", 7) == (7, 7, False)
    assert head_shape("adv", 7) is None
    with pytest.raises(ConfigError):
        head_shape("cp", 7)


def test_build_model_allocates_only_needed_heads():
    assert list(_model(aux=()).heads) == ["target"]
    assert list(_model(aux=("mp", "adv")).heads) == ["target", "mp"]


# -- target -----------------------------------------------------------------------

def test_target_loss_zero_logits_is_ln2():
    m = _model()
    _zero_head(m, "target")
    gs = [SyntheticGraph.build([0, 1], [(0, 1)], 1), SyntheticGraph.build([2, 3], [], 0)]
    loss = task_loss(Pass(m, GraphBatch(gs)), "target").item()
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_target_loss_vanishes_for_confident_correct_logits():
    m = _model(aux=())
    g1, g0 = SyntheticGraph.build([1], [], 1), SyntheticGraph.build([1], [], 0)
    m.heads["target"].params[0][:] = 0.0
    m.heads["target"].params[1][:] = 60.0
    assert task_loss(Pass(m, GraphBatch([g1])), "target").item() < 1e-25
    m.heads["target"].params[1][:] = -60.0
    assert task_loss(Pass(m, GraphBatch([g0])), "target").item() < 1e-25


def test_adv_is_target_loss_with_flipped_labels():
    m = _model()
    gs = gen_dataset(0, 6)
    flipped = [SyntheticGraph(g.node_types, g.edges, 1 - g.target_label, g.motifs) for g in gs]
    adv = task_loss(Pass(m, GraphBatch(gs)), "adv").item()
    tgt = task_loss(Pass(m, GraphBatch(flipped)), "target").item()
    assert adv == pytest.approx(tgt, rel=1e-14)


# -- AM ---------------------------------------------------------------------------

def test_mask_counts():
    assert n_masked(10, 0.15) == 2
    assert n_masked(1, 0.15) == 1
    assert n_masked(20, 0.15) == 3
    assert n_masked(7, 1.0) == 7


def test_am_uniform_logits_is_ln4():
    m = _model()
    _zero_head(m, "am")
    loss = task_loss(Pass(m, GraphBatch(gen_dataset(0, 4))), "am", seed=3).item()
    assert loss == pytest.approx(math.log(4), abs=1e-14)


def test_am_bad_ratio():
    with pytest.raises(UsageError):
        task_loss(Pass(_model(), GraphBatch(gen_dataset(0, 2))), "am", mask_ratio=0.0)


def test_am_depends_on_seed_only_through_mask():
    m = _model()
    b = GraphBatch(gen_dataset(0, 4))
    a1 = task_loss(Pass(m, b), "am", seed=1).item()
    a2 = task_loss(Pass(m, b), "am", seed=1).item()
    a3 = task_loss(Pass(m, b), "am", seed=2).item()
    assert a1 == a2 and a1 != a3


# -- EP ---------------------------------------------------------------------------

def test_ep_skips_complete_graph():
    k3 = SyntheticGraph.build([0, 1, 2], [(0, 1), (1, 2), (0, 2)])
    with pytest.raises(UsageError):
        ep_pairs(GraphBatch([k3]))
    path = SyntheticGraph.build([0, 1, 2], [(0, 1), (1, 2)])
    u, v, y = ep_pairs(GraphBatch([k3, path]))
    assert (u >= 3).all() and (v >= 3).all()  # only the path contributes


def test_ep_path_example():
    m = _model()
    m.heads["ep"].params[0][:] = 1.0
    m.heads["ep"].params[1][:] = 0.0
    path = SyntheticGraph.build([0, 1, 3], [(0, 1), (1, 2)])
    u, v, y = ep_pairs(GraphBatch([path]), seed=5)
    assert y.tolist() == [1.0, 0.0]
    assert sorted((u[1], v[1])) == [0, 2]
    h = encode_nodes(m, path)
    expected = 0.5 * (_bce(h[u[0]] @ h[v[0]], 1) + _bce(h[0] @ h[2], 0))
    assert task_loss(Pass(m, GraphBatch([path])), "ep", seed=5).item() == pytest.approx(expected, rel=1e-13)


def test_ep_zero_embeddings_is_ln2():
    m = _model()
    for a in m.encoder.params:
        a[:] = 0.0
    m.heads["ep"].params[1][:] = 0.0
    loss = task_loss(Pass(m, GraphBatch(gen_dataset(1, 5))), "ep").item()
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_ep_negative_ratio():
    g = SyntheticGraph.build([0] * 6, [(0, 1), (1, 2), (2, 3)])
    u, v, y = ep_pairs(GraphBatch([g]), n_neg_per_pos=3, seed=0)
    assert int(y.sum()) == 3 and int((1 - y).sum()) == 9
    with pytest.raises(UsageError):
        ep_pairs(GraphBatch([g]), n_neg_per_pos=0)


# -- IG ---------------------------------------------------------------------------

def test_ig_zero_discriminator_is_ln2():
    m = _model()
    _zero_head(m, "ig")
    loss = task_loss(Pass(m, GraphBatch(gen_dataset(0, 3))), "ig").item()
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_ig_needs_two_graphs():
    with pytest.raises(UsageError):
        task_loss(Pass(_model(), GraphBatch(gen_dataset(0, 1))), "ig")


def test_ig_two_graph_negatives_come_from_the_other_graph():
    b = GraphBatch(gen_dataset(0, 2))
    neg = ig_negatives(b, seed=4)
    np.testing.assert_array_equal(neg, 1 - b.graph_of_node)


def test_ig_single_node_graphs():
    m = _model()
    g1, g2 = SyntheticGraph.build([1], []), SyntheticGraph.build([3], [])
    W = m.heads["ig"].params[0]
    h1, h2 = encode_graph(m, g1), encode_graph(m, g2)
    pos = [h1 @ W @ h1, h2 @ W @ h2]
    neg = [h1 @ W @ h2, h2 @ W @ h1]
    expected = (sum(_bce(z, 1) for z in pos) + sum(_bce(z, 0) for z in neg)) / 4
    assert task_loss(Pass(m, GraphBatch([g1, g2])), "ig").item() == pytest.approx(expected, rel=1e-13)


# -- MP ---------------------------------------------------------------------------

def test_mp_loss_by_hand():
    m = _model()
    gs = [SyntheticGraph.build([0, 1, 2], [(0, 1), (1, 2), (0, 2)]),
          SyntheticGraph.build([1, 1, 1, 1], [(0, 1), (1, 2), (2, 3), (3, 0)])]
    W, b = m.heads["mp"].params
    total = 0.0
    for g in gs:
        z = encode_graph(m, g) @ W + b
        total += sum(_bce(zi, yi) for zi, yi in zip(z, g.motifs))
    assert task_loss(Pass(m, GraphBatch(gs)), "mp").item() == pytest.approx(total / 4, rel=1e-13)


# -- cross-cutting properties -------------------------------------------------------

@pytest.mark.parametrize("task", ALL_TASKS)
def test_head_gradients_are_task_private(task):
    m = _model()
    p = Pass(m, GraphBatch(gen_dataset(2, 6)))
    enc, heads = p.gradients(task_loss(p, task, seed=1))
    assert np.linalg.norm(enc) > 0
    for name, grads in heads.items():
        if name != task:
            for g in grads:
                assert not g.any(), (task, name)
    if task in m.heads:
        assert any(g.any() for g in heads[task])


@pytest.mark.parametrize("task", ALL_TASKS)
def test_full_model_loss_gradients_match_finite_differences(task):
    for trial in range(4):
        m = _model(seed=trial)
        batch = GraphBatch(gen_dataset(100 + trial, 4))
        leaves = list(m.encoder.params) + [a for h in m.heads.values() for a in h.params]
        shapes = [a.shape for a in leaves]
        x0 = flatten(leaves)

        def value(x):
            pos = 0
            for a, s in zip(leaves, shapes):
                a[...] = x[pos : pos + a.size].reshape(s)
                pos += a.size
            return task_loss(Pass(m, batch), task, seed=trial).item()

        value(x0)
        p = Pass(m, batch)
        enc, heads = p.gradients(task_loss(p, task, seed=trial))
        analytic = np.concatenate([enc] + [np.ravel(g) for gs in heads.values() for g in gs])
        # adv reads the target head as a constant, so only encoder coordinates are differentiable
        n_coords = m.n_shared if task == "adv" else x0.size
        coords = np.random.default_rng(trial).choice(n_coords, size=60, replace=False)
        fd = central_diff(value, x0, coords=coords)
        value(x0)
        assert rel_err(analytic[coords], fd) < 1e-4, task


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(ALL_TASKS))
def test_losses_nonnegative_and_deterministic(seed, task):
    m = _model(seed % 5)
    batch = GraphBatch(gen_dataset(seed, 3))
    a = task_loss(Pass(m, batch), task, seed=seed).item()
    b = task_loss(Pass(m, batch), task, seed=seed).item()
    assert a >= 0.0 and a == b


def test_unknown_task():
    with pytest.raises(ConfigError):
        task_loss(Pass(_model(), GraphBatch(gen_dataset(0, 2))), "cp")


def test_losses_are_scalar_tensors():
    p = Pass(_model(), GraphBatch(gen_dataset(0, 3)))
    for task in ALL_TASKS:
        out = task_loss(p, task)
        assert isinstance(out, ad.Tensor) and out.data.shape == ()
