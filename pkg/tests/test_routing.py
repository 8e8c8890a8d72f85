from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from diffmoe import tensor as T
from diffmoe.routing import (
    AffinityMatrix,
    TokenPool,
    average_capacity,
    capacity_of,
    combine,
    compute_affinity,
    forward_capacity,
    per_sample_capacity,
    route_dense,
    route_diffmoe_train,
    route_ec,
    route_tc,
    route_topk_per_expert,
    with_indices,
)
from diffmoe.tensor import Tensor


def aff(rows):
    return AffinityMatrix(Tensor(np.asarray(rows, dtype=float)), True)


@st.composite
def score_sets(draw, max_bs=32, max_n=8, ties=False):
    n = draw(st.integers(1, max_n))
    bs = draw(st.integers(1, max_bs))
    elem = st.integers(0, 3).map(float) if ties else st.floats(0, 1, allow_nan=False)
    rows = draw(st.lists(st.lists(elem, min_size=n, max_size=n), min_size=bs, max_size=bs))
    return rows


# -- pool and affinity -----------------------------------------------------

def test_pool_roundtrip(rng):
    x = Tensor(rng.standard_normal((3, 5, 2)))
    pool = TokenPool.from_batch(x, np.array([0.1, 0.5, 0.9]))
    assert pool.size == 15
    np.testing.assert_array_equal(pool.unpool().data, x.data)
    assert pool.origin[7].tolist() == [1, 2, 0.5]


def test_empty_pool_rejected():
    with pytest.raises(ValueError):
        TokenPool(Tensor(np.zeros((0, 2))), np.zeros((0, 3)), (0, 0))


def test_affinity_identical_logits():
    a = compute_affinity(Tensor([[1.0], [2.0]]), Tensor([[0.0, 0.0]]))
    np.testing.assert_array_equal(a.scores.data, 0.5)
    assert a.normalized


def test_affinity_softmax_row():
    a = compute_affinity(Tensor([[1.0]]), Tensor([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(a.scores.data[0], oracles.softmax([1, 2, 3]), rtol=1e-14)


def test_affinity_raw_logits_switch():
    a = compute_affinity(Tensor([[1.0]]), Tensor([[1.0, 2.0, 3.0]]), normalize=False)
    assert not a.normalized
    np.testing.assert_array_equal(a.scores.data, [[1.0, 2.0, 3.0]])


def test_affinity_shape_mismatch():
    with pytest.raises(ValueError):
        compute_affinity(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_affinity_row_permutation(rng):
    x = rng.standard_normal((6, 3))
    w = Tensor(rng.standard_normal((3, 4)))
    perm = rng.permutation(6)
    a = compute_affinity(Tensor(x), w).scores.data
    b = compute_affinity(Tensor(x[perm]), w).scores.data
    np.testing.assert_allclose(b, a[perm], rtol=1e-14)


# -- TC --------------------------------------------------------------------

def test_tc_argmax_example():
    d = route_tc(aff([[0.7, 0.3], [0.2, 0.8]]), 1)
    assert [ix.tolist() for ix in d.indices] == [[0], [1]]


def test_tc_total_assignment():
    d = route_tc(aff(np.full((5, 3), 1 / 3)), 3)
    np.testing.assert_array_equal(d.assignment, 1.0)


@pytest.mark.parametrize("k", [0, 3])
def test_tc_k_range(k):
    with pytest.raises(ValueError):
        route_tc(aff([[0.5, 0.5]]), k)


@given(score_sets(ties=True), st.data())
def test_tc_matches_oracle_and_conserves(rows, data):
    k = data.draw(st.integers(1, len(rows[0])))
    d = route_tc(aff(rows), k)
    assert [ix.tolist() for ix in d.indices] == oracles.tc_route(rows, k)
    assert d.assignment.sum() == len(rows) * k
    np.testing.assert_array_equal(d.assignment.sum(axis=1), k)


# -- EC --------------------------------------------------------------------

def test_ec_example():
    s = np.array([[[0.9, 0.1], [0.2, 0.7], [0.5, 0.6], [0.4, 0.8]]])
    d = route_ec(Tensor(s), 2)
    assert [ix.tolist() for ix in d.indices] == [[0, 2], [1, 3]]


def test_ec_full_selection():
    d = route_ec(Tensor(np.random.default_rng(0).random((2, 4, 3))), 4)
    np.testing.assert_array_equal(d.assignment, 1.0)


def test_ec_parity_capacity_is_one():
    s = np.random.default_rng(1).random((3, 8, 4))
    assert capacity_of(route_ec(Tensor(s), 8 // 4)).capacity == 1


def test_ec_k_range():
    with pytest.raises(ValueError):
        route_ec(Tensor(np.ones((1, 4, 2))), 5)


@given(st.integers(1, 4), st.integers(1, 8), st.integers(1, 6), st.data())
def test_ec_matches_oracle_and_conserves(B, S, N, data):
    rows = data.draw(st.lists(st.lists(st.integers(0, 3).map(float), min_size=N, max_size=N), min_size=B * S, max_size=B * S))
    k = data.draw(st.integers(1, S))
    d = route_ec(aff(rows), k, batch_size=B)
    assert [ix.tolist() for ix in d.indices] == oracles.ec_route(rows, B, k)
    np.testing.assert_array_equal(d.assignment.sum(axis=0), B * k)


# -- global pool -----------------------------------------------------------

def test_pool_route_example():
    d = route_diffmoe_train(aff([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.2, 0.8]]))
    assert [sorted(ix.tolist()) for ix in d.indices] == [[0, 1], [2, 3]]
    assert capacity_of(d).capacity == 1


def test_pool_route_single_expert():
    d = route_diffmoe_train(aff(np.ones((5, 1))))
    assert sorted(d.indices[0].tolist()) == list(range(5))
    np.testing.assert_array_equal(d.gate_values()[0], 1.0)


def test_pool_route_divisibility():
    with pytest.raises(ValueError):
        route_diffmoe_train(aff(np.full((5, 2), 0.5)))


@given(st.integers(1, 8), st.integers(1, 4), st.data())
def test_pool_route_matches_oracle(N, k, data):
    rows = data.draw(st.lists(st.lists(st.integers(0, 3).map(float), min_size=N, max_size=N), min_size=N * k, max_size=N * k))
    d = route_diffmoe_train(aff(rows))
    assert [ix.tolist() for ix in d.indices] == oracles.pool_route(rows, k)
    assert d.counts == (k,) * N
    assert capacity_of(d).capacity == 1


@given(score_sets())
def test_gates_are_affinities_at_selection(rows):
    a = aff(rows)
    d = route_topk_per_expert(a, [max(1, len(rows) // 2)] * len(rows[0]))
    for i, (ix, g) in enumerate(zip(d.indices, d.gates)):
        np.testing.assert_array_equal(g.data, a.scores.data[ix, i])
    O = d.assignment
    for i, ix in enumerate(d.indices):
        assert set(np.flatnonzero(O[:, i]).tolist()) == set(ix.tolist())


def test_topk_per_expert_allows_zero():
    d = route_topk_per_expert(aff(np.full((4, 2), 0.5)), [0, 2])
    assert d.counts == (0, 2)


def test_with_indices_replays(rng):
    a = aff(rng.random((6, 3)))
    d = route_tc(a, 2)
    e = with_indices(a, d.indices)
    assert [x.tolist() for x in e.indices] == [x.tolist() for x in d.indices]
    with pytest.raises(ValueError):
        with_indices(a, d.indices[:2])


# -- combine ---------------------------------------------------------------

def _lin(w):
    return lambda x: x @ Tensor(w)


def test_combine_single_expert_is_dense(rng):
    x = Tensor(rng.standard_normal((7, 3)))
    w = rng.standard_normal((3, 3))
    y = combine(x, route_dense(7), [_lin(w)])
    np.testing.assert_allclose(y.data, x.data @ w, atol=1e-15)


def test_combine_overlap_adds_gains(rng):
    x = Tensor(rng.standard_normal((3, 2)))
    w = rng.standard_normal((2, 2))
    a = aff([[0.3, 0.7], [0.5, 0.5], [0.9, 0.1]])
    d = with_indices(a, [np.array([0, 1]), np.array([0])])
    y = combine(x, d, [_lin(w), _lin(w)]).data
    np.testing.assert_allclose(y[0], (0.3 + 0.7) * (x.data[0] @ w), rtol=1e-14)
    np.testing.assert_allclose(y[1], 0.5 * (x.data[1] @ w), rtol=1e-14)
    np.testing.assert_array_equal(y[2], 0.0)


def test_combine_validates():
    a = aff([[0.5, 0.5]])
    d = with_indices(a, [np.array([0]), np.array([0])])
    with pytest.raises(ValueError):
        combine(Tensor([[1.0]]), d, [lambda x: x])
    bad = with_indices(aff([[0.5, 0.5], [0.5, 0.5]]), [np.array([1]), np.array([0])])
    with pytest.raises(IndexError):
        combine(Tensor([[1.0]]), bad, [lambda x: x, lambda x: x])


@given(st.integers(0, 10_000))
def test_combine_pool_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    BS, D, N = 8, 3, 2
    x = rng.standard_normal((BS, D))
    wr = Tensor(rng.standard_normal((D, N)))
    ws = [rng.standard_normal((D, D)) for _ in range(N)]
    perm = rng.permutation(BS)

    def run(xx):
        a = compute_affinity(Tensor(xx), wr)
        return combine(Tensor(xx), route_diffmoe_train(a), [_lin(w) for w in ws]).data

    np.testing.assert_allclose(run(x[perm]), run(x)[perm], rtol=1e-12, atol=1e-14)


def test_combine_gradient_with_frozen_selection(rng):
    BS, D, N = 8, 3, 2
    x0 = rng.standard_normal((BS, D))
    wr = rng.standard_normal((D, N))
    ws = [Tensor(rng.standard_normal((D, D))) for _ in range(N)]
    frozen = route_diffmoe_train(compute_affinity(Tensor(x0), Tensor(wr))).indices
    target = rng.standard_normal((BS, D))

    def loss(w):
        a = compute_affinity(Tensor(x0), w)
        y = combine(Tensor(x0), with_indices(a, frozen), [lambda x, w=w_: T.tanh(x @ w) for w_ in ws])
        return T.mse(y, target)

    assert T.grad_check(loss, wr) < 1e-4


# -- capacity --------------------------------------------------------------

def test_capacity_uniform():
    s = capacity_of(route_topk_per_expert(aff(np.full((8, 4), 0.25)), [2, 2, 2, 2]))
    assert s.expert_capacity == (1, 1, 1, 1) and s.capacity == 1


def test_capacity_uneven():
    s = capacity_of(route_topk_per_expert(aff(np.full((8, 4), 0.25)), [4, 2, 1, 1]))
    assert s.expert_capacity == (2, 1, Fraction(1, 2), Fraction(1, 2))
    assert s.capacity == 1


def test_capacity_all_tokens_is_n():
    s = capacity_of(route_topk_per_expert(aff(np.full((8, 4), 0.25)), [8] * 4))
    assert s.capacity == 4


def test_capacity_empty_pool():
    with pytest.raises(ValueError):
        capacity_of(route_dense(1), 1, 0)


@given(st.lists(st.integers(0, 12), min_size=1, max_size=8), st.integers(12, 40))
def test_capacity_matches_fraction_oracle(counts, BS):
    N = len(counts)
    d = route_topk_per_expert(aff(np.full((BS, N), 1 / N)), counts)
    per, c = oracles.capacity(counts, N, BS)
    s = capacity_of(d)
    assert list(s.expert_capacity) == per and s.capacity == c


def test_forward_and_average_capacity():
    a = capacity_of(route_topk_per_expert(aff(np.full((8, 2), 0.5)), [4, 4]))
    b = capacity_of(route_topk_per_expert(aff(np.full((8, 2), 0.5)), [8, 4]))
    assert forward_capacity([a, b]) == Fraction(5, 4)
    assert forward_capacity([]) == 1
    assert average_capacity([Fraction(1), Fraction(1, 2)]) == Fraction(3, 4)
    with pytest.raises(ValueError):
        average_capacity([])


@given(st.integers(0, 10_000))
def test_per_sample_capacity_mean_equals_layer_capacity(seed):
    rng = np.random.default_rng(seed)
    B, S, N = 3, 4, 2
    a = aff(rng.random((B * S, N)))
    d = route_topk_per_expert(a, rng.integers(0, B * S + 1, size=N))
    per = per_sample_capacity(d, np.repeat(np.arange(B), S), B)
    assert np.mean(per) == pytest.approx(float(capacity_of(d).capacity), abs=1e-12)
