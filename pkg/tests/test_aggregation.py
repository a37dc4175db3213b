from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlora import aggregation as agg
from fedlora.aggregation import ClientUpdate
from fedlora.lora import AdapterStack, GlobalAdapterState, LoraPair, delta, truncate_stack, zero_pad

SHAPES = [(3, 4), (2, 3)]


def make_update(rng, cid, rank, size, shapes=SHAPES):
    layers = tuple(LoraPair(rng.standard_normal((rank, n)), rng.standard_normal((m, rank))) for m, n in shapes)
    return ClientUpdate(cid, size, AdapterStack(layers))


def make_global(rng, rank, shapes=SHAPES):
    return GlobalAdapterState(make_update(rng, -1, rank, 1, shapes).stack, 3)


@st.composite
def rounds(draw, max_clients=5, max_rank=8):
    n = draw(st.integers(1, max_clients))
    ranks = draw(st.lists(st.integers(1, max_rank), min_size=n, max_size=n))
    sizes = draw(st.lists(st.integers(1, 500), min_size=n, max_size=n))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    updates = [make_update(rng, k, r, s) for k, (r, s) in enumerate(zip(ranks, sizes))]
    extra = draw(st.integers(0, 3))
    return updates, max(ranks) + extra, rng


# --- brute-force oracles --------------------------------------------------------

def oracle_dimension_wise(updates, prev, r_g):
    total = sum(u.data_size for u in updates)
    p = [u.data_size / total for u in updates]
    out = []
    for y, g in enumerate(prev.stack):
        a = g.a.copy()
        b = g.b.copy()
        for d in range(r_g):
            mass = sum(pk for pk, u in zip(p, updates) if u.rank > d)
            if mass == 0:
                continue
            for j in range(a.shape[1]):
                a[d, j] = sum(pk / mass * u.stack[y].a[d, j] for pk, u in zip(p, updates) if u.rank > d)
            for i in range(b.shape[0]):
                b[i, d] = sum(pk / mass * u.stack[y].b[i, d] for pk, u in zip(p, updates) if u.rank > d)
        out.append((a, b))
    return out


# --- fedavg_weights ------------------------------------------------------------

def test_fedavg_weights_examples():
    rng = np.random.default_rng(0)
    assert agg.fedavg_weights([make_update(rng, 0, 2, 100)]) == [1.0]
    assert agg.fedavg_weights([make_update(rng, 0, 2, 100), make_update(rng, 1, 2, 300)]) == [0.25, 0.75]


def test_fedavg_weights_fraction_oracle():
    rng = np.random.default_rng(1)
    sizes = [7, 11, 13]
    got = agg.fedavg_weights([make_update(rng, k, 2, s) for k, s in enumerate(sizes)])
    for g, s in zip(got, sizes):
        assert g == pytest.approx(float(Fraction(s, 31)), abs=1e-16)


def test_fedavg_weights_empty():
    with pytest.raises(ValueError, match="no clients sampled"):
        agg.fedavg_weights([])


def test_client_update_rejects_empty_dataset():
    with pytest.raises(ValueError):
        make_update(np.random.default_rng(2), 0, 2, 0)


@given(rounds())
def test_fedavg_weights_sum_to_one(r):
    updates, _, _ = r
    assert sum(agg.fedavg_weights(updates)) == pytest.approx(1.0, abs=1e-12)


# --- build_dimension_plan ------------------------------------------------------

def test_plan_two_clients():
    rng = np.random.default_rng(3)
    ups = [make_update(rng, 1, 2, 50), make_update(rng, 2, 1, 50)]
    plan = agg.build_dimension_plan(ups, 2)
    assert plan.weights[0] == ((1, 0.5), (2, 0.5))
    assert plan.weights[1] == ((1, 1.0),)


def test_plan_homogeneous_equals_p():
    rng = np.random.default_rng(4)
    ups = [make_update(rng, k, 4, s) for k, s in enumerate([3, 5, 8])]
    p = agg.fedavg_weights(ups)
    plan = agg.build_dimension_plan(ups, 4)
    for d in range(4):
        assert [w for _, w in plan.weights[d]] == p


def test_plan_filter_renormalize_oracle():
    rng = np.random.default_rng(5)
    ranks, sizes = [4, 8, 16], [10, 20, 30]
    ups = [make_update(rng, k, r, s) for k, (r, s) in enumerate(zip(ranks, sizes))]
    plan = agg.build_dimension_plan(ups, 16)
    for d in range(16):
        live = [(k, sizes[k]) for k in range(3) if ranks[k] >= d + 1]
        mass = sum(s for _, s in live)
        want = [(k, s / mass) for k, s in live]
        assert plan.contributors(d) == [k for k, _ in want]
        assert [w for _, w in plan.weights[d]] == pytest.approx([w for _, w in want], abs=1e-15)


def test_plan_marks_uncovered_dimensions():
    rng = np.random.default_rng(6)
    plan = agg.build_dimension_plan([make_update(rng, 0, 2, 10)], 5)
    assert [plan.has_contributor(d) for d in range(5)] == [True, True, False, False, False]


def test_plan_global_rank_too_small():
    rng = np.random.default_rng(7)
    with pytest.raises(ValueError):
        agg.build_dimension_plan([make_update(rng, 0, 4, 10)], 3)


@given(rounds())
def test_plan_weights_invariants(r):
    updates, r_g, _ = r
    plan = agg.build_dimension_plan(updates, r_g)
    ranks = {u.client_id: u.rank for u in updates}
    for d in range(r_g):
        cids = plan.contributors(d)
        assert set(cids) == {c for c, rk in ranks.items() if rk >= d + 1}
        if cids:
            ws = [w for _, w in plan.weights[d]]
            assert all(w >= 0 for w in ws)
            assert sum(ws) == pytest.approx(1.0, abs=1e-12)


# --- aggregate_dimension_wise -------------------------------------------------

def test_dimension_wise_single_client():
    rng = np.random.default_rng(8)
    u = make_update(rng, 0, 4, 17)
    out = agg.aggregate_dimension_wise([u], make_global(rng, 4), 4)
    assert out.stack.equals(u.stack)
    assert out.round == 4


def test_dimension_wise_identical_clients():
    rng = np.random.default_rng(9)
    shared = make_update(rng, 0, 5, 1).stack
    ups = [ClientUpdate(0, 10, truncate_stack(shared, 2)), ClientUpdate(1, 30, shared)]
    out = agg.aggregate_dimension_wise(ups, make_global(rng, 5), 5)
    for g, s in zip(out.stack, shared):
        np.testing.assert_allclose(g.a[:2], s.a[:2], rtol=0, atol=1e-15)
        np.testing.assert_allclose(g.b[:, :2], s.b[:, :2], rtol=0, atol=1e-15)


def test_dimension_wise_matches_scalar_oracle_three_clients():
    rng = np.random.default_rng(10)
    ups = [make_update(rng, 0, 3, 40), make_update(rng, 1, 7, 25), make_update(rng, 2, 5, 90)]
    prev = make_global(rng, 9)
    out = agg.aggregate_dimension_wise(ups, prev, 9)
    for (a, b), g in zip(oracle_dimension_wise(ups, prev, 9), out.stack):
        np.testing.assert_allclose(g.a, a, rtol=0, atol=1e-12)
        np.testing.assert_allclose(g.b, b, rtol=0, atol=1e-12)


def test_dimension_wise_carries_forward_uncovered_dimensions():
    rng = np.random.default_rng(11)
    prev = make_global(rng, 6)
    out = agg.aggregate_dimension_wise([make_update(rng, 0, 2, 5), make_update(rng, 1, 3, 5)], prev, 6)
    for g, p in zip(out.stack, prev.stack):
        assert np.array_equal(g.a[3:], p.a[3:])
        assert np.array_equal(g.b[:, 3:], p.b[:, 3:])


def test_dimension_wise_errors():
    rng = np.random.default_rng(12)
    with pytest.raises(ValueError, match="no clients sampled"):
        agg.aggregate_dimension_wise([], make_global(rng, 4), 4)
    with pytest.raises(ValueError, match="previous global"):
        agg.aggregate_dimension_wise([make_update(rng, 0, 2, 5)], make_global(rng, 3), 4)
    with pytest.raises(ValueError, match="duplicate"):
        agg.aggregate_dimension_wise([make_update(rng, 0, 2, 5), make_update(rng, 0, 2, 5)], make_global(rng, 4), 4)


@given(rounds())
def test_dimension_wise_oracle_property(r):
    updates, r_g, rng = r
    prev = make_global(rng, r_g)
    out = agg.aggregate_dimension_wise(updates, prev, r_g)
    for (a, b), g in zip(oracle_dimension_wise(updates, prev, r_g), out.stack):
        np.testing.assert_allclose(g.a, a, rtol=0, atol=1e-10)
        np.testing.assert_allclose(g.b, b, rtol=0, atol=1e-10)


@given(rounds())
def test_dimension_wise_convexity(r):
    updates, r_g, rng = r
    out = agg.aggregate_dimension_wise(updates, make_global(rng, r_g), r_g)
    for y, g in enumerate(out.stack):
        for d in range(max(u.rank for u in updates)):
            rows = np.array([u.stack[y].a[d] for u in updates if u.rank > d])
            assert np.all(g.a[d] >= rows.min(axis=0) - 1e-12)
            assert np.all(g.a[d] <= rows.max(axis=0) + 1e-12)


@given(rounds())
def test_homogeneous_reduction(r):
    updates, r_g, _ = r
    rank = updates[0].rank
    rng = np.random.default_rng(0)
    ups = [make_update(rng, u.client_id, rank, u.data_size) for u in updates]
    p = agg.fedavg_weights(ups)
    out = agg.aggregate_dimension_wise(ups, make_global(rng, rank), rank)
    for y, g in enumerate(out.stack):
        np.testing.assert_allclose(g.a, sum(pk * u.stack[y].a for pk, u in zip(p, ups)), rtol=0, atol=1e-10)
        np.testing.assert_allclose(g.b, sum(pk * u.stack[y].b for pk, u in zip(p, ups)), rtol=0, atol=1e-10)


@given(rounds())
def test_dilution_identity(r):
    """Dimension-wise row == p-weighted zero-pad row / contributing mass."""
    updates, r_g, rng = r
    p = agg.fedavg_weights(updates)
    fedi = agg.aggregate_dimension_wise(updates, make_global(rng, r_g), r_g)
    padded = agg.aggregate_hetlora(updates, r_g, weighting="data_size")
    for y in range(len(SHAPES)):
        for d in range(max(u.rank for u in updates)):
            mass = sum(pk for pk, u in zip(p, updates) if u.rank > d)
            np.testing.assert_allclose(fedi.stack[y].a[d], padded.stack[y].a[d] / mass, rtol=0, atol=1e-10)
            np.testing.assert_allclose(fedi.stack[y].b[:, d], padded.stack[y].b[:, d] / mass, rtol=0, atol=1e-10)


# --- hetlora / fedavg -----------------------------------------------------

def test_hetlora_single_client_is_padded_copy():
    rng = np.random.default_rng(13)
    u = make_update(rng, 0, 2, 9)
    out = agg.aggregate_hetlora([u], 5)
    for g, p in zip(out.stack, u.stack):
        assert g.equals(zero_pad(p, 5))


def test_hetlora_identical_equal_rank():
    rng = np.random.default_rng(14)
    s = make_update(rng, 0, 3, 1).stack
    out = agg.aggregate_hetlora([ClientUpdate(0, 5, s), ClientUpdate(1, 50, s)], 3)
    for g, p in zip(out.stack, s):
        np.testing.assert_allclose(g.a, p.a, rtol=0, atol=1e-15)
        np.testing.assert_allclose(g.b, p.b, rtol=0, atol=1e-15)


def test_hetlora_dilution_halves_row():
    # equal |BA|_F norms, ranks [1, 2]: row 2 is halved by the padded zero
    a1 = np.array([[1.0, 0.0]])
    b1 = np.array([[2.0], [0.0]])
    a2 = np.array([[0.0, 2.0], [1.0, 1.0]])
    b2 = np.array([[1.0, 0.0], [0.0, 0.0]])
    u1 = ClientUpdate(0, 10, AdapterStack((LoraPair(a1, b1),)))
    u2 = ClientUpdate(1, 10, AdapterStack((LoraPair(a2, b2),)))
    assert np.linalg.norm(b1 @ a1) == np.linalg.norm(b2 @ a2)
    het = agg.aggregate_hetlora([u1, u2], 2)
    prev = GlobalAdapterState(AdapterStack((LoraPair(np.zeros((2, 2)), np.zeros((2, 2))),)))
    fedi = agg.aggregate_dimension_wise([u1, u2], prev, 2)
    np.testing.assert_allclose(het.stack[0].a[1], 0.5 * a2[1], rtol=0, atol=1e-15)
    np.testing.assert_allclose(fedi.stack[0].a[1], a2[1], rtol=0, atol=1e-15)


def test_sparsity_weights_norm_and_uniform_fallback():
    rng = np.random.default_rng(15)
    ups = [make_update(rng, k, 2, 10) for k in range(3)]
    w = agg.sparsity_weights(ups)
    for y in range(len(SHAPES)):
        norms = [np.linalg.norm(delta(u.stack[y])) for u in ups]
        assert w[y] == pytest.approx([n / sum(norms) for n in norms], abs=1e-15)
    zeros = [ClientUpdate(k, 10, AdapterStack(tuple(LoraPair(p.a, 0 * p.b) for p in u.stack))) for k, u in enumerate(ups)]
    assert agg.sparsity_weights(zeros) == [[1 / 3] * 3] * len(SHAPES)


def test_hetlora_unknown_weighting():
    with pytest.raises(ValueError):
        agg.aggregate_hetlora([make_update(np.random.default_rng(0), 0, 2, 1)], 2, weighting="bogus")


def test_fedavg_factor_average():
    rng = np.random.default_rng(16)
    ups = [make_update(rng, 0, 2, 10), make_update(rng, 1, 4, 30)]
    out = agg.aggregate_fedavg(ups, 4, round_index=2)
    assert out.round == 2
    for y, g in enumerate(out.stack):
        want = 0.25 * zero_pad(ups[0].stack[y], 4).a + 0.75 * ups[1].stack[y].a
        np.testing.assert_allclose(g.a, want, rtol=0, atol=1e-15)


# --- delta aggregation / flora -------------------------------------------------

def test_fedavg_delta_examples():
    rng = np.random.default_rng(17)
    u = make_update(rng, 0, 3, 4)
    for got, want in zip(agg.aggregate_fedavg_delta([u]), u.stack.deltas()):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)
    neg = ClientUpdate(1, 4, AdapterStack(tuple(LoraPair(p.a, -p.b) for p in u.stack)))
    for got in agg.aggregate_fedavg_delta([u, neg]):
        np.testing.assert_allclose(got, 0.0, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        agg.aggregate_fedavg_delta([])


def test_flora_single_client():
    rng = np.random.default_rng(18)
    u = make_update(rng, 0, 3, 4)
    for got, want in zip(agg.aggregate_flora([u]), u.stack.deltas()):
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)
    with pytest.raises(ValueError, match="no clients sampled"):
        agg.aggregate_flora([])


def test_flora_three_clients_vs_scalar_oracle():
    rng = np.random.default_rng(19)
    ups = [make_update(rng, 0, 1, 5), make_update(rng, 1, 4, 9), make_update(rng, 2, 7, 2)]
    total = 16
    for y, got in enumerate(agg.aggregate_flora(ups)):
        m, n = SHAPES[y]
        want = np.zeros((m, n))
        for u in ups:
            pair = u.stack[y]
            for i in range(m):
                for j in range(n):
                    want[i, j] += u.data_size / total * sum(pair.b[i, r] * pair.a[r, j] for r in range(pair.rank))
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_stack_factors_shape():
    rng = np.random.default_rng(20)
    ups = [make_update(rng, 0, 2, 5), make_update(rng, 1, 3, 5)]
    s = agg.stack_factors(ups, 0)
    assert s.rank == 5 and s.shape == SHAPES[0]


@settings(max_examples=100)
@given(rounds(max_rank=8))
def test_flora_equals_fedavg_delta(r):
    updates, _, _ = r
    for f, d in zip(agg.aggregate_flora(updates), agg.aggregate_fedavg_delta(updates)):
        np.testing.assert_allclose(f, d, rtol=0, atol=1e-10)
