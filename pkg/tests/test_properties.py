import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cmkg import tensor as T
from cmkg.distill import asym_delta, pool
from cmkg.metrics import micro_f1
from cmkg.tensor import Parameter, Tensor

finite = st.floats(-50, 50, allow_nan=False)


def mats(rows=st.integers(1, 5), cols=st.integers(1, 5)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


@given(mats(), st.floats(-100, 100))
def test_softmax_is_a_distribution_and_shift_invariant(x, c):
    p = T.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=-1).data, p, atol=1e-12)


@given(mats(cols=st.integers(2, 5)), st.data())
def test_cross_entropy_non_negative(x, data):
    targets = data.draw(st.lists(st.integers(0, x.shape[1] - 1), min_size=x.shape[0], max_size=x.shape[0]))
    assert T.cross_entropy(Tensor(x), targets).item() >= 0


@given(mats(rows=st.integers(1, 4), cols=st.integers(2, 6)), st.floats(-10, 10), st.floats(0.1, 10))
def test_layer_norm_ignores_affine_input_change(x, shift, scale):
    if np.ptp(x, axis=-1).min() < 1e-2:
        return
    g, b = Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1]))
    a = T.layer_norm(Tensor(x), g, b, eps=0.0).data
    c = T.layer_norm(Tensor(x * scale + shift), g, b, eps=0.0).data
    np.testing.assert_allclose(a, c, atol=1e-8)


@given(mats())
def test_gradient_of_sum_is_ones(x):
    p = Parameter(x, "Head")
    T.new_tape()
    T.backward(T.sum(p))
    assert np.array_equal(p.grad, np.ones_like(x))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16))
def test_matmul_agrees_with_numpy(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 5)), arrays(np.float64, 8, elements=st.floats(0, 5)))
def test_asym_delta_zero_iff_nothing_lost(old, extra):
    new_more = old + extra[: len(old)]
    assert asym_delta(old, new_more) == 0.0
    assert asym_delta(old, old - 1.0) > 0.0
    assert asym_delta(old, new_more - 10.0) >= asym_delta(old, new_more - 5.0)


@given(st.integers(1, 5), st.integers(0, 2**16))
def test_pool_of_row_stochastic_map_sums_to_m(m, seed):
    a = T.softmax(Tensor(np.random.default_rng(seed).normal(size=(m, m))), axis=-1).data
    assert abs(pool(a).sum() - m) < 1e-12


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), max_size=30))
def test_micro_f1_bounded_and_perfect_on_identity(pairs):
    preds, golds = [p for p, _ in pairs], [g for _, g in pairs]
    assert 0.0 <= micro_f1(preds, golds) <= 1.0
    if any(g != 0 for g in golds):
        assert micro_f1(golds, golds) == 1.0


@settings(max_examples=50)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)),
       st.floats(0.001, 1.0), st.floats(1e-4, 1.0))
def test_scaled_step_is_exactly_scale_times_step(x, g, s, lr):
    p = Parameter(x.copy(), "Visual")
    p.grad[...] = g
    T.sgd_step([p], lr, {"Visual": s})
    assert np.array_equal(p.data, x - s * (lr * g))
