import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bambino_engine.core.numerics import (
    AdamState, ComputationTape, DenseArray, ParameterSet, adam_step, add, backward,
    causal_mask, clip, concat, cross_entropy_next_token, embedding, exp, gather, gelu,
    layer_norm, log_softmax, matmul, max_relative_error, mean_all, minimum, mul, no_tape,
    reshape, scale, slice_axis, softmax_rows, sub, sum_all, transpose,
)
from bambino_engine.errors import (
    DegenerateBatchError, DimensionError, DuplicateParameterError, OptimizerPreconditionError,
    RankError,
)

from .conftest import gradient_pair


# ── Construction ───────────────────────────────────────────────

def test_from_values_rejects_wrong_count():
    with pytest.raises(DimensionError):
        DenseArray.from_values((2, 2), [1.0, 2.0, 3.0])


def test_from_values_is_row_major():
    a = DenseArray.from_values((2, 3), [1, 2, 3, 4, 5, 6])
    assert a.data[1, 0] == 4.0
    assert a.values == [1, 2, 3, 4, 5, 6]


# ── matmul ─────────────────────────────────────────────────────

def test_matmul_identity():
    a = DenseArray([[1, 2], [3, 4]])
    eye = DenseArray([[1, 0], [0, 1]])
    assert matmul(a, eye).data.tolist() == [[1, 2], [3, 4]]


def test_matmul_dot_product():
    assert matmul(DenseArray([[1, 2]]), DenseArray([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(DenseArray(np.ones((2, 3))), DenseArray(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = DenseArray(rng.normal(size=(3, 4)), requires_grad=True)
    b = DenseArray(rng.normal(size=(4, 2)), requires_grad=True)
    for target in (a, b):
        analytic, numeric = gradient_pair(lambda: sum_all(matmul(a, b)), target)
        assert max_relative_error(analytic, numeric) < 1e-5


# ── Softmax family ─────────────────────────────────────────────

@pytest.mark.parametrize("row, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0], [0.5, 0.5]),
    ([math.log(1), math.log(3)], [0.25, 0.75]),
])
def test_softmax_rows_examples(row, expected):
    out = softmax_rows(DenseArray([row])).data[0]
    np.testing.assert_allclose(out, expected, atol=1e-12)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    s = softmax_rows(DenseArray(x)).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_log_softmax_gradient():
    rng = np.random.default_rng(1)
    x = DenseArray(rng.normal(size=(2, 5)), requires_grad=True)
    w = DenseArray(rng.normal(size=(2, 5)))
    analytic, numeric = gradient_pair(lambda: sum_all(mul(log_softmax(x), w)), x)
    assert max_relative_error(analytic, numeric) < 1e-5


def test_causal_mask_blocks_future_positions():
    scores = DenseArray(np.zeros((3, 3)))
    weights = softmax_rows(causal_mask(scores)).data
    np.testing.assert_allclose(weights[0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(weights[2], [1 / 3] * 3)


# ── Cross-entropy ──────────────────────────────────────────────

def test_cross_entropy_uniform_is_log_vocab():
    loss = cross_entropy_next_token(DenseArray(np.zeros((4, 8))), [0, 3, 7, 5], ignore_index=-1)
    assert loss.item() == pytest.approx(math.log(8), abs=1e-12)


def test_cross_entropy_confident_is_near_zero():
    logits = np.full((3, 4), -1e3)
    targets = [1, 2, 0]
    logits[np.arange(3), targets] = 1e3
    assert cross_entropy_next_token(DenseArray(logits), targets, ignore_index=-1).item() < 1e-12


def test_cross_entropy_matches_direct_average():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 4))
    targets = [2, 0, 3]
    direct = -np.mean([logits[t, c] - np.log(np.exp(logits[t]).sum())
                       for t, c in enumerate(targets)])
    got = cross_entropy_next_token(DenseArray(logits), targets, ignore_index=-1).item()
    assert got == pytest.approx(direct, abs=1e-12)


def test_cross_entropy_skips_ignored_positions():
    logits = np.zeros((3, 4))
    logits[0] = [10.0, 0.0, 0.0, 0.0]
    loss = cross_entropy_next_token(DenseArray(logits), [1, 9, 9], ignore_index=9)
    expected = -(0.0 - np.log(np.exp(10.0) + 3.0))
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_all_ignored():
    with pytest.raises(DegenerateBatchError):
        cross_entropy_next_token(DenseArray(np.zeros((2, 4))), [0, 0], ignore_index=0)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(DimensionError):
        cross_entropy_next_token(DenseArray(np.zeros((2, 4))), [0, 4], ignore_index=-1)


# ── backward ───────────────────────────────────────────────────

def test_backward_sum_gives_ones():
    x = DenseArray(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with ComputationTape() as tape:
        loss = sum_all(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_twice_x():
    x = DenseArray([1.0, -2.0, 3.5], requires_grad=True)
    with ComputationTape() as tape:
        loss = sum_all(mul(x, x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_needs_scalar():
    x = DenseArray([1.0, 2.0], requires_grad=True)
    with ComputationTape() as tape:
        y = mul(x, x)
    with pytest.raises(RankError):
        backward(y, tape)


def test_backward_visits_in_reverse_order():
    x = DenseArray([1.0, 2.0], requires_grad=True)
    with ComputationTape(record_visits=True) as tape:
        loss = mean_all(mul(x, x))
    backward(loss, tape)
    assert tape.visits == list(range(len(tape) - 1, -1, -1))


def test_two_layer_composite_gradient():
    rng = np.random.default_rng(3)
    x = DenseArray(rng.normal(size=(4, 3)))
    w1 = DenseArray(rng.normal(size=(3, 5)), requires_grad=True)
    w2 = DenseArray(rng.normal(size=(5, 6)), requires_grad=True)
    targets = [0, 5, 2, 3]

    def loss_fn():
        hidden = softmax_rows(matmul(x, w1))
        return cross_entropy_next_token(matmul(hidden, w2), targets, ignore_index=-1)

    for target in (w1, w2):
        analytic, numeric = gradient_pair(loss_fn, target)
        assert max_relative_error(analytic, numeric) < 1e-5


def test_layer_norm_gradient():
    rng = np.random.default_rng(4)
    x = DenseArray(rng.normal(size=(3, 6)), requires_grad=True)
    g = DenseArray(rng.normal(size=6), requires_grad=True)
    b = DenseArray(rng.normal(size=6), requires_grad=True)
    w = DenseArray(rng.normal(size=(3, 6)))
    for target in (x, g, b):
        analytic, numeric = gradient_pair(lambda: sum_all(mul(layer_norm(x, g, b), w)), target)
        assert max_relative_error(analytic, numeric) < 1e-5


def test_minimum_routes_ties_to_first_argument():
    a = DenseArray([1.0, 2.0], requires_grad=True)
    b = DenseArray([1.0, 0.5], requires_grad=True)
    with ComputationTape() as tape:
        loss = sum_all(minimum(a, b))
    backward(loss, tape)
    assert a.grad.tolist() == [1.0, 0.0]
    assert b.grad.tolist() == [0.0, 1.0]


def test_no_tape_suspends_recording():
    x = DenseArray([1.0], requires_grad=True)
    with ComputationTape() as tape:
        with no_tape():
            y = mul(x, x)
    assert len(tape) == 0
    assert not y.requires_grad


# ── Per-primitive gradients ────────────────────────────────────

def _leaf(rng, *shape):
    return DenseArray(rng.normal(size=shape), requires_grad=True)


def _dim(rng, low=1):
    return int(rng.integers(low, 7))


def _away_from(rng, shape, kinks, gap=0.05):
    """Normal samples nudged at least `gap` away from every kink."""
    x = rng.normal(size=shape)
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, gap, -gap)
    return x


def _case_add(rng):
    r, c = _dim(rng), _dim(rng)
    return add, [_leaf(rng, r, c), _leaf(rng, c)]


def _case_sub(rng):
    r, c = _dim(rng), _dim(rng)
    return sub, [_leaf(rng, r, c), _leaf(rng, r, 1)]


def _case_mul(rng):
    r, c = _dim(rng), _dim(rng)
    return mul, [_leaf(rng, r, c), _leaf(rng, 1, c)]


def _case_scale(rng):
    c = float(rng.normal())
    return (lambda a: scale(a, c)), [_leaf(rng, _dim(rng), _dim(rng))]


def _case_exp(rng):
    return exp, [_leaf(rng, _dim(rng), _dim(rng))]


def _case_clip(rng):
    x = DenseArray(_away_from(rng, (_dim(rng), _dim(rng)), (-0.5, 0.5)), requires_grad=True)
    return (lambda a: clip(a, -0.5, 0.5)), [x]


def _case_minimum(rng):
    shape = (_dim(rng), _dim(rng))
    a = rng.normal(size=shape)
    b = a + rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 1.0, size=shape)
    return minimum, [DenseArray(a, requires_grad=True), DenseArray(b, requires_grad=True)]


def _case_gelu(rng):
    return gelu, [_leaf(rng, _dim(rng), _dim(rng))]


def _case_sum_all(rng):
    return sum_all, [_leaf(rng, _dim(rng), _dim(rng))]


def _case_mean_all(rng):
    return mean_all, [_leaf(rng, _dim(rng), _dim(rng))]


def _case_reshape(rng):
    r, c = _dim(rng), _dim(rng)
    return (lambda a: reshape(a, (c, r))), [_leaf(rng, r, c)]


def _case_transpose(rng):
    axes = [int(i) for i in rng.permutation(3)]
    return (lambda a: transpose(a, axes)), [_leaf(rng, _dim(rng), _dim(rng), _dim(rng))]


def _case_concat(rng):
    r = _dim(rng)
    parts = [_leaf(rng, r, _dim(rng)) for _ in range(3)]
    return (lambda *xs: concat(xs, axis=1)), parts


def _case_slice_axis(rng):
    r, c = _dim(rng), _dim(rng, low=2)
    start = int(rng.integers(0, c - 1))
    stop = int(rng.integers(start + 1, c + 1))
    return (lambda a: slice_axis(a, start, stop, axis=1)), [_leaf(rng, r, c)]


def _case_gather(rng):
    r, c = _dim(rng), _dim(rng)
    n = _dim(rng)
    index = (rng.integers(0, r, size=n), rng.integers(0, c, size=n))
    return (lambda a: gather(a, index)), [_leaf(rng, r, c)]


def _case_embedding(rng):
    rows, d = _dim(rng), _dim(rng)
    ids = rng.integers(0, rows, size=(_dim(rng), _dim(rng)))
    return (lambda w: embedding(w, ids)), [_leaf(rng, rows, d)]


def _case_matmul(rng):
    n, k, m = _dim(rng), _dim(rng), _dim(rng)
    return matmul, [_leaf(rng, n, k), _leaf(rng, k, m)]


def _case_batched_matmul(rng):
    b, n, k, m = _dim(rng), _dim(rng), _dim(rng), _dim(rng)
    return matmul, [_leaf(rng, b, n, k), _leaf(rng, k, m)]


def _case_layer_norm(rng):
    d = _dim(rng, low=2)
    return layer_norm, [_leaf(rng, _dim(rng), d), _leaf(rng, d), _leaf(rng, d)]


def _case_softmax_rows(rng):
    return softmax_rows, [_leaf(rng, _dim(rng), _dim(rng))]


def _case_log_softmax(rng):
    return log_softmax, [_leaf(rng, _dim(rng), _dim(rng))]


def _case_causal_mask(rng):
    t = _dim(rng)
    return (lambda s: softmax_rows(causal_mask(s))), [_leaf(rng, t, t)]


def _case_cross_entropy(rng):
    t, v = _dim(rng, low=2), _dim(rng)
    targets = rng.integers(0, v, size=t)
    targets[int(rng.integers(0, t))] = -1
    return (lambda z: cross_entropy_next_token(z, targets, ignore_index=-1)), [_leaf(rng, t, v)]


PRIMITIVE_CASES = {
    name[len("_case_"):]: fn for name, fn in sorted(globals().items()) if name.startswith("_case_")
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("case", sorted(PRIMITIVE_CASES))
def test_primitive_gradient_matches_finite_differences(case, seed):
    rng = np.random.default_rng([seed, sorted(PRIMITIVE_CASES).index(case)])
    op, inputs = PRIMITIVE_CASES[case](rng)
    with no_tape():
        weights = DenseArray(rng.normal(size=op(*inputs).shape))

    def loss_fn():
        return sum_all(mul(op(*inputs), weights))

    for i, x in enumerate(inputs):
        analytic, numeric = gradient_pair(loss_fn, x)
        assert max_relative_error(analytic, numeric) < 1e-5, (case, seed, i)


def test_concat_splits_gradient_back_to_each_part():
    a = DenseArray(np.ones((2, 1)), requires_grad=True)
    b = DenseArray(np.ones((2, 3)), requires_grad=True)
    out_weights = DenseArray(np.arange(8.0).reshape(2, 4))
    with ComputationTape() as tape:
        out = concat([a, b], axis=1)
        loss = sum_all(mul(out, out_weights))
    assert out.shape == (2, 4)
    backward(loss, tape)
    np.testing.assert_array_equal(a.grad, [[0.0], [4.0]])
    np.testing.assert_array_equal(b.grad, [[1.0, 2.0, 3.0], [5.0, 6.0, 7.0]])


# ── Adam ───────────────────────────────────────────────────────

def _single(value: float):
    params = ParameterSet()
    params.add("w", DenseArray([value]))
    return params, AdamState.for_params(params, lr=0.1)


def test_adam_zero_gradient_leaves_parameters():
    params, opt = _single(0.7)
    params.zero_grad()
    adam_step(params, opt)
    assert params["w"].data.tolist() == [0.7]


def test_adam_first_step_magnitude_is_lr():
    params, opt = _single(1.0)
    params["w"].grad = np.array([1.0])
    adam_step(params, opt)
    assert params["w"].data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_sign_flip_shrinks_update():
    params, opt = _single(0.0)
    params["w"].grad = np.array([1.0])
    adam_step(params, opt)
    first = abs(params["w"].data[0])
    params["w"].grad = np.array([-1.0])
    before = params["w"].data[0]
    adam_step(params, opt)
    assert abs(params["w"].data[0] - before) < first


def test_adam_requires_gradients():
    params, opt = _single(0.0)
    with pytest.raises(OptimizerPreconditionError):
        adam_step(params, opt)


def test_adam_rejects_mismatched_state():
    params, opt = _single(0.0)
    other = ParameterSet()
    other.add("w", DenseArray([0.0, 0.0]))
    other.zero_grad()
    with pytest.raises(OptimizerPreconditionError):
        adam_step(other, opt)


@settings(max_examples=50)
@given(st.floats(0.1, 10.0), arrays(np.float64, 4, elements=st.floats(-5, 5)))
def test_clip_grad_norm_bounds_norm(max_norm, grad):
    params = ParameterSet()
    params.add("w", DenseArray(np.zeros(4)))
    params["w"].grad = grad.copy()
    before = params.clip_grad_norm(max_norm)
    assert before == pytest.approx(float(np.linalg.norm(grad)), abs=1e-9)
    assert params.grad_norm() <= max_norm + 1e-9


def test_duplicate_parameter_name():
    params = ParameterSet()
    params.add("w", DenseArray([0.0]))
    with pytest.raises(DuplicateParameterError):
        params.add("w", DenseArray([1.0]))
