import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlst import autodiff as ad
from oracles import central_difference, cross_entropy, rel_error, triple_loop_matmul


def grad_of(build, *arrays):
    """Autodiff gradients of ``build(*tensors)`` (a scalar) for each array."""
    params = [ad.parameter(a.copy()) for a in arrays]
    with ad.Tape() as tape:
        loss = build(*params)
    g = ad.backward(tape, loss)
    return [g.get(p.node, np.zeros_like(p.value)) for p in params]


def numeric_grads(build, *arrays):
    arrays = [a.copy() for a in arrays]

    def f():
        return float(build(*[ad.constant(a) for a in arrays]).value)

    return [central_difference(f, a) for a in arrays]


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 5))
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
    np.testing.assert_array_equal(out.value, a)


def test_matmul_matches_triple_loop(rng):
    for _ in range(5):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
        out = ad.matmul(ad.constant(a), ad.constant(b)).value
        np.testing.assert_allclose(out, triple_loop_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4, 2))))


def test_leaky_relu_values():
    out = ad.leaky_relu(ad.constant(np.array([-1.0, 2.0])), 0.01)
    np.testing.assert_allclose(out.value, [-0.01, 2.0])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ad.embedding_row(ad.constant(np.ones((4, 2))), [4])


def test_dropout_eval_identity_and_inverted_scaling():
    x = ad.constant(np.array([[1.0, 2.0, 3.0, 4.0]]))
    out = ad.dropout(x, np.array([[1, 0, 1, 0]]), 0.5)
    np.testing.assert_allclose(out.value, [[2.0, 0.0, 6.0, 0.0]])


def test_dropout_expectation():
    rng = np.random.default_rng(0)
    keep = 0.8
    x = ad.constant(np.full((100_000,), 1.7))
    masks = (rng.random(100_000) < keep)
    out = ad.dropout(x, masks, keep).value
    assert abs(out.mean() - 1.7) / 1.7 < 0.01


@pytest.mark.parametrize("logits,target,expected", [
    ([1000.0, 0.0, 0.0], 0, 0.0),
    ([0.0, 0.0], 0, math.log(2)),
])
def test_cross_entropy_simple(logits, target, expected):
    v = ad.softmax_cross_entropy(ad.constant(np.array(logits)), target).value
    assert v >= 0
    assert abs(v - expected) <= 1e-9


def test_cross_entropy_direct_formula():
    logits = np.array([0.3, -1.2, 2.0])
    v = float(ad.softmax_cross_entropy(ad.constant(logits), 2).value)
    assert abs(v - cross_entropy(logits, 2)) <= 1e-12


def test_cross_entropy_target_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(ad.constant(np.zeros(3)), 3)


def test_mse_values_and_gradient():
    assert float(ad.mse(ad.constant(3.0), 3.0).value) == 0.0
    assert float(ad.mse(ad.constant(0.0), -2.0).value) == 4.0
    (g,) = grad_of(lambda p: ad.mse(p, np.array(0.5)), np.array(1.5))
    (n,) = numeric_grads(lambda p: ad.mse(p, np.array(0.5)), np.array(1.5))
    assert abs(float(g) - 2.0) < 1e-12
    assert abs(float(n) - 2.0) < 1e-6


def test_backward_sum_is_ones(rng):
    (g,) = grad_of(ad.sum_all, rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_backward_chain_rule_by_hand():
    w = ad.parameter(np.array([[2.0]]))
    x = ad.constant(np.array([[3.0]]))
    with ad.Tape() as tape:
        loss = ad.mse(ad.matmul(w, x), np.zeros((1, 1)))
    assert ad.backward(tape, loss)[w.node].item() == 36.0


def test_backward_rejects_non_scalar(rng):
    p = ad.parameter(rng.standard_normal((2, 2)))
    with ad.Tape() as tape:
        out = ad.tanh(p)
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, out)


def test_reused_node_sums_contributions():
    p = ad.parameter(np.array([[1.5, -0.5]]))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.hadamard(p, p))
    np.testing.assert_allclose(ad.backward(tape, loss)[p.node], 2 * p.value)


def test_constants_get_no_gradient(rng):
    p = ad.parameter(rng.standard_normal((2, 3)))
    c = ad.constant(rng.standard_normal((2, 3)))
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.hadamard(p, c))
    grads = ad.backward(tape, loss)
    assert set(grads) == {p.node}


def test_no_recording_outside_tape(rng):
    p = ad.parameter(rng.standard_normal((2, 2)))
    out = ad.tanh(p)
    assert not out.requires_grad


def test_tape_is_topologically_ordered(rng):
    p = ad.parameter(rng.standard_normal((2, 3)))
    with ad.Tape() as tape:
        a = ad.tanh(p)
        b = ad.sigmoid(a)
        ad.sum_all(ad.add(a, b))
    seen = {p.node}
    for rec in tape.records:
        assert all(q is None or q in seen for q in rec.parents)
        seen.add(rec.out)


# every primitive against central differences, ten random fp64 draws each
PRIMITIVE_CASES = {
    "matmul": (lambda a, b: ad.sum_all(ad.tanh(ad.matmul(a, b))), [(3, 4), (4, 5)]),
    "add": (lambda a, b: ad.sum_all(ad.tanh(ad.add(a, b))), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: ad.sum_all(ad.tanh(ad.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sum_all(ad.tanh(ad.sub(a, b))), [(3, 4), (3, 4)]),
    "hadamard": (lambda a, b: ad.sum_all(ad.tanh(ad.hadamard(a, b))), [(3, 4), (3, 4)]),
    "concat": (lambda a, b: ad.sum_all(ad.tanh(ad.concat([a, b], axis=1))), [(3, 2), (3, 4)]),
    "concat0": (lambda a, b: ad.sum_all(ad.tanh(ad.concat([a, b], axis=0))), [(2, 3), (4, 3)]),
    "slice_cols": (lambda a: ad.sum_all(ad.tanh(ad.slice_cols(a, 1, 4))), [(3, 5)]),
    "sigmoid": (lambda a: ad.sum_all(ad.hadamard(ad.sigmoid(a), ad.sigmoid(a))), [(3, 4)]),
    "tanh": (lambda a: ad.sum_all(ad.hadamard(ad.tanh(a), ad.tanh(a))), [(3, 4)]),
    "leaky_relu": (lambda a: ad.sum_all(ad.tanh(ad.leaky_relu(a, 0.01))), [(3, 4)]),
    "embedding_row": (lambda a: ad.sum_all(ad.tanh(ad.embedding_row(a, [0, 2, 2, 3]))), [(4, 3)]),
    "dropout": (lambda a: ad.sum_all(ad.tanh(ad.dropout(a, np.array([[1, 0, 1], [1, 1, 0]]), 0.7))),
                [(2, 3)]),
    "select_cols": (lambda a: ad.sum_all(ad.tanh(ad.select_cols(a, [1, 0, 2]))), [(3, 3)]),
    "scale": (lambda a: ad.sum_all(ad.tanh(ad.scale(a, -1.7))), [(2, 3)]),
    "cross_entropy": (lambda a: ad.softmax_cross_entropy(a, [0, 3, 1], [0.2, 1.0, 0.5]), [(3, 5)]),
    "cross_entropy_1d": (lambda a: ad.softmax_cross_entropy(a, 2), [(5,)]),
    "mse": (lambda a: ad.mse(a, np.array([0.3, -0.4, 1.0]), [1.0, 0.5, 2.0]), [(3,)]),
    "affine": (lambda x, W, b: ad.sum_all(ad.tanh(ad.affine(x, W, b))), [(3, 4), (4, 5), (5,)]),
    "gru": (lambda x, h, W, U, b, bn: ad.sum_all(ad.tanh(ad.gru(x, h, W, U, b, bn))),
            [(3, 4), (3, 2), (4, 6), (2, 6), (6,), (2,)]),
}


def composite_gru(x, h, W, U, b, b_n):
    H = h.shape[1]
    gx = ad.add(ad.matmul(x, W), b)
    gh = ad.matmul(h, U)
    ur = ad.sigmoid(ad.add(ad.slice_cols(gx, 0, 2 * H), ad.slice_cols(gh, 0, 2 * H)))
    u, r = ad.slice_cols(ur, 0, H), ad.slice_cols(ur, H, 2 * H)
    hn = ad.add(ad.slice_cols(gh, 2 * H, 3 * H), b_n)
    n = ad.tanh(ad.add(ad.slice_cols(gx, 2 * H, 3 * H), ad.hadamard(r, hn)))
    return ad.add(h, ad.hadamard(u, ad.sub(n, h)))


def test_fused_gru_matches_composite_graph(rng):
    shapes = [(5, 3), (5, 4), (3, 12), (4, 12), (12,), (4,)]
    arrays = [rng.standard_normal(s) for s in shapes]
    f = lambda *t: ad.sum_all(ad.tanh(ad.gru(*t)))  # noqa: E731
    c = lambda *t: ad.sum_all(ad.tanh(composite_gru(*t)))  # noqa: E731
    assert f(*map(ad.constant, arrays)).value == pytest.approx(
        c(*map(ad.constant, arrays)).value, abs=1e-13)
    for a, b in zip(grad_of(f, *arrays), grad_of(c, *arrays)):
        np.testing.assert_allclose(a, b, atol=1e-13)


def test_fused_shapes_checked():
    with pytest.raises(ad.ShapeError):
        ad.affine(ad.constant(np.ones((2, 3))), ad.constant(np.ones((3, 4))), ad.constant(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        ad.gru(*(ad.constant(np.ones(s)) for s in [(2, 3), (2, 4), (3, 12), (4, 12), (12,), (3,)]))


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradcheck(name):
    build, shapes = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        arrays = [rng.standard_normal(s) for s in shapes]
        if name == "leaky_relu":
            arrays = [a + np.sign(a) * 0.05 for a in arrays]  # keep away from the kink
        for g, n in zip(grad_of(build, *arrays), numeric_grads(build, *arrays)):
            assert rel_error(g, n) < 1e-4, name


def test_determinism_bit_identical(rng):
    a = rng.standard_normal((4, 6))
    b = rng.standard_normal((6, 3))
    first = grad_of(lambda p, q: ad.sum_all(ad.tanh(ad.matmul(p, q))), a, b)
    second = grad_of(lambda p, q: ad.sum_all(ad.tanh(ad.matmul(p, q))), a, b)
    for x, y in zip(first, second):
        assert x.tobytes() == y.tobytes()


def test_clip_examples():
    g = {"a": np.array([3.0, 4.0])}
    assert ad.clip_global_norm(g, 10.0)["a"].tolist() == [3.0, 4.0]
    np.testing.assert_allclose(ad.clip_global_norm({"a": np.array([30.0, 40.0])}, 10.0)["a"],
                               [6.0, 8.0])


grad_sets = st.dictionaries(
    st.sampled_from("abcde"),
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=6).map(np.array),
    min_size=1,
)


@given(grad_sets)
def test_clip_norm_and_idempotence(grads):
    once = ad.clip_global_norm(grads, 10.0)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    assert abs(ad.global_norm(once) - min(norm, 10.0)) <= 1e-9 * max(1.0, norm)
    twice = ad.clip_global_norm(once, 10.0)
    for k in grads:
        np.testing.assert_allclose(twice[k], once[k], rtol=1e-12, atol=0)


def test_adam_zero_gradient_keeps_params():
    p = {"w": ad.parameter(np.array([1.0, -2.0]))}
    ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState(), lr=0.001)
    np.testing.assert_array_equal(p["w"].value, [1.0, -2.0])


def test_adam_first_step_size():
    p = {"w": ad.parameter(np.array([0.5]))}
    state = ad.AdamState()
    ad.adam_step(p, {"w": np.array([1.0])}, state, lr=0.001)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert abs(p["w"].value[0] - (0.5 - 0.001 / (1 + 1e-8))) < 1e-15
    assert state.step == 1
    assert state.m["w"].shape == (1,)


def test_adam_drives_square_down():
    w = ad.parameter(np.array([1.0]))
    opt = ad.Adam(lr=0.01)
    history = [1.0]
    for _ in range(100):
        opt.step({"w": w}, {"w": 2 * w.value})
        history.append(abs(float(w.value[0])))
    assert all(b < a for a, b in zip(history, history[1:]))
    assert history[-1] < 0.5
    assert opt.state.step == 100


def test_adam_weight_decay_is_coupled():
    p = {"w": ad.parameter(np.array([2.0]))}
    state = ad.AdamState()
    ad.adam_step(p, {"w": np.array([0.0])}, state, lr=0.1, weight_decay=0.5)
    # the decay term enters the moments as a gradient of 0.5 * 2
    np.testing.assert_allclose(state.m["w"], [0.1 * 1.0])


def test_adam_rejects_negative_lr():
    with pytest.raises(ValueError):
        ad.Adam(lr=-1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_fp32_precision_preserved(n, k, m):
    rng = np.random.default_rng(n * 100 + k * 10 + m)
    a = ad.parameter(rng.standard_normal((n, k)), dtype=np.float32)
    b = ad.parameter(rng.standard_normal((k, m)), dtype=np.float32)
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.tanh(ad.matmul(a, b)))
    g = ad.backward(tape, loss)
    assert loss.value.dtype == np.float32
    assert g[a.node].dtype == np.float32 and g[a.node].shape == a.shape
