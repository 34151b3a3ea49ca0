import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from owtta import tensor as T
from owtta.gradcheck import grad_check
from owtta.tensor import DomainError, ShapeError, Tape


def finite(shape, lo=-3.0, hi=3.0):
    return arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False, allow_infinity=False))


def test_softmax_of_zeros_is_uniform():
    assert np.allclose(T.softmax(np.zeros((1, 3))).data, 1 / 3)


def test_matmul_identity():
    A = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(T.matmul(np.eye(3), A).data, A)


@given(finite((5,), 0.1, 3.0))
def test_cosine_self_similarity(x):
    assert T.cosine_similarity(x, x).item() == pytest.approx(1.0, abs=1e-12)


def test_backward_sum_of_squares():
    x = T.parameter([1.0, 2.0])
    with Tape() as tape:
        loss = T.sum(x * x)
        tape.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_entropy_gradient_vanishes_at_uniform_logits():
    z = T.parameter(np.zeros(5))
    with Tape() as tape:
        loss = T.entropy(T.softmax(z))
        tape.backward(loss)
    assert np.allclose(z.grad, 0.0, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = T.parameter(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_accumulates_until_reset():
    x = T.parameter([3.0])
    for expected in (6.0, 12.0):
        with Tape() as tape:
            tape.backward(T.sum(x * x))
        assert x.grad[0] == expected
    x.zero_grad()
    with Tape() as tape:
        tape.backward(T.sum(x * x))
    assert x.grad[0] == 6.0


def test_backward_outside_tape_is_an_error():
    x = T.parameter([1.0])
    with Tape():
        loss = T.sum(x)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_log_rejects_nonpositive():
    with pytest.raises(DomainError):
        T.log(np.array([1.0, 0.0]))


def test_broadcast_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        T.add(np.ones((2, 3)), np.ones((4,)))


def test_replay_reproduces_outputs_bitwise():
    rng = np.random.default_rng(0)
    w = T.parameter(rng.normal(size=(4, 3)))
    x = T.constant(rng.normal(size=(2, 4)))
    with Tape() as tape:
        y = T.softmax(T.gelu(x @ w))
    assert np.array_equal(tape.replay()[-1], y.data)


def test_untracked_when_no_tape():
    x = T.parameter([1.0])
    with Tape() as tape:
        pass
    T.sum(x * x)
    assert len(tape) == 0


def test_tapes_on_separate_threads_do_not_interfere():
    out = {}

    def work(k):
        x = T.parameter([float(k)])
        with Tape() as tape:
            tape.backward(T.sum(x * x * x))
        out[k] = (len(tape), x.grad[0])

    threads = [threading.Thread(target=work, args=(k,)) for k in (1, 2, 3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert out == {k: (3, 3.0 * k * k) for k in (1, 2, 3)}


def test_grad_check_square():
    x = T.parameter([3.0])
    assert grad_check(lambda: T.sum(x * x), x) < 1e-8


def test_grad_check_step_bounds():
    x = T.parameter([3.0])
    with pytest.raises(ValueError):
        grad_check(lambda: T.sum(x * x), x, h=1e-3)


def _mlp3(rng):
    ws = [T.parameter(rng.normal(size=s) / 2) for s in ((5, 6), (6, 6), (6, 3))]
    x = T.constant(rng.normal(size=(4, 5)))

    def fn():
        h = T.gelu(x @ ws[0])
        h = T.layer_norm(h @ ws[1], T.constant(np.ones(6)), T.constant(np.zeros(6)))
        return T.sum(T.entropy(T.softmax(h @ ws[2])))

    return fn, ws


def test_three_layer_net_matches_finite_differences():
    fn, ws = _mlp3(np.random.default_rng(3))
    assert grad_check(fn, ws) < 1e-4


# Every differentiable primitive against central differences at random points.
def _unary_cases(rng):
    a = T.parameter(rng.normal(size=(3, 4)))
    b = T.parameter(rng.normal(size=(3, 4)))
    g = T.parameter(rng.normal(size=4))
    be = T.parameter(rng.normal(size=4))
    pos = T.parameter(rng.uniform(0.2, 2.0, size=(3, 4)))
    m = T.parameter(rng.normal(size=(4, 2)))
    bm = T.parameter(rng.normal(size=(2, 3, 4)))
    prob = T.parameter(rng.dirichlet(np.ones(4), size=3))
    w = T.constant(rng.normal(size=(3, 4)))
    return {
        "matmul": (lambda: T.sum((a @ m) * T.constant(rng_fixed(3, 2))), [a, m]),
        "batched_matmul": (lambda: T.sum(bm @ T.transpose(bm, (0, 2, 1)) * 0.3), [bm]),
        "add": (lambda: T.sum((a + g) * w), [a, g]),
        "sub": (lambda: T.sum((a - b) * w), [a, b]),
        "mul": (lambda: T.sum(a * b * w), [a, b]),
        "exp": (lambda: T.sum(T.exp(a) * w), [a]),
        "log": (lambda: T.sum(T.log(pos) * w), [pos]),
        "softmax": (lambda: T.sum(T.softmax(a, axis=-1) * w), [a]),
        "layer_norm": (lambda: T.sum(T.layer_norm(a, g, be) * w), [a, g, be]),
        "gelu": (lambda: T.sum(T.gelu(a) * w), [a]),
        "concat": (lambda: T.sum(T.concat([a, b], axis=1) * T.constant(rng_fixed(3, 8))), [a, b]),
        "mean": (lambda: T.sum(T.mean(a, axis=0) * g), [a, g]),
        "reshape": (lambda: T.sum(T.reshape(a, (4, 3)) * T.constant(rng_fixed(4, 3))), [a]),
        "transpose": (lambda: T.sum(T.transpose(a, (1, 0)) * T.constant(rng_fixed(4, 3))), [a]),
        "take": (lambda: T.sum(a[:, 1:3] * T.constant(rng_fixed(3, 2))), [a]),
        "l2_norm": (lambda: T.sum(T.l2_norm(a) * T.constant(rng_fixed(3))), [a]),
        "normalize": (lambda: T.sum(T.normalize(a) * w), [a]),
        "cosine": (lambda: T.sum(T.cosine_similarity(a, b) * T.constant(rng_fixed(3))), [a, b]),
        "entropy": (lambda: T.sum(T.entropy(prob) * T.constant(rng_fixed(3))), [prob]),
    }


def rng_fixed(*shape):
    return np.random.default_rng(99).normal(size=shape)


@pytest.mark.parametrize("op", sorted(_unary_cases(np.random.default_rng(0))))
def test_primitive_gradients_at_random_points(op):
    for seed in range(100 if op not in ("layer_norm", "batched_matmul") else 25):
        fn, params = _unary_cases(np.random.default_rng(seed))[op]
        assert grad_check(fn, params) < 1e-4, (op, seed)


@given(finite((4, 6), -50, 50))
def test_softmax_rows_on_simplex(z):
    p = T.softmax(z, axis=-1).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(p >= 0) and np.all(p <= 1)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_tape_determinism(seed):
    def run():
        rng = np.random.default_rng(seed)
        w = T.parameter(rng.normal(size=(3, 3)))
        with Tape() as tape:
            loss = T.sum(T.entropy(T.softmax(T.constant(rng.normal(size=(2, 3))) @ w)))
            tape.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_entropy_handles_zero_probabilities():
    assert T.entropy(np.array([0.5, 0.5, 0.0, 0.0])).item() == pytest.approx(math.log(2))
    assert T.entropy(np.array([1.0, 0.0])).item() == 0.0


def test_normalize_of_zero_vector_is_zero():
    assert np.array_equal(T.normalize(np.zeros((1, 3))).data, np.zeros((1, 3)))
