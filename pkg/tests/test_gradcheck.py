"""Analytic gradients of every primitive against central finite differences."""

import numpy as np
import pytest

from hsanet import tensor as T
from hsanet.gradcheck import NonDeterministicError, finite_diff_check
from hsanet.tensor import ConvSpec, Tensor

STEP, TOL = 1e-3, 1e-3


def u(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape))


def away_from_kinks(rng, *shape, margin=1e-2):
    x = rng.uniform(-1, 1, shape)
    x[np.abs(x) < margin] += 2 * margin
    return Tensor(x)


PRIMITIVES = {
    "add": (lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [(3, 4), (3, 4)]),
    "sub_div": (lambda a, b: T.tsum(T.div(T.sub(a, b), T.add(T.mul(b, b), 1.0))), [(5,), (5,)]),
    "mul_broadcast": (lambda a, b: T.tsum(T.mul(T.mul(a, b), a)), [(2, 3), (3,)]),
    "sigmoid": (lambda a: T.tsum(T.mul(T.sigmoid(a), a)), [(4, 3)]),
    "softmax": (lambda a, w: T.tsum(T.mul(T.softmax(a, axis=1), w)), [(2, 5), (2, 5)]),
    "matmul": (lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))), [(2, 3, 4), (2, 4, 2)]),
    "linear": (lambda x, w, b: T.tsum(T.sigmoid(T.linear(x, w, b))), [(3, 4), (2, 4), (2,)]),
    "conv2d": (
        lambda x, k, b: T.tsum(T.sigmoid(T.conv2d(x, ConvSpec(k, b, padding=1)))),
        [(2, 2, 4, 4), (3, 2, 3, 3), (3,)],
    ),
    "conv2d_strided": (
        lambda x, k, b: T.tsum(T.sigmoid(T.conv2d(x, ConvSpec(k, b, stride=2, padding=1)))),
        [(1, 2, 5, 5), (2, 2, 3, 3), (2,)],
    ),
    "pool": (lambda x, w: T.tsum(T.mul(T.resample(x, 2, "down"), w)), [(1, 2, 4, 4), (1, 2, 2, 2)]),
    "upsample": (lambda x, w: T.tsum(T.mul(T.resample(x, 2, "up"), w)), [(1, 2, 2, 3), (1, 2, 4, 6)]),
    "concat_transpose_reshape": (
        lambda a, b: T.tsum(T.sigmoid(T.reshape(T.transpose(T.concat([a, b], axis=1), (0, 2, 1)), (-1,)))),
        [(2, 3, 2), (2, 1, 2)],
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    f, shapes = PRIMITIVES[name]
    report = finite_diff_check(f, [u(rng, *s) for s in shapes], step=STEP, tol=TOL)
    assert report.passed, str(report)
    assert report.skipped_kinks == 0


def test_relu_gradient_away_from_kinks(rng):
    x = away_from_kinks(rng, 4, 5)
    report = finite_diff_check(lambda a: T.tsum(T.mul(T.relu(a), a)), x, STEP, TOL)
    assert report.passed and report.skipped_kinks == 0


def test_chain_conv_softmax_linear(rng):
    def f(x, k, w, b):
        h = T.softmax(T.conv2d(x, ConvSpec(k, padding=1)), axis=1)
        return T.tsum(T.sigmoid(T.linear(T.transpose(h, (0, 2, 3, 1)), w, b)))

    args = [u(rng, 1, 2, 4, 4), u(rng, 3, 2, 3, 3), u(rng, 2, 3), u(rng, 2)]
    report = finite_diff_check(f, args, STEP, TOL)
    assert report.passed, str(report)


def test_sum_of_squares_passes(rng):
    assert finite_diff_check(lambda x: T.tsum(T.mul(x, x)), u(rng, 6), STEP, TOL).passed


def test_constant_function_passes(rng):
    report = finite_diff_check(lambda x: T.add(T.mul(T.tsum(x), 0.0), 3.0), u(rng, 4), STEP, TOL)
    assert report.passed and report.max_rel_error == 0.0


def test_wrong_gradient_detected(rng):
    def bad_square(x):
        out = T.tsum(T.mul(x, x))
        bw = out._backward
        out._backward = lambda g: [v * 1.1 for v in bw(g)]
        return out

    report = finite_diff_check(bad_square, u(rng, 3), STEP, TOL)
    assert not report.passed


def test_nondeterministic_rejected(rng):
    calls = iter(range(1000))

    def f(x):
        return T.add(T.tsum(x), float(next(calls)))

    with pytest.raises(NonDeterministicError):
        finite_diff_check(f, u(rng, 2), STEP, TOL)


def test_kink_crossing_is_skipped_not_failed():
    x = Tensor(np.array([0.0, 0.5]))
    report = finite_diff_check(lambda a: T.tsum(T.relu(a)), x, STEP, TOL)
    assert report.passed
    assert report.skipped_kinks == 1 and report.checked == 1
