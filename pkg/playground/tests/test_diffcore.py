import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from funcspace import diffcore
from funcspace.diffcore import NonFiniteError, ShapeMismatchError


def test_forward_square():
    output, tape = diffcore.forward(lambda x: diffcore.square(x), 3.0)
    assert float(output) == 9.0
    assert [node.op for node in tape.nodes] == ["input", "mul"]


def test_forward_sigmoid_at_zero():
    output, _ = diffcore.forward(lambda x: diffcore.sigmoid(x), 0.0)
    assert float(output) == 0.5


def test_forward_l1_norm():
    output, _ = diffcore.forward(
        lambda w: diffcore.reduce_sum(diffcore.absolute(w)), [[1.0, -2.0], [0.0, 3.0]]
    )
    assert float(output) == 6.0


def test_backward_square():
    _, tape = diffcore.forward(lambda x: diffcore.square(x), 3.0)
    (grad,) = diffcore.backward(tape)
    assert float(grad) == 6.0


def test_backward_sigmoid():
    _, tape = diffcore.forward(lambda x: diffcore.sigmoid(x), 0.0)
    (grad,) = diffcore.backward(tape)
    assert float(grad) == pytest.approx(0.25)


def test_backward_least_squares_matches_closed_form(rng):
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal(3)
    z = rng.standard_normal(3)

    def residual_norm(z):
        residual = diffcore.sub(diffcore.matmul(diffcore.as_tensor(a), z), diffcore.as_tensor(b))
        return diffcore.reduce_sum(diffcore.square(residual))

    _, tape = diffcore.forward(residual_norm, z)
    (grad,) = diffcore.backward(tape)
    np.testing.assert_allclose(grad.numpy(), 2 * a.T @ (a @ z - b), rtol=1e-12, atol=1e-12)


def test_backward_unused_input_gets_zero():
    _, tape = diffcore.forward(lambda x, y: diffcore.square(x), 2.0, [1.0, 2.0])
    grad_x, grad_y = diffcore.backward(tape)
    assert float(grad_x) == 4.0
    assert torch.equal(grad_y, torch.zeros(2, dtype=torch.float64))


def test_backward_seed_shape_mismatch_names_node():
    _, tape = diffcore.forward(lambda x: diffcore.sigmoid(x), [0.0, 1.0])
    with pytest.raises(ShapeMismatchError) as info:
        diffcore.backward(tape, seed=[1.0, 1.0, 1.0])
    assert info.value.node_id == tape.output_node.node_id
    assert info.value.op == "sigmoid"


def test_non_finite_intermediate_reports_first_node():
    def closure(x):
        logged = diffcore.power(x, 0.5)
        return diffcore.reduce_sum(logged)

    with pytest.raises(NonFiniteError) as info:
        diffcore.forward(closure, [-1.0, 4.0])
    assert info.value.node_id == 1
    assert info.value.op == "power"


def test_non_finite_input_is_rejected():
    with pytest.raises(NonFiniteError):
        diffcore.forward(lambda x: diffcore.square(x), [1.0, math.inf])


def test_replay_is_bit_identical(rng):
    weight = rng.standard_normal((4, 3))
    x = rng.standard_normal((5, 4))

    def closure(x):
        hidden = diffcore.leaky_relu(diffcore.matmul(x, diffcore.as_tensor(weight)))
        return diffcore.reduce_sum(diffcore.sigmoid(hidden), dim=1)

    output, tape = diffcore.forward(closure, x)
    assert torch.equal(tape.replay(), output.detach())
    assert torch.equal(tape.replay(), tape.replay())


def test_tape_is_topologically_ordered():
    _, tape = diffcore.forward(
        lambda x: diffcore.reduce_sum(diffcore.mul(diffcore.sigmoid(x), x)), [0.5, 1.5]
    )
    for node in tape.nodes:
        assert all(source < node.node_id for source in node.input_ids)


def test_primitives_outside_tape_only_compute():
    assert diffcore.active_tape() is None
    value = diffcore.sigmoid(diffcore.as_tensor(0.0))
    assert float(value) == 0.5


@pytest.mark.parametrize(
    "values, expected",
    [
        ([3.0, 1.0, 1.0, 5.0], [0.0, 1.0, 0.0, 0.0]),
        ([2.0, 2.0], [1.0, 0.0]),
        ([4.0, 9.0, 0.5], [0.0, 0.0, 1.0]),
    ],
)
def test_min_routes_gradient_to_lowest_argmin(values, expected):
    _, tape = diffcore.forward(lambda x: diffcore.min_select(x), values)
    (grad,) = diffcore.backward(tape)
    assert grad.tolist() == expected


def test_min_matches_argmin_branch_away_from_ties():
    errors = np.array([[4.0, 9.0], [3.0, 1.0]])

    def min_of_squares(x):
        return diffcore.reduce_sum(diffcore.min_select(diffcore.square(x), dim=1))

    report = diffcore.finite_diff_check(min_of_squares, np.sqrt(errors))
    assert report.passed
    # Only the selected branch of each row moves the loss.
    assert report.analytic == pytest.approx([4.0, 0.0, 0.0, 2.0])


def test_split_requires_full_cover():
    x = diffcore.as_tensor(np.arange(6.0))
    first, second = diffcore.split(x, [2, 4])
    assert first.tolist() == [0.0, 1.0]
    assert second.tolist() == [2.0, 3.0, 4.0, 5.0]
    with pytest.raises(ValueError):
        diffcore.split(x, [2, 3])


def test_cube_finite_difference():
    report = diffcore.finite_diff_check(lambda x: diffcore.power(x, 3.0), 2.0, step=1e-5)
    assert report.max_rel_error < 1e-6


def test_soft_threshold_finite_difference_in_t():
    w = np.array([0.3, -0.8, 1.2, 0.05])

    def gate(t):
        shifted = diffcore.sub(diffcore.absolute(diffcore.as_tensor(w)), t)
        return diffcore.reduce_sum(diffcore.sigmoid(diffcore.scale(shifted, 10.0)))

    report = diffcore.finite_diff_check(gate, 0.4, tolerance=1e-4)
    assert report.passed


def test_finite_diff_check_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        diffcore.finite_diff_check(lambda x: diffcore.square(x), 1.0, step=0.0)


def test_finite_diff_check_detects_wrong_gradient():
    def detached(x):
        # The detached factor hides part of the derivative from the tape.
        return diffcore.mul(x, x.detach())

    report = diffcore.finite_diff_check(detached, 1.5)
    assert not report.passed


def _unary_cases():
    return [
        ("sigmoid", lambda x: diffcore.sigmoid(x), lambda g: g.standard_normal((3, 4))),
        ("leaky_relu", lambda x: diffcore.leaky_relu(x, 0.01), lambda g: _away_from_zero(g)),
        ("leaky_relu_slope", lambda x: diffcore.leaky_relu(x, 0.2), lambda g: _away_from_zero(g)),
        ("abs", lambda x: diffcore.absolute(x), lambda g: _away_from_zero(g)),
        ("sum", lambda x: diffcore.reduce_sum(diffcore.square(x), dim=1), lambda g: g.standard_normal((3, 4))),
        ("power", lambda x: diffcore.power(x, -1.5), lambda g: g.uniform(0.5, 2.0, size=(3, 4))),
        ("scale", lambda x: diffcore.scale(x, -2.5), lambda g: g.standard_normal((3, 4))),
        ("neg", lambda x: diffcore.neg(diffcore.square(x)), lambda g: g.standard_normal((3, 4))),
        (
            "reshape",
            lambda x: diffcore.square(diffcore.reshape(x, (4, 3))),
            lambda g: g.standard_normal((3, 4)),
        ),
        (
            "transpose",
            lambda x: diffcore.matmul(diffcore.transpose(x, 0, 1), x),
            lambda g: g.standard_normal((3, 4)),
        ),
        (
            "narrow",
            lambda x: diffcore.square(diffcore.narrow(x, 1, 1, 2)),
            lambda g: g.standard_normal((3, 4)),
        ),
        (
            "take",
            lambda x: diffcore.square(diffcore.take(x, [2, 0, 2], dim=0)),
            lambda g: g.standard_normal((3, 4)),
        ),
        (
            "min",
            lambda x: diffcore.min_select(x, dim=1),
            lambda g: g.permutation(12).reshape(3, 4).astype(float),
        ),
    ]


def _away_from_zero(generator):
    values = generator.uniform(0.1, 2.0, size=(3, 4))
    return values * generator.choice([-1.0, 1.0], size=(3, 4))


@pytest.mark.parametrize("name, closure, sample", _unary_cases(), ids=[c[0] for c in _unary_cases()])
def test_unary_primitives_agree_with_central_differences(name, closure, sample):
    generator = np.random.default_rng(1)
    for _ in range(100):
        report = diffcore.finite_diff_check(closure, sample(generator), step=1e-5, tolerance=1e-4)
        assert report.passed, f"{name}: {report.max_rel_error:.3e}"


def _binary_cases():
    return [
        ("add", lambda a, b: diffcore.square(diffcore.add(a, b))),
        ("sub", lambda a, b: diffcore.square(diffcore.sub(a, b))),
        ("mul", lambda a, b: diffcore.mul(a, b)),
        ("matmul", lambda a, b: diffcore.matmul(a, diffcore.transpose(b, 0, 1))),
        ("concat", lambda a, b: diffcore.square(diffcore.concat([a, b], dim=1))),
    ]


@pytest.mark.parametrize("name, closure", _binary_cases(), ids=[c[0] for c in _binary_cases()])
def test_binary_primitives_agree_with_central_differences(name, closure):
    generator = np.random.default_rng(2)
    for _ in range(100):
        point = (generator.standard_normal((2, 3)), generator.standard_normal((2, 3)))
        report = diffcore.finite_diff_check(closure, point, step=1e-5, tolerance=1e-4)
        assert report.passed, f"{name}: {report.max_rel_error:.3e}"


@pytest.mark.parametrize("transposed", [False, True])
def test_convolutions_agree_with_central_differences(transposed):
    generator = np.random.default_rng(3)
    convolve = diffcore.conv_transpose2d if transposed else diffcore.conv2d
    weight_shape = (3, 2, 3, 3) if transposed else (2, 3, 3, 3)
    for _ in range(20):
        image = generator.standard_normal((1, 3, 4, 5))
        weight = generator.standard_normal(weight_shape)
        bias = generator.standard_normal(2)
        report = diffcore.finite_diff_check(
            lambda x, w, b: convolve(x, w, b, padding=1),
            (image, weight, bias),
            step=1e-5,
            tolerance=1e-4,
        )
        assert report.passed, report.max_rel_error


def test_primitives_pass_gradcheck():
    generator = torch.Generator().manual_seed(0)

    def composed(x, w):
        hidden = diffcore.leaky_relu(diffcore.matmul(x, w), 0.01)
        gated = diffcore.mul(diffcore.sigmoid(hidden), hidden)
        return diffcore.reduce_sum(diffcore.power(diffcore.add(diffcore.square(gated), 1.0), 0.5))

    x = torch.randn(4, 3, dtype=torch.float64, generator=generator, requires_grad=True)
    w = torch.randn(3, 5, dtype=torch.float64, generator=generator, requires_grad=True)
    assert gradcheck(composed, (x, w), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_value_and_grad():
    value, (grad,) = diffcore.value_and_grad(lambda x: diffcore.reduce_sum(diffcore.square(x)), [1.0, -2.0])
    assert float(value) == 5.0
    assert grad.tolist() == [2.0, -4.0]


def test_tapes_are_thread_local():
    from concurrent.futures import ThreadPoolExecutor

    def run(offset):
        _, tape = diffcore.forward(
            lambda x: diffcore.reduce_sum(diffcore.square(diffcore.add(x, float(offset)))), [0.0, 1.0]
        )
        (grad,) = diffcore.backward(tape)
        return len(tape), grad.tolist()

    with ThreadPoolExecutor(max_workers=4) as pool:
        results = list(pool.map(run, range(8)))
    for offset, (length, grad) in enumerate(results):
        assert length == 4
        assert grad == [2.0 * offset, 2.0 * (1 + offset)]
