import math

import numpy as np
import pytest

from src.state import Architecture, InitScheme
from src.tools.autodiff import Tape, as_matrix, backward, softmax
from src.tools.errors import ContractViolation, NumericFailure
from src.tools.gradcheck import check_gradients_fd
from src.tools.meta_engine import central_difference
from src.tools.models import classify, discriminate, features, init_params, param_count, unflatten
from tests.conftest import random_matrix


def _tape_grad(build, x):
    tape = Tape()
    leaf = tape.leaf(x)
    loss = build(tape, leaf)
    return tape.scalar(loss), backward(tape, loss)[leaf]


def _fd_grad(build, x, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)

    def value(flat):
        tape = Tape()
        return tape.scalar(build(tape, tape.leaf(flat.reshape(x.shape))))

    return central_difference(value, x.ravel(), eps).reshape(x.shape)


def _weighted(tape, node, seed):
    """sum(node * w) for a fixed random w, so every entry gets a distinct adjoint."""
    w = tape.constant(random_matrix(seed, tape.shape(node)))
    return tape.sum(tape.mul(node, w))


# --- Worked examples ---

def test_sum_adjoint_is_ones():
    x = random_matrix(0, (3, 5))
    _, grad = _tape_grad(lambda tape, leaf: tape.sum(leaf), x)
    np.testing.assert_array_equal(grad, np.ones_like(x))


def test_square_sum_adjoint():
    _, grad = _tape_grad(lambda tape, leaf: tape.sum(tape.mul(leaf, leaf)), [[1.0, 2.0]])
    np.testing.assert_array_equal(grad, [[2.0, 4.0]])


def test_cross_entropy_saturated_and_uniform():
    tape = Tape()
    saturated = tape.softmax_cross_entropy(tape.constant([[10.0, -10.0]]), [0])
    uniform = tape.softmax_cross_entropy(tape.constant([[0.0, 0.0, 0.0]]), [2])
    assert tape.scalar(saturated) == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-5)
    assert tape.scalar(uniform) == pytest.approx(math.log(3.0), abs=1e-12)


def test_cross_entropy_is_row_mean():
    logits = random_matrix(1, (2, 4))
    tape = Tape()
    both = tape.scalar(tape.softmax_cross_entropy(tape.constant(logits), [1, 3]))
    first = tape.scalar(tape.softmax_cross_entropy(tape.constant(logits[:1]), [1]))
    second = tape.scalar(tape.softmax_cross_entropy(tape.constant(logits[1:]), [3]))
    assert both == pytest.approx((first + second) / 2, abs=1e-14)


def test_cross_entropy_rejects_bad_labels():
    tape = Tape()
    logits = tape.constant(np.zeros((2, 3)))
    with pytest.raises(ContractViolation):
        tape.softmax_cross_entropy(logits, [0, 3])
    with pytest.raises(ContractViolation):
        tape.softmax_cross_entropy(logits, [0])


def test_entropy_examples():
    tape = Tape()
    assert tape.scalar(tape.entropy(tape.constant(np.zeros((1, 4))))) == pytest.approx(math.log(4.0), abs=1e-12)
    assert tape.scalar(tape.entropy(tape.constant([[50.0, -50.0]]))) == pytest.approx(0.0, abs=1e-10)
    assert tape.scalar(tape.entropy(tape.constant([[1.0, 2.0]]))) == pytest.approx(0.5822, abs=1e-4)


def test_l1_discrepancy_examples():
    tape = Tape()
    z = tape.constant(random_matrix(2, (5, 3)))
    assert tape.scalar(tape.l1_discrepancy(z, z)) == 0.0
    opposite = tape.l1_discrepancy(tape.constant([[50.0, -50.0]]), tape.constant([[-50.0, 50.0]]))
    assert tape.scalar(opposite) == pytest.approx(1.0, abs=1e-12)
    partial = tape.l1_discrepancy(tape.constant([[math.log(0.6), math.log(0.4)]]), tape.constant([[0.0, 0.0]]))
    assert tape.scalar(partial) == pytest.approx(0.1, abs=1e-12)


def test_sigmoid_cross_entropy_at_zero_logit():
    tape = Tape()
    loss = tape.sigmoid_cross_entropy(tape.constant(np.zeros((6, 1))), 1.0)
    assert tape.scalar(loss) == pytest.approx(math.log(2.0), abs=1e-15)


# --- Bounds ---

@pytest.mark.parametrize("seed", range(10))
def test_loss_bounds(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 6))
    z1 = rng.normal(0.0, 5.0, size=(8, k))
    z2 = rng.normal(0.0, 5.0, size=(8, k))
    np.testing.assert_allclose(softmax(z1).sum(axis=1), 1.0, atol=1e-6)

    tape = Tape()
    a, b = tape.constant(z1), tape.constant(z2)
    assert tape.scalar(tape.softmax_cross_entropy(a, rng.integers(k, size=8))) >= 0.0
    assert 0.0 <= tape.scalar(tape.entropy(a)) <= math.log(k)
    d_ab = tape.scalar(tape.l1_discrepancy(a, b))
    assert 0.0 <= d_ab <= 2.0 / k
    assert d_ab == tape.scalar(tape.l1_discrepancy(b, a))


# --- Gradient reversal ---

@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
def test_grad_reverse_contract(lam):
    x = random_matrix(3, (4, 3))
    w = random_matrix(4, (4, 3))
    tape = Tape()
    leaf = tape.leaf(x)
    reversed_ = tape.grad_reverse(leaf, lam)
    assert tape.value(reversed_) is tape.value(leaf)

    loss = tape.sum(tape.mul(reversed_, tape.constant(w)))
    grad = backward(tape, loss)[leaf]
    np.testing.assert_array_equal(grad, w * -lam)


def test_grad_reverse_all_minus_one():
    _, grad = _tape_grad(lambda tape, leaf: tape.sum(tape.grad_reverse(leaf, 1.0)), np.ones((2, 3)))
    np.testing.assert_array_equal(grad, -np.ones((2, 3)))


def test_grad_reverse_rejects_negative_coefficient():
    tape = Tape()
    with pytest.raises(ContractViolation):
        tape.grad_reverse(tape.leaf([[1.0]]), -1.0)


# --- Finite-difference soundness of every primitive ---

PRIMITIVES = {
    "matmul": lambda t, x: _weighted(t, t.matmul(x, t.constant(random_matrix(10, (4, 2)))), 11),
    "matmul_right": lambda t, x: _weighted(t, t.matmul(t.constant(random_matrix(12, (2, 3))), x), 13),
    "add_bias": lambda t, x: _weighted(t, t.add_bias(t.constant(random_matrix(14, (5, 4))), x), 15),
    "add": lambda t, x: _weighted(t, t.add(x, t.mul(x, x)), 16),
    "relu": lambda t, x: _weighted(t, t.relu(x), 17),
    "mean": lambda t, x: t.mean(t.mul(x, x)),
    "scale": lambda t, x: _weighted(t, t.scale(x, -2.5), 18),
    "l2_rows": lambda t, x: _weighted(t, t.l2_normalize(x, axis=1), 19),
    "l2_cols": lambda t, x: _weighted(t, t.l2_normalize(x, axis=0), 20),
    "cross_entropy": lambda t, x: t.softmax_cross_entropy(x, [0, 1, 3]),
    "entropy": lambda t, x: t.entropy(x),
    "l1_discrepancy": lambda t, x: t.l1_discrepancy(x, t.constant(random_matrix(21, t.shape(x)))),
    "sigmoid_cross_entropy": lambda t, x: t.sigmoid_cross_entropy(t.matmul(x, t.constant(random_matrix(22, (4, 1)))), [1.0, 0.0, 1.0]),
}

SHAPES = {"matmul_right": (3, 4), "add_bias": (1, 4), "cross_entropy": (3, 4), "sigmoid_cross_entropy": (3, 4)}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    build = PRIMITIVES[name]
    x = random_matrix(30, SHAPES.get(name, (3, 4)))
    _, ad = _tape_grad(build, x)
    fd = _fd_grad(build, x)
    rel = np.abs(fd - ad) / np.maximum(1e-8, np.abs(fd) + np.abs(ad))
    assert rel.max() < 1e-4


def _composite_loss(arch, src_x, src_y, tgt_x):
    def build(tape, nodes):
        feat_src = features(tape, nodes, arch, tape.constant(src_x))
        feat_tgt = features(tape, nodes, arch, tape.constant(tgt_x))
        ce = tape.softmax_cross_entropy(classify(tape, nodes, arch, feat_src, 0), src_y)
        ent = tape.scale(tape.entropy(classify(tape, nodes, arch, feat_tgt, 0)), 0.3)
        disc = tape.scale(tape.l1_discrepancy(
            classify(tape, nodes, arch, feat_tgt, 0), classify(tape, nodes, arch, feat_tgt, 1)), 0.5)
        dom = tape.sigmoid_cross_entropy(discriminate(tape, nodes, arch, feat_src), 1.0)
        return tape.add(tape.add(ce, ent), tape.add(disc, dom))
    return build


@pytest.mark.parametrize("seed", range(50))
def test_random_model_losses_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 4))
    arch = Architecture(
        input_dim=2,
        feature_dims=[int(rng.integers(2, 5))],
        num_classes=k,
        num_classifiers=2,
        discriminator_dims=[int(rng.integers(1, 4))],
        classifier_kind="normalized-with-temperature" if seed % 2 else "plain-linear",
        temperature=0.5,
    )
    params = init_params(arch, InitScheme(kind="xavier-normal"), seed)
    # zero biases put dead units exactly on the relu kink, where one-sided and central slopes differ
    params = unflatten(params.flatten() + rng.uniform(-0.1, 0.1, param_count(arch)), arch)
    build = _composite_loss(arch, rng.uniform(-1, 1, (6, 2)), rng.integers(k, size=6), rng.uniform(-1, 1, (5, 2)))
    assert check_gradients_fd(build, params) < 1e-4


def test_check_gradients_quadratic():
    arch = Architecture(input_dim=2, feature_dims=[3], num_classes=2)
    params = init_params(arch, InitScheme(), 0)

    def build(tape, nodes):
        total = None
        for node in nodes.values():
            term = tape.sum(tape.mul(node, node))
            total = term if total is None else tape.add(total, term)
        return total

    assert check_gradients_fd(build, params) < 1e-8


def test_check_gradients_mlp_cross_entropy():
    arch = Architecture(input_dim=2, feature_dims=[3], num_classes=3, discriminator_dims=[])
    params = init_params(arch, InitScheme(kind="xavier-normal"), 4)
    x = random_matrix(5, (1, 2))

    def build(tape, nodes):
        return tape.softmax_cross_entropy(classify(tape, nodes, arch, features(tape, nodes, arch, tape.constant(x)), 0), [2])

    assert check_gradients_fd(build, params) < 1e-4


def test_check_gradients_flags_reversed_graph():
    arch = Architecture(input_dim=2, feature_dims=[3], num_classes=2)
    params = init_params(arch, InitScheme(kind="xavier-normal"), 4)
    x = random_matrix(6, (4, 2))

    def build(tape, nodes):
        feat = tape.grad_reverse(features(tape, nodes, arch, tape.constant(x)), 1.0)
        return tape.softmax_cross_entropy(classify(tape, nodes, arch, feat, 0), [0, 1, 0, 1])

    assert check_gradients_fd(build, params) > 0.5


# --- Tape contracts ---

def test_identical_tapes_give_identical_adjoints():
    x = random_matrix(7, (3, 4))
    build = PRIMITIVES["entropy"]
    np.testing.assert_array_equal(_tape_grad(build, x)[1], _tape_grad(build, x)[1])


def test_backward_needs_scalar_loss():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ContractViolation):
        backward(tape, x)


def test_shape_mismatches_are_contract_violations():
    tape = Tape()
    a, b = tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3)))
    with pytest.raises(ContractViolation):
        tape.matmul(a, b)
    with pytest.raises(ContractViolation):
        tape.add_bias(a, tape.leaf(np.ones((2, 3))))


def test_non_finite_input_is_numeric_failure():
    with pytest.raises(NumericFailure):
        as_matrix([[1.0, np.nan]])
