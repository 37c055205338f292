import math

import numpy as np
import pytest

from src.state import Architecture, DaMethod, InitScheme
from src.tools.autodiff import Tape, backward
from src.tools.da_core import (
    DaBatch,
    SgdState,
    adapt_step,
    adaptation_term,
    build_da_loss,
    da_step,
    ssda_step,
    supervised_loss,
    uda_loss,
)
from src.tools.domains import make_dataset
from src.tools.errors import ContractViolation
from src.tools.gradcheck import check_gradients_fd
from src.tools.models import bind_params, classify, features, group_mask, init_params, param_count, unflatten, value_and_grad


def _sup_value(params, arch, data):
    return value_and_grad(params, lambda tape, nodes: supervised_loss(tape, nodes, arch, data)).value


def _uda_grad(method, params, arch, src, tgt):
    tape, loss = uda_loss(method, params, arch, src, tgt)
    adjoints = backward(tape, loss)
    # bind_params pushed the parameter leaves first, in layout order
    return tape.scalar(loss), np.concatenate([adjoints[i].ravel() for i in range(len(params.tensors))])


# --- uda_loss ---

@pytest.mark.parametrize("kind", ["dann", "mcd-onestep", "mme"])
def test_zero_lambda_is_supervised_loss(kind, tiny_params, tiny_arch, moons_pair):
    src, tgt = moons_pair
    tape, loss = uda_loss(DaMethod(kind=kind, lam=0.0), tiny_params, tiny_arch, src, tgt)
    assert tape.scalar(loss) == pytest.approx(_sup_value(tiny_params, tiny_arch, src), abs=1e-12)


def test_dann_chance_discriminator_gives_ln2(tiny_params, tiny_arch, moons_pair):
    src, tgt = moons_pair
    params = tiny_params.copy()
    params.tensors["D.out.W"][:] = 0.0
    params.tensors["D.out.b"][:] = 0.0

    tape = Tape()
    nodes = bind_params(tape, params)
    feat_src = features(tape, nodes, tiny_arch, tape.constant(src.x))
    feat_tgt = features(tape, nodes, tiny_arch, tape.constant(tgt.x))
    adapt = adaptation_term(tape, nodes, tiny_arch, DaMethod(kind="dann"), feat_src, feat_tgt)
    assert tape.scalar(adapt) == pytest.approx(math.log(2.0), abs=1e-15)


def test_mcd_tied_heads_double_supervised_loss(tiny_params, tiny_arch, moons_pair):
    src, tgt = moons_pair
    params = tiny_params.copy()
    params.tensors["C1.W"] = params["C0.W"].copy()
    params.tensors["C1.b"] = params["C0.b"].copy()
    single = Architecture(**{**tiny_arch.model_dump(), "num_classifiers": 1})
    one_head = unflatten(np.concatenate([params[n].ravel() for n in ("F.0.W", "F.0.b", "C0.W", "C0.b", "D.0.W", "D.0.b", "D.out.W", "D.out.b")]), single)

    tape, loss = uda_loss(DaMethod(kind="mcd-onestep", lam=1.0), params, tiny_arch, src, tgt)
    assert tape.scalar(loss) == pytest.approx(2.0 * _sup_value(one_head, single, src), abs=1e-12)


def test_mcd_needs_two_heads(moons_pair):
    src, tgt = moons_pair
    arch = Architecture(input_dim=2, feature_dims=[4])
    params = init_params(arch, InitScheme(), 0)
    with pytest.raises(ContractViolation):
        uda_loss(DaMethod(kind="mcd-onestep"), params, arch, src, tgt)


def test_target_batch_must_be_unlabeled(tiny_params, tiny_arch, moons_pair):
    src, _ = moons_pair
    with pytest.raises(ContractViolation):
        uda_loss(DaMethod(kind="dann"), tiny_params, tiny_arch, src, src)


def test_mme_reversal_sign_relation(tiny_arch, moons_pair):
    src, tgt = moons_pair
    arch = Architecture(**{**tiny_arch.model_dump(), "classifier_kind": "normalized-with-temperature", "temperature": 0.5})
    params = init_params(arch, InitScheme(kind="xavier-normal"), 3)
    method = DaMethod(kind="mme", lam=1.0)

    def reversed_term(tape, nodes):
        feat_src = features(tape, nodes, arch, tape.constant(src.x))
        feat_tgt = features(tape, nodes, arch, tape.constant(tgt.x))
        return adaptation_term(tape, nodes, arch, method, feat_src, feat_tgt)

    def plain_entropy(tape, nodes):
        feat_tgt = features(tape, nodes, arch, tape.constant(tgt.x))
        return tape.entropy(classify(tape, nodes, arch, feat_tgt, 0))

    g_rev = value_and_grad(params, reversed_term).grad
    g_plain = value_and_grad(params, plain_entropy).grad
    heads = group_mask(arch, ("C0.",))
    extractor = group_mask(arch, ("F.",))
    np.testing.assert_allclose(g_rev[heads], -g_plain[heads], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g_rev[extractor], g_plain[extractor], rtol=1e-12, atol=1e-15)
    assert np.abs(g_plain[heads]).max() > 0

    # the supervised part of the full objective is untouched by the reversal
    g_full = value_and_grad(params, lambda t, n: build_da_loss(t, n, arch, method, DaBatch(src, tgt)).total).grad
    g_sup = value_and_grad(params, lambda t, n: supervised_loss(t, n, arch, src)).grad
    np.testing.assert_allclose(g_full, g_sup + g_rev, rtol=1e-10, atol=1e-13)


# --- da_step ---

def test_zero_learning_rate_is_identity(tiny_params, tiny_arch, moons_pair, base_method):
    src, tgt = moons_pair
    opt = SgdState.fresh(tiny_params, 0.0, 0.9)
    new_params, _ = da_step(base_method, tiny_params, tiny_arch, src, tgt, opt)
    np.testing.assert_array_equal(new_params.flatten(), tiny_params.flatten())


def test_plain_sgd_step_matches_backward(tiny_params, tiny_arch, moons_pair, base_method):
    src, tgt = moons_pair
    _, grad = _uda_grad(base_method, tiny_params, tiny_arch, src, tgt)
    new_params, opt = da_step(base_method, tiny_params, tiny_arch, src, tgt, SgdState.fresh(tiny_params, 0.05, 0.0))
    np.testing.assert_array_equal(new_params.flatten(), tiny_params.flatten() - 0.05 * grad)
    np.testing.assert_array_equal(opt.velocity, grad)


def test_momentum_accumulates(tiny_params, tiny_arch, moons_pair):
    grad = np.linspace(-1.0, 1.0, param_count(tiny_arch))
    opt = SgdState.fresh(tiny_params, 0.1, 0.5)
    p1, opt = opt.step(tiny_params, grad)
    p2, opt = opt.step(p1, grad)
    np.testing.assert_array_equal(opt.velocity, 0.5 * grad + grad)
    np.testing.assert_allclose(p2.flatten(), tiny_params.flatten() - 0.1 * grad - 0.1 * 1.5 * grad, rtol=1e-14)


def test_velocity_length_is_checked(tiny_params):
    opt = SgdState.fresh(tiny_params, 0.1)
    with pytest.raises(ContractViolation):
        opt.step(tiny_params, np.zeros(3))


def test_multistep_respects_frozen_groups(tiny_params, tiny_arch, moons_pair):
    src, tgt = moons_pair
    method = DaMethod(kind="mcd-multistep", lam=1.0, n_steps=4)
    result = adapt_step(method, tiny_params, tiny_arch, DaBatch(src, tgt), SgdState.fresh(tiny_params, 0.05, 0.9))
    before, after = tiny_params.flatten(), result.params.flatten()
    disc = group_mask(tiny_arch, ("D.",))
    np.testing.assert_array_equal(after[disc], before[disc])
    assert np.any(after[group_mask(tiny_arch, ("F.",))] != before[group_mask(tiny_arch, ("F.",))])
    assert np.any(after[group_mask(tiny_arch, ("C0.", "C1."))] != before[group_mask(tiny_arch, ("C0.", "C1."))])


def test_multistep_extractor_phase_leaves_heads_alone(tiny_params, tiny_arch, moons_pair):
    src, tgt = moons_pair
    lr = 0.05
    heads = group_mask(tiny_arch, ("C0.", "C1."))
    # phases A and B match, only the number of extractor steps differs
    few = adapt_step(DaMethod(kind="mcd-multistep", n_steps=1), tiny_params, tiny_arch, DaBatch(src, tgt),
                     SgdState.fresh(tiny_params, lr, 0.0))
    many = adapt_step(DaMethod(kind="mcd-multistep", n_steps=4), tiny_params, tiny_arch, DaBatch(src, tgt),
                      SgdState.fresh(tiny_params, lr, 0.0))
    np.testing.assert_array_equal(few.params.flatten()[heads], many.params.flatten()[heads])
    assert np.any(few.params.flatten()[~heads] != many.params.flatten()[~heads])


def test_halved_steps_bracket_full_step(tiny_params, tiny_arch, moons_pair):
    src, tgt = moons_pair
    method = DaMethod(kind="dann", lam=0.5)
    batch = DaBatch(src, tgt)

    def run(alpha, steps):
        params = tiny_params
        for _ in range(steps):
            params = adapt_step(method, params, tiny_arch, batch, SgdState.fresh(params, alpha, 0.0)).params
        return params.flatten()

    theta0 = tiny_params.flatten()
    gaps = []
    for alpha in (1e-2, 5e-3):
        gaps.append(np.abs(run(alpha, 1) - run(alpha / 2, 2)).max())
    # one full step vs two half steps differ at second order in alpha
    assert gaps[1] < gaps[0] / 3.0
    assert np.abs(run(1e-2, 1) - theta0).max() > 10 * gaps[0]


def test_steps_keep_shapes(tiny_params, tiny_arch, moons_pair, base_method):
    src, tgt = moons_pair
    new_params, _ = da_step(base_method, tiny_params, tiny_arch, src, tgt, SgdState.fresh(tiny_params, 0.1, 0.9))
    for name, tensor in tiny_params.tensors.items():
        assert new_params[name].shape == tensor.shape


# --- ssda_step ---

def test_ssda_zero_lambda_is_joint_supervised_step(tiny_params, tiny_arch, moons_pair):
    src, tgt = moons_pair
    labeled = make_dataset(src.x[:4] + 0.3, src.y[:4], "tgt-labeled")
    new_params, _ = ssda_step(DaMethod(kind="mme", lam=0.0), tiny_params, tiny_arch, src, labeled, tgt,
                              SgdState.fresh(tiny_params, 0.1, 0.0))

    def joint(tape, nodes):
        return tape.add(supervised_loss(tape, nodes, tiny_arch, src), supervised_loss(tape, nodes, tiny_arch, labeled))

    grad = value_and_grad(tiny_params, joint).grad
    np.testing.assert_allclose(new_params.flatten(), tiny_params.flatten() - 0.1 * grad, rtol=1e-13, atol=1e-15)


def test_ssda_duplicate_batch_doubles_supervised_weight(tiny_params, tiny_arch, moons_pair):
    src, tgt = moons_pair
    method = DaMethod(kind="dann", lam=0.8)
    opt = SgdState.fresh(tiny_params, 0.1, 0.0)
    via_ssda, _ = ssda_step(method, tiny_params, tiny_arch, src, src, tgt, opt)

    def doubled(tape, nodes):
        terms = build_da_loss(tape, nodes, tiny_arch, method, DaBatch(src, tgt))
        return tape.add(terms.total, supervised_loss(tape, nodes, tiny_arch, src))

    grad = value_and_grad(tiny_params, doubled).grad
    np.testing.assert_allclose(via_ssda.flatten(), tiny_params.flatten() - 0.1 * grad, rtol=1e-13, atol=1e-15)


def test_ssda_objective_matches_finite_differences(moons_pair):
    src, tgt = moons_pair
    arch = Architecture(input_dim=2, feature_dims=[3], num_classes=2, discriminator_dims=[])
    params = init_params(arch, InitScheme(kind="xavier-normal"), 12)
    assert param_count(arch) == 21
    labeled = make_dataset(src.x[:4] * 1.1, src.y[:4], "tgt-labeled")

    def objective(tape, nodes):
        return tape.add(supervised_loss(tape, nodes, arch, src), supervised_loss(tape, nodes, arch, labeled))

    assert check_gradients_fd(objective, params) < 1e-4
