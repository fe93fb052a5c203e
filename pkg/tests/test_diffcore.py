from __future__ import annotations

import numpy as np
import pytest
from conftest import GRAD_TOL, gradcheck, store_gradcheck
from gradcases import COMPOSITE_CASES, OP_CASES

from coughssl import diffcore as dc
from coughssl.diffcore import OptimizerConfig, ParameterStore, Tensor
from coughssl.errors import MissingGradient, NonFiniteValue, NonScalarLoss, ShapeMismatch

SEEDS = range(20)


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(op):
    worst = 0.0
    for seed in SEEDS:
        fn, inputs = OP_CASES[op](np.random.default_rng(seed))
        worst = max(worst, gradcheck(fn, inputs, seed))
    assert worst <= GRAD_TOL, f"{op}: relative error {worst:.2e}"


@pytest.mark.parametrize("case", sorted(COMPOSITE_CASES))
def test_composite_gradients_match_finite_differences(case):
    worst = 0.0
    for seed in SEEDS:
        loss_fn, store = COMPOSITE_CASES[case](np.random.default_rng(1000 + seed))
        worst = max(worst, store_gradcheck(loss_fn, store, seed))
    assert worst <= GRAD_TOL, f"{case}: relative error {worst:.2e}"


def test_scalar_chain_rule_closed_form():
    x = Tensor(2.0, requires_grad=True, dtype=np.float64)
    y = dc.exp(x * x)  # dy/dx = 2x exp(x^2)
    dc.backward(y)
    assert x.grad == pytest.approx(4.0 * np.exp(4.0), rel=1e-12)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1
    dc.backward(y.sum())
    np.testing.assert_allclose(x.grad, [3.0, -3.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        dc.backward(x * 2.0)


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteValue):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteValue):
        dc.log(Tensor(np.array([0.0, 1.0])))


def test_masked_fill_may_introduce_infinities_but_softmax_is_finite():
    a = Tensor(np.zeros((2, 3)), requires_grad=True)
    keep = np.array([[True, False, True], [False, False, True]])
    p = dc.softmax(dc.masked_fill(a, keep, -np.inf), axis=1)
    np.testing.assert_allclose(p.data, [[0.5, 0, 0.5], [0, 0, 1]])
    dc.backward(p[0, 0])
    assert np.isfinite(a.grad).all()


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with dc.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert dc.is_grad_enabled()


def test_dropout_identity_outside_training():
    x = Tensor(np.arange(6.0))
    assert dc.dropout(x, 0.5, train=False) is x
    out = dc.dropout(x, 0.5, train=True, rng=np.random.default_rng(0))
    kept = out.data != 0
    np.testing.assert_allclose(out.data[kept], 2 * x.data[kept])


def test_bce_matches_reference_formula():
    z = np.array([-3.0, 0.2, 4.0])
    y = np.array([0.0, 1.0, 1.0])
    loss = dc.bce_with_logits(Tensor(z), y).item()
    p = 1 / (1 + np.exp(-z))
    assert loss == pytest.approx(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)), rel=1e-12)


# -- optimizer ---------------------------------------------------------------------

def _store(value):
    s = ParameterStore()
    s.add("w", Tensor(np.array(value, dtype=np.float64), requires_grad=True))
    return s


def test_adam_first_step_moves_by_lr_times_sign():
    s = _store([1.0, -1.0])
    s["w"].accumulate_grad(np.array([0.5, -3.0]))
    state = OptimizerConfig(lr=0.01).make_state()
    dc.adam_step(s, state)
    # bias-corrected first step: m_hat / sqrt(v_hat) = sign(g)
    np.testing.assert_allclose(s["w"].data, [0.99, -0.99], atol=1e-9)
    assert not s["w"].grad.any()


def test_adam_matches_reference_over_several_steps():
    rng = np.random.default_rng(4)
    s = _store(rng.standard_normal(3))
    w = s["w"].data.copy()
    m = v = np.zeros(3)
    state = OptimizerConfig(lr=0.05).make_state()
    for t in range(1, 6):
        g = rng.standard_normal(3)
        s["w"].accumulate_grad(g)
        dc.adam_step(s, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(s["w"].data, w, rtol=1e-12)


def test_adam_requires_a_gradient_for_every_param():
    s = _store([1.0])
    with pytest.raises(MissingGradient):
        dc.adam_step(s, OptimizerConfig().make_state())


def test_plateau_cuts_after_patience_and_resets():
    state = OptimizerConfig(lr=1.0, plateau_patience=2).make_state()
    assert not dc.plateau_decay(state, 1.0)
    assert not dc.plateau_decay(state, 1.0)  # bad 1
    assert not dc.plateau_decay(state, 1.0)  # bad 2
    assert dc.plateau_decay(state, 1.0)  # bad 3 > patience
    assert state.lr == pytest.approx(0.1)
    assert state.bad_epochs == 0
    assert not dc.plateau_decay(state, 0.5)  # improvement


def test_plateau_relative_threshold():
    state = OptimizerConfig(lr=1.0, plateau_patience=0).make_state()
    dc.plateau_decay(state, 1.0)
    # 1 - 5e-5 is within the 1e-4 relative threshold, so it counts as no improvement
    assert dc.plateau_decay(state, 1.0 - 5e-5)
