"""Hand-computed oracles for every training objective."""
import numpy as np
import pytest

import qpignn as q
from qpignn import diffkit as dk
from qpignn.diffkit import ParamStore, Tape, backward, finite_diff_check
from qpignn.errors import ContractError, ParameterError
from qpignn.losses import (LossConfig, empirical_coverage, mse_loss,
                           pinball_loss, qpi_total_loss, rqr_adj_loss,
                           rqr_w_loss, sqr_loss, violation_loss, width_loss)
from qpignn.model import IntervalSet, ModelConfig, init_model
from qpignn.rng import keyed_rng


def _iv(low, up, tape=None):
    tape = tape or Tape()
    return IntervalSet(tape.leaf(np.asarray(low, float).reshape(-1, 1)),
                       tape.leaf(np.asarray(up, float).reshape(-1, 1))), tape


ALL = np.ones(4, dtype=bool)


def test_empirical_coverage_closed_interval():
    iv, _ = _iv([0, 0, 0, 0], [1, 1, 1, 1])
    y = np.array([0.0, 1.0, 0.5, 1.5])  # both endpoints count as covered
    assert empirical_coverage(iv, y, ALL) == 0.75


def test_violation_loss_oracle():
    iv, tape = _iv([0, 0, 0, 0], [1, 1, 1, 1])
    y = np.array([-0.5, 2.0, 0.5, 1.0])
    # distances to the nearest bound: 0.5 below, 1.0 above, 0, 0
    loss = violation_loss(iv, y, ALL)
    assert loss.item() == pytest.approx((0.5 + 1.0) / 4, abs=1e-12)
    backward(tape, loss)
    # gradient pushes the violated low bound down and up bound up
    np.testing.assert_allclose(iv.low.grad.ravel(), [0.25, 0, 0, 0])
    np.testing.assert_allclose(iv.up.grad.ravel(), [0, -0.25, 0, 0])


def test_violation_is_zero_when_covered():
    iv, _ = _iv([-1, -1], [1, 1])
    assert violation_loss(iv, np.array([0.0, 0.5]),
                          np.ones(2, bool)).item() == 0.0


def test_width_loss_l1_l2():
    iv, _ = _iv([0, 0, 0, 0], [1, 2, 3, 4])
    assert width_loss(iv, ALL, "l1").item() == pytest.approx(2.5)
    assert width_loss(iv, ALL, "l2").item() == pytest.approx((1 + 4 + 9 + 16) / 4)
    with pytest.raises(ParameterError):
        width_loss(iv, ALL, "l3")


def test_qpi_total_decomposition():
    iv, _ = _iv([0, 0, 0, 0], [1, 1, 1, 1])
    y = np.array([-0.5, 2.0, 0.5, 1.0])
    cfg = LossConfig(alpha=0.1, lambda_width=0.3)
    br = qpi_total_loss(iv, y, ALL, cfg)
    assert br.empirical_coverage == 0.5
    assert br.coverage_term == pytest.approx((0.5 - 0.9) ** 2)
    assert br.violation_term == pytest.approx(0.375)
    assert br.width_term == pytest.approx(1.0)
    assert br.total == pytest.approx(br.coverage_term + br.violation_term
                                     + 0.3 * br.width_term)
    assert br.node.item() == pytest.approx(br.total)


def test_hard_coverage_term_is_stop_gradient():
    """With full coverage and zero violation, the only gradient source is
    the width penalty: exactly lambda/n on each bound."""
    y = np.array([0.0, 0.0, 0.0, 0.0])
    iv, tape = _iv([-1, -1, -1, -1], [1, 1, 1, 1])
    cfg = LossConfig(alpha=0.1, lambda_width=0.4)
    br = qpi_total_loss(iv, y, ALL, cfg)
    assert br.coverage_term == pytest.approx((1.0 - 0.9) ** 2)
    backward(tape, br.node)
    np.testing.assert_allclose(iv.up.grad.ravel(), 0.4 / 4)
    np.testing.assert_allclose(iv.low.grad.ravel(), -0.4 / 4)


def test_smooth_coverage_routes_gradient():
    y = np.array([0.0, 0.0, 0.0, 0.0])
    cfg = LossConfig(alpha=0.1, lambda_width=0.0, smooth_coverage=True)
    iv, tape = _iv([-1, -1, -1, -1], [1, 1, 1, 1])
    br = qpi_total_loss(iv, y, ALL, cfg)
    backward(tape, br.node)
    # the logistic surrogate passes gradient even with zero violation
    assert np.abs(iv.up.grad).sum() > 0


def test_pinball_oracle():
    tape = Tape()
    yhat = tape.leaf(np.array([[1.0], [1.0]]))
    y = np.array([2.0, 0.0])
    # tau=0.9: (0.9-0)*(2-1) + (0.9-1)*(0-1) = 0.9 + 0.1 -> mean 0.5
    loss = pinball_loss(y, yhat, 0.9)
    assert loss.item() == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        pinball_loss(y, yhat, 1.0)
    with pytest.raises(ContractError):
        pinball_loss(np.zeros(3), yhat, 0.5)


def test_pinball_per_row_tau():
    tape = Tape()
    yhat = tape.leaf(np.array([[0.0], [0.0]]))
    y = np.array([1.0, 1.0])
    loss = pinball_loss(y, yhat, np.array([0.1, 0.9]))
    assert loss.item() == pytest.approx((0.1 * 1 + 0.9 * 1) / 2)


def test_mse_oracle():
    tape = Tape()
    yhat = tape.leaf(np.array([[1.0], [3.0], [0.0]]))
    y = np.array([0.0, 1.0, 0.0])
    mask = np.array([1, 1, 0], bool)
    assert mse_loss(yhat, y, mask).item() == pytest.approx((1 + 4) / 2)


def test_rqr_w_oracle():
    tape = Tape()
    low = tape.leaf(np.array([[0.0]]))
    up = tape.leaf(np.array([[2.0]]))
    y = np.array([1.0])
    alpha, lam = 0.1, 0.5
    # covered: coeff = alpha + 2 lam - 1 = 0.1; product (y-low)(y-up) = -1
    # penalty (lam/2) w^2 = 0.25 * 4 = 1  -> total = -0.1 + 1
    loss = rqr_w_loss(low, up, y, np.ones(1, bool), alpha, lam)
    assert loss.item() == pytest.approx(0.9)


def test_rqr_adj_penalises_crossing():
    y = np.array([0.0])
    mask = np.ones(1, bool)
    tape = Tape()
    low = tape.leaf(np.array([[1.0]]))
    up = tape.leaf(np.array([[-1.0]]))  # crossed by 2
    base = rqr_w_loss(low, up, y, mask, 0.1, 1.0).item()
    for gamma in (0.0, 1.0, 2.5):
        t2 = Tape()
        l2, u2 = t2.leaf(np.array([[1.0]])), t2.leaf(np.array([[-1.0]]))
        adj = rqr_adj_loss(l2, u2, y, mask, 0.1, 1.0, gamma).item()
        assert adj == pytest.approx(base + gamma * 2.0)


def test_sqr_loss_contract(small_ds):
    dual = init_model(ModelConfig(in_dim=small_ds.feat_dim, hidden=8,
                                  variant="dual"), 0)
    with pytest.raises(ContractError):
        sqr_loss(dual, small_ds, small_ds.train_mask, seed=0)
    model = init_model(ModelConfig(in_dim=small_ds.feat_dim, hidden=8,
                                   variant="sqr"), 0)
    a = sqr_loss(model, small_ds, small_ds.train_mask, seed=3,
                 train_mode=False)
    b = sqr_loss(model, small_ds, small_ds.train_mask, seed=3,
                 train_mode=False)
    c = sqr_loss(model, small_ds, small_ds.train_mask, seed=4,
                 train_mode=False)
    assert a.item() == b.item()          # same tau draw per seed
    assert a.item() != c.item()


def test_loss_config_validation():
    with pytest.raises(ParameterError):
        LossConfig(alpha=0.0)
    with pytest.raises(ParameterError):
        LossConfig(lambda_width=-0.1)
    with pytest.raises(ParameterError):
        LossConfig(width_norm="l3")


def test_masked_only_evaluation():
    iv, _ = _iv([0, 0, 0, 0], [1, 1, 1, 1])
    y = np.array([0.5, 99.0, 0.5, 0.5])  # node 1 wildly uncovered
    mask = np.array([1, 0, 1, 1], bool)
    assert empirical_coverage(iv, y, mask) == 1.0
    assert violation_loss(iv, y, mask).item() == 0.0
    with pytest.raises(ContractError):
        empirical_coverage(iv, y, np.zeros(4, bool))


def test_qpi_gradient_matches_finite_differences(tiny_ds):
    """End-to-end joint loss through the dual model on six nodes."""
    model = init_model(ModelConfig(in_dim=3, hidden=4, variant="dual"), 1)
    rng = keyed_rng(1, "loss-jitter")
    for name in model.params.names():
        v = model.params.value(name)
        v += rng.uniform(-0.3, 0.3, size=v.shape)
    cfg = LossConfig(alpha=0.1, lambda_width=0.5)

    def f(params):
        tape = Tape()
        iv = q.forward_intervals(model, tiny_ds.graph, tiny_ds.features,
                                 tape=tape)
        return qpi_total_loss(iv, tiny_ds.targets, tiny_ds.train_mask,
                              cfg).node

    assert finite_diff_check(f, model.params) < 1e-4
