"""Interval and baseline training objectives.

The joint interval loss decomposes as

    total = (coverage_hat - (1 - alpha))^2 + violation + lambda * width

where coverage_hat counts closed-interval hits, the violation term
averages the distance of uncovered targets to the nearest bound, and the
width term averages (up - low) (or its square under the L2 norm option).

Indicator functions are evaluated on raw values and re-enter the graph
as constant coefficients: the coverage-squared term contributes no
gradient (unless the logistic surrogate is switched on) and the
violation term differentiates only through the distance magnitudes.
All losses are evaluated on the caller-supplied node mask only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffkit as dk
from .diffkit import Tensor, constant
from .errors import ContractError, ParameterError
from .graphcore import Dataset
from .model import IntervalSet, Model, sqr_forward
from .rng import keyed_rng

# Temperature of the optional logistic coverage surrogate.
SMOOTH_COVERAGE_TEMPERATURE = 0.1


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    lambda_width: float = 0.05
    width_norm: str = "l1"
    smooth_coverage: bool = False
    rqr_lambda: float = 1.0
    gamma_order: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError("alpha must lie in (0, 1)")
        if self.lambda_width < 0 or self.rqr_lambda < 0 or self.gamma_order < 0:
            raise ParameterError("penalty coefficients must be non-negative")
        if self.width_norm not in ("l1", "l2"):
            raise ParameterError("width_norm must be 'l1' or 'l2'")


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Scalar summary of one joint-loss evaluation.

    ``node`` is the tape-connected total for backward; the float fields
    satisfy total == coverage_term + violation_term + lambda * width_term.
    """

    total: float
    coverage_term: float
    violation_term: float
    width_term: float
    empirical_coverage: float
    node: Tensor = field(repr=False)


def _masked(iv: IntervalSet, y: np.ndarray, mask: np.ndarray):
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (len(iv),):
        raise ContractError("mask length must match the interval set")
    if not mask.any():
        raise ContractError("mask selects no nodes")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (len(iv),):
        raise ContractError("targets must have one entry per node")
    low = dk.masked_select(iv.low, mask)
    up = dk.masked_select(iv.up, mask)
    return low, up, y[mask].reshape(-1, 1)


def empirical_coverage(iv: IntervalSet, y: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked targets inside their closed interval."""
    low, up, ym = _masked(iv, y, mask)
    covered = (low.value <= ym) & (ym <= up.value)
    return float(covered.mean())


def violation_loss(iv: IntervalSet, y: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean distance of uncovered targets to their nearest bound.

    Zero exactly when every masked target is covered.  The below/above
    indicators are constants; gradient reaches the bounds through the
    distances, pushing a violated bound toward its target.
    """
    low, up, ym = _masked(iv, y, mask)
    below = (ym < low.value).astype(np.float64)
    above = (ym > up.value).astype(np.float64)
    yc = constant(ym)
    under = dk.scale(dk.sub(low, yc), below)   # (low - y) where y < low
    over = dk.scale(dk.sub(yc, up), above)     # (y - up) where y > up
    return dk.reduce_mean(dk.add(under, over))


def width_loss(iv: IntervalSet, mask: np.ndarray, width_norm: str = "l1") -> Tensor:
    """Mean interval width (L1) or mean squared width (L2) on the mask."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ContractError("mask selects no nodes")
    w = dk.sub(dk.masked_select(iv.up, mask), dk.masked_select(iv.low, mask))
    if width_norm == "l2":
        w = dk.mul(w, w)
    elif width_norm != "l1":
        raise ParameterError("width_norm must be 'l1' or 'l2'")
    return dk.reduce_mean(w)


def qpi_total_loss(iv: IntervalSet, y: np.ndarray, mask: np.ndarray,
                   cfg: LossConfig) -> LossBreakdown:
    """Joint coverage/violation/width objective on the masked nodes."""
    low, up, ym = _masked(iv, y, mask)
    covered = (low.value <= ym) & (ym <= up.value)
    c_hat = float(covered.mean())
    target = 1.0 - cfg.alpha

    viol = violation_loss(iv, y, mask)
    width = width_loss(iv, mask, cfg.width_norm)
    partial = dk.add(viol, dk.scale(width, cfg.lambda_width))

    if cfg.smooth_coverage:
        # Logistic surrogate: product of two sigmoids per node peaks at 1
        # inside the interval and lets the squared term pass gradient.
        inv_t = 1.0 / SMOOTH_COVERAGE_TEMPERATURE
        yc = constant(ym)
        inside = dk.mul(dk.sigmoid(dk.scale(dk.sub(yc, low), inv_t)),
                        dk.sigmoid(dk.scale(dk.sub(up, yc), inv_t)))
        miss = dk.add_scalar(dk.reduce_mean(inside), -target)
        cov_term = dk.mul(miss, miss)
        node = dk.add(cov_term, partial)
        coverage_value = cov_term.item()
    else:
        # Hard count: enters the total as a constant, no gradient.
        coverage_value = (c_hat - target) ** 2
        node = dk.add_scalar(partial, coverage_value)

    return LossBreakdown(
        total=node.item(),
        coverage_term=coverage_value,
        violation_term=viol.item(),
        width_term=width.item(),
        empirical_coverage=c_hat,
        node=node,
    )


# ---------------------------------------------------------------------------
# Baseline objectives
# ---------------------------------------------------------------------------

def pinball_loss(y: np.ndarray, yhat: Tensor, tau) -> Tensor:
    """Mean of (tau - 1[y < yhat]) * (y - yhat).

    ``tau`` may be a scalar or one level per row of ``yhat``.
    """
    ym = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if ym.shape != yhat.shape:
        raise ContractError("y must match yhat row for row")
    tau_arr = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    if tau_arr.size == 1:
        tau_arr = np.full_like(ym, float(tau_arr[0, 0]))
    if tau_arr.shape != ym.shape:
        raise ContractError("tau must be scalar or one value per row")
    if np.any((tau_arr <= 0.0) | (tau_arr >= 1.0)):
        raise ParameterError("tau values must lie strictly inside (0, 1)")
    coeff = tau_arr - (ym < yhat.value)      # indicator is stop-gradient
    return dk.reduce_mean(dk.scale(dk.sub(constant(ym), yhat), coeff))


def sqr_loss(model: Model, dataset: Dataset, mask: np.ndarray,
             seed: int, train_mode: bool = True) -> Tensor:
    """Simultaneous-quantile objective: one fresh tau per node per call.

    Builds its own tape (reachable as ``loss.tape``); gradients land in
    the model's parameter store after ``backward``.
    """
    if model.config.variant != "sqr":
        raise ContractError("sqr_loss needs an sqr-variant model")
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ContractError("mask selects no nodes")
    n = dataset.num_nodes
    # Draws are clipped away from the open-interval endpoints.
    tau = keyed_rng(seed, "sqr-tau").uniform(1e-6, 1.0 - 1e-6, size=n)
    tape = dk.Tape()
    params = model.params.leaves(tape)
    yhat = sqr_forward(dataset.graph, dataset.features, tau, params,
                       model.config.dropout_p, train_mode, seed)
    yhat_m = dk.masked_select(yhat, mask)
    return pinball_loss(dataset.targets[mask], yhat_m, tau[mask])


def rqr_w_loss(low: Tensor, up: Tensor, y: np.ndarray, mask: np.ndarray,
               alpha: float, lam: float) -> Tensor:
    """Interval-regression objective on raw (low, up) pairs.

    Mean of (alpha + 2 lam - 1[low <= y <= up]) (y - low) (y - up)
    plus (lam / 2) (up - low)^2; the coverage indicator is constant.
    """
    iv = IntervalSet(low, up)
    low_m, up_m, ym = _masked(iv, y, mask)
    covered = ((low_m.value <= ym) & (ym <= up_m.value)).astype(np.float64)
    coeff = alpha + 2.0 * lam - covered
    yc = constant(ym)
    product = dk.mul(dk.sub(yc, low_m), dk.sub(yc, up_m))
    w = dk.sub(up_m, low_m)
    penalty = dk.scale(dk.mul(w, w), lam / 2.0)
    return dk.reduce_mean(dk.add(dk.scale(product, coeff), penalty))


def rqr_adj_loss(low: Tensor, up: Tensor, y: np.ndarray, mask: np.ndarray,
                 alpha: float, lam: float, gamma_order: float) -> Tensor:
    """rqr_w plus gamma * mean relu(low - up), penalising crossed bounds."""
    base = rqr_w_loss(low, up, y, mask, alpha, lam)
    mask_arr = np.asarray(mask).astype(bool)
    crossing = dk.reduce_mean(dk.relu(dk.sub(dk.masked_select(low, mask_arr),
                                             dk.masked_select(up, mask_arr))))
    return dk.add(base, dk.scale(crossing, gamma_order))


def mse_loss(yhat: Tensor, y: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error of the point prediction on the mask."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ContractError("mask selects no nodes")
    ym = np.asarray(y, dtype=np.float64).reshape(-1)[mask].reshape(-1, 1)
    diff = dk.sub(dk.masked_select(yhat, mask), constant(ym))
    return dk.reduce_mean(dk.mul(diff, diff))
