"""Interval-quality metrics and their CSV serialisation.

All metrics are computed over an evaluation mask.  Coverage uses the
closed interval, identical to the training-side empirical coverage
(same implementation, re-exported here as ``picp``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError
from .losses import empirical_coverage
from .model import IntervalSet

# CWC shape constants: penalty weight, steepness, and the coverage level
# at which the exponential penalty is centred (mu = 1 - alpha).
CWC_GAMMA = 1.0
CWC_ETA = 10.0


@dataclass(frozen=True)
class MetricsReport:
    picp: float
    mpiw: float
    nmpiw: float
    mpe: float
    sharpness: float
    winkler: float
    cwc: float
    n_eval: int
    alpha: float


def _masked(iv: IntervalSet, y: np.ndarray | None, mask: np.ndarray):
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (len(iv),):
        raise ContractError("mask length must match the interval set")
    if not mask.any():
        raise ContractError("mask selects no nodes")
    low = iv.low_values[mask]
    up = iv.up_values[mask]
    if y is None:
        return low, up, None
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (len(iv),):
        raise ContractError("targets must have one entry per node")
    return low, up, y[mask]


def picp(iv: IntervalSet, y: np.ndarray, mask: np.ndarray) -> float:
    """Prediction-interval coverage probability (closed interval)."""
    return empirical_coverage(iv, y, mask)


def mpiw(iv: IntervalSet, mask: np.ndarray) -> float:
    """Mean prediction-interval width."""
    low, up, _ = _masked(iv, None, mask)
    return float(np.mean(up - low))


def nmpiw(iv: IntervalSet, y: np.ndarray, mask: np.ndarray) -> float:
    """MPIW normalised by the target range over the same mask."""
    low, up, ym = _masked(iv, y, mask)
    span = float(ym.max() - ym.min())
    if span <= 0.0:
        raise ParameterError("nmpiw undefined: targets are constant on the mask")
    return float(np.mean(up - low) / span)


def mpe(iv: IntervalSet, y: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error of the interval centre."""
    low, up, ym = _masked(iv, y, mask)
    return float(np.mean(np.abs(0.5 * (low + up) - ym)))


def sharpness(iv: IntervalSet, mask: np.ndarray) -> float:
    """Mean squared width; punishes occasional very wide intervals."""
    low, up, _ = _masked(iv, None, mask)
    return float(np.mean((up - low) ** 2))


def winkler(iv: IntervalSet, y: np.ndarray, mask: np.ndarray,
            alpha: float) -> float:
    """Winkler score: width plus (2 / alpha) times the overshoot."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must lie in (0, 1)")
    low, up, ym = _masked(iv, y, mask)
    overshoot = np.maximum(0.0, np.maximum(low - ym, ym - up))
    return float(np.mean((up - low) + (2.0 / alpha) * overshoot))


def cwc(nmpiw_value: float, picp_value: float, alpha: float) -> float:
    """Coverage-width criterion.

    nmpiw * (1 + gamma * exp(-eta * (picp - mu))) with mu = 1 - alpha:
    equal to nmpiw at exactly nominal coverage, exploding exponentially
    as coverage falls below it.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError("alpha must lie in (0, 1)")
    mu = 1.0 - alpha
    return float(nmpiw_value * (1.0 + CWC_GAMMA * np.exp(-CWC_ETA * (picp_value - mu))))


def report(iv: IntervalSet, y: np.ndarray, mask: np.ndarray,
           alpha: float) -> MetricsReport:
    """All seven metrics on one mask."""
    mask = np.asarray(mask).astype(bool)
    picp_value = picp(iv, y, mask)
    nmpiw_value = nmpiw(iv, y, mask)
    return MetricsReport(
        picp=picp_value,
        mpiw=mpiw(iv, mask),
        nmpiw=nmpiw_value,
        mpe=mpe(iv, y, mask),
        sharpness=sharpness(iv, mask),
        winkler=winkler(iv, y, mask, alpha),
        cwc=cwc(nmpiw_value, picp_value, alpha),
        n_eval=int(mask.sum()),
        alpha=alpha,
    )


CSV_FIELDS = ("run_id", "dataset", "model", "lambda", "seed",
              "picp", "mpiw", "nmpiw", "mpe", "sharpness", "winkler", "cwc")


def csv_header() -> str:
    return ",".join(CSV_FIELDS)


def csv_row(rep: MetricsReport, run_id: str, dataset: str, model: str,
            lambda_width: float, seed: int) -> str:
    values = [run_id, dataset, model, repr(float(lambda_width)), str(int(seed))]
    values += [repr(getattr(rep, name))
               for name in ("picp", "mpiw", "nmpiw", "mpe",
                            "sharpness", "winkler", "cwc")]
    return ",".join(values)
