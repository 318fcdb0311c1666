"""Platt sigmoid calibration of boosted scores."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MAX_ITER = 200
GRAD_TOL = 1e-10
# Levenberg term keeping the Hessian invertible when scores are constant
HESSIAN_RIDGE = 1e-12


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationParams:
    A: float
    B: float


@dataclass(frozen=True)
class CalibrationTargets:
    targets: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def n(self) -> int:
        return self.n_pos + self.n_neg


def platt_targets(labels) -> CalibrationTargets:
    y = np.asarray(labels)
    n_pos = int(np.sum(y > 0))
    n_neg = int(np.sum(y <= 0))
    t = np.where(y > 0, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))
    return CalibrationTargets(t, n_pos, n_neg)


def platt_objective(A: float, B: float, scores, targets) -> float:
    """sum[(t - 1)(A s + B) + log(1 + exp(A s + B))], overflow safe."""
    f = A * np.asarray(scores, dtype=np.float64) + B
    return float(np.sum((np.asarray(targets) - 1) * f + np.logaddexp(0.0, f)))


def fit_platt(scores, labels) -> CalibrationParams:
    """Damped Newton with backtracking on the regularized Platt likelihood."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if len(s) != len(y):
        raise CalibrationError("scores and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise CalibrationError("non-finite scores")
    tg = platt_targets(y)
    if tg.n_pos == 0 or tg.n_neg == 0:
        raise CalibrationError("calibration needs both positive and negative samples")
    t = tg.targets
    A, B = 0.0, float(np.log((tg.n_neg + 1) / (tg.n_pos + 1)))
    obj = platt_objective(A, B, s, t)
    for it in range(MAX_ITER):
        f = A * s + B
        # 1 - g = sigmoid(f), computed stably
        q = np.exp(-np.logaddexp(0.0, -f))
        d1 = t - 1 + q
        grad = np.array([np.dot(d1, s), d1.sum()])
        if np.max(np.abs(grad)) < GRAD_TOL:
            break
        d2 = q * (1 - q)
        H = np.array([[np.dot(d2, s * s), np.dot(d2, s)], [np.dot(d2, s), d2.sum()]])
        H += HESSIAN_RIDGE * np.eye(2)
        step = np.linalg.solve(H, grad)
        lam = 1.0
        while lam >= 1e-10:
            nA, nB = A - lam * step[0], B - lam * step[1]
            nobj = platt_objective(nA, nB, s, t)
            if nobj <= obj - 1e-4 * lam * float(grad @ step) and nobj < obj:
                break
            lam *= 0.5
        else:
            log.debug("fit_platt: line search stalled at iteration %d", it)
            break
        A, B, obj = nA, nB, nobj
    if A >= 0:
        log.warning("fit_platt: A = %.6g >= 0, calibrated score does not increase with raw score", A)
    return CalibrationParams(float(A), float(B))


def calibrate_score(p: CalibrationParams, s):
    """g = 1 / (1 + exp(A s + B)), evaluated without overflow."""
    f = p.A * np.asarray(s, dtype=np.float64) + p.B
    g = np.exp(-np.logaddexp(0.0, f))
    return float(g) if np.ndim(g) == 0 else g
