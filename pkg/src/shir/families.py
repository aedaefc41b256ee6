"""Loss families and their empirical loss, gradient and Hessian.

Two families are supported: squared error for linear regression and the
logistic log-loss for binary regression with {0,1} responses.  All losses
are averaged over observations, so the Hessian of the empirical loss is on
the per-observation information scale.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import ContractViolation, DataError, NumericOverflowError


class LossFamily(str, enum.Enum):
    SQUARED = "squared-error"
    LOGISTIC = "logistic"


def as_family(family) -> LossFamily:
    if isinstance(family, LossFamily):
        return family
    try:
        return LossFamily(family)
    except ValueError:
        aliases = {"linear": LossFamily.SQUARED, "gaussian": LossFamily.SQUARED,
                   "binomial": LossFamily.LOGISTIC}
        if family in aliases:
            return aliases[family]
        raise ContractViolation(f"unknown loss family: {family!r}")


def _sigmoid(a):
    # stable on both tails: exp is only ever taken of a non-positive argument
    out = np.empty_like(a, dtype=float)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def loss_values(a, y, family) -> np.ndarray:
    """Per-observation loss f(a, y) at linear predictor a."""
    family = as_family(family)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    if family is LossFamily.SQUARED:
        return (y - a) ** 2
    # log(1 + exp(a)) computed as max(a, 0) + log1p(exp(-|a|))
    return -y * a + np.logaddexp(0.0, a)


def loss_d1(a, y, family) -> np.ndarray:
    """First derivative of f in its first argument."""
    family = as_family(family)
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    if family is LossFamily.SQUARED:
        return -2.0 * (y - a)
    return _sigmoid(a) - y


def loss_d2(a, y=None, family=LossFamily.SQUARED) -> np.ndarray:
    """Second derivative of f in its first argument (y does not enter)."""
    family = as_family(family)
    a = np.asarray(a, dtype=float)
    if family is LossFamily.SQUARED:
        return np.full_like(a, 2.0)
    s = _sigmoid(a)
    return s * (1.0 - s)


def validate_response(y, family) -> None:
    family = as_family(family)
    y = np.asarray(y)
    if family is LossFamily.LOGISTIC and not np.isin(y, (0.0, 1.0)).all():
        bad = int(np.flatnonzero(~np.isin(y, (0.0, 1.0)))[0])
        raise DataError(f"logistic responses must be coded 0/1; offending index {bad}")


def _check_dims(data, beta):
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or beta.shape[0] != data.X.shape[1]:
        raise ContractViolation(
            f"beta has shape {beta.shape}, design has {data.X.shape[1]} columns")
    return beta


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        idx = int(np.flatnonzero(~np.isfinite(values))[0])
        raise NumericOverflowError(f"non-finite {what} at index {idx}", index=idx)


def empirical_loss(data, beta, family) -> float:
    """Average loss n^-1 sum_i f(beta'X_i, Y_i)."""
    beta = _check_dims(data, beta)
    validate_response(data.Y, family)
    a = data.X @ beta
    _check_finite(a, "linear predictor")
    vals = loss_values(a, data.Y, family)
    _check_finite(vals, "loss value")
    return float(vals.mean())


def gradient(data, beta, family) -> np.ndarray:
    """Gradient n^-1 sum_i f'(beta'X_i, Y_i) X_i."""
    beta = _check_dims(data, beta)
    validate_response(data.Y, family)
    a = data.X @ beta
    _check_finite(a, "linear predictor")
    d1 = loss_d1(a, data.Y, family)
    _check_finite(d1, "loss derivative")
    return (data.X.T @ d1) / data.n


def hessian(data, beta, family) -> np.ndarray:
    """Hessian n^-1 sum_i f''(beta'X_i) X_i X_i'; exactly symmetric."""
    beta = _check_dims(data, beta)
    a = data.X @ beta
    _check_finite(a, "linear predictor")
    d2 = loss_d2(a, data.Y, family)
    H = (data.X.T * d2) @ data.X / data.n
    # store the upper triangle and mirror so symmetry holds bitwise
    return symmetrize_upper(H)


def symmetrize_upper(H) -> np.ndarray:
    """Mirror the upper triangle onto the lower one (bitwise symmetry)."""
    U = np.triu(H)
    return U + np.triu(H, 1).T
