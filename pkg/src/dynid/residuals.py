"""Residual construction for the identification loop.

Four residual families are stacked into one weighted vector that drives the
weight updates; a first-order low-pass of that vector gates the dead zone.

* e1 -- torque prediction residual (per joint).
* e2 -- diagonal skew-symmetry defect of (dM_hat/dt - 2 C_hat).
* e3 -- off-diagonal skew-symmetry defect, one entry per unordered pair
  (i, n) with i < n in lexicographic order (the pair-index contract).
* e4 -- characteristic-polynomial defect |det(M_hat - lambda_n I)| with
  lambda_n the n-th eigenvalue of sym(M_hat) scaled by exp(lambda0 / t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .networks import TermsEstimate

__all__ = [
    "LagrangianWeights",
    "ResidualStack",
    "ResidualError",
    "torque_residual",
    "skew_diag_residual",
    "skew_offdiag_residual",
    "offdiag_pairs",
    "inertia_eigen_residual",
    "stack_weighted",
    "stacked_length",
    "filtered_residual_step",
]


class ResidualError(ValueError):
    pass


@dataclass(frozen=True)
class LagrangianWeights:
    """Constraint weights; each must exceed 1 so constraints never vanish
    from the stacked residual."""

    lambda1: float
    lambda2: float
    lambda3: float

    def violations(self):
        return [
            f"lambda{i} = {v:g} must be > 1"
            for i, v in enumerate((self.lambda1, self.lambda2, self.lambda3), start=1)
            if not v > 1.0
        ]


@dataclass
class ResidualStack:
    """All residual blocks at one step plus the stacked/filtered vectors."""

    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    e4: np.ndarray
    stacked: np.ndarray
    filtered: np.ndarray


def stacked_length(dof: int) -> int:
    return 3 * dof + (dof * dof - dof) // 2


def torque_residual(tau: np.ndarray, est: TermsEstimate, qddot: np.ndarray) -> np.ndarray:
    """e1 = tau - M_hat qddot - C_hat qdot - G_hat."""
    return tau - est.m_hat @ qddot - est.c_hat @ est.qdot - est.g_hat


def skew_diag_residual(m_rate: np.ndarray, c_hat: np.ndarray) -> np.ndarray:
    """e2_n = (dM_hat/dt)_nn - 2 C_hat_nn."""
    return np.diag(m_rate) - 2.0 * np.diag(c_hat)


def offdiag_pairs(dof: int):
    """Lexicographic (i, n), i < n: the e3 index contract."""
    return [(i, n) for i in range(dof) for n in range(i + 1, dof)]


def skew_offdiag_residual(m_rate: np.ndarray, c_hat: np.ndarray) -> np.ndarray:
    """e3 over unordered pairs: rate_ni + rate_in - 2 (C_ni + C_in)."""
    n = m_rate.shape[0]
    sym_rate = m_rate + m_rate.T
    sym_c = c_hat + c_hat.T
    return np.array([sym_rate[i, j] - 2.0 * sym_c[i, j] for i, j in offdiag_pairs(n)])


def inertia_eigen_residual(m_hat: np.ndarray, t: float, lambda0: float, band=None):
    """e4_n = |det(M_hat - lambda_n I)| with the time-decaying eigenvalue shift.

    Returns (e4, band_penalty); the penalty records how far the eigenvalues
    of sym(M_hat) leave the plant's inertia band and never enters the
    stacked residual.
    """
    n = m_hat.shape[0]
    sym = 0.5 * (m_hat + m_hat.T)
    try:
        eigs = np.linalg.eigvalsh(sym)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eigvalsh on finite input
        raise ResidualError(f"eigendecomposition failed: {exc}") from exc
    scale = eig_time_scale(t, lambda0)
    shifted = eigs * scale
    e4 = np.abs(np.linalg.det(m_hat[None, :, :] - shifted[:, None, None] * np.eye(n)))
    if band is None:
        penalty = np.zeros(n)
    else:
        lo, hi = band
        penalty = np.maximum(0.0, lo - eigs) + np.maximum(0.0, eigs - hi)
    return e4, penalty


def eig_time_scale(t: float, lambda0: float) -> float:
    """exp(lambda0 / t); the lambda0 < 0 default makes the shift vanish at
    t -> 0 and approach the raw eigenvalues as the run progresses."""
    if t <= 0.0:
        return 0.0 if lambda0 < 0 else 1.0 if lambda0 == 0 else np.inf
    return float(np.exp(lambda0 / t))


def stack_weighted(e1, e2, e3, e4, lw: LagrangianWeights) -> np.ndarray:
    """[e1; l1 e2; l2 e3; l3 e4]."""
    return np.concatenate([e1, lw.lambda1 * e2, lw.lambda2 * e3, lw.lambda3 * e4])


def filtered_residual_step(filtered, stacked, alpha: float, dt: float) -> np.ndarray:
    """Forward-Euler step of alpha*e + de/dt = eps; steady state is eps/alpha."""
    if dt * alpha >= 2.0:
        raise ResidualError(f"dt*alpha = {dt*alpha:g} >= 2 is unstable for the filter")
    return filtered + dt * (stacked - alpha * filtered)
