"""Per-joint constant-acceleration Kalman filter.

Produces the smoothed position/velocity/acceleration regressors from
position-only measurements.  State is [q, qdot, qddot] with white-jerk
process noise; the measurement update uses the Joseph form so the
covariance stays symmetric positive semidefinite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KinematicKalman",
    "KalmanTuning",
    "KalmanBank",
    "kf_predict",
    "kf_update",
    "jerk_process_noise",
]

_H = np.array([[1.0, 0.0, 0.0]])


def jerk_process_noise(dt: float, jerk_psd: float) -> np.ndarray:
    """Discretized white-jerk covariance for the [q, qd, qdd] state."""
    return jerk_psd * np.array(
        [
            [dt**5 / 20.0, dt**4 / 8.0, dt**3 / 6.0],
            [dt**4 / 8.0, dt**3 / 3.0, dt**2 / 2.0],
            [dt**3 / 6.0, dt**2 / 2.0, dt],
        ]
    )


@dataclass
class KinematicKalman:
    """One joint's filter state and tuning."""

    jerk_psd: float
    meas_var: float
    x: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cov: np.ndarray = field(default_factory=lambda: np.diag([1.0, 10.0, 100.0]))

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.jerk_psd < 0 or self.meas_var <= 0:
            raise ValueError("jerk_psd must be >= 0 and meas_var > 0")

    @property
    def q(self) -> float:
        return self.x[0]

    @property
    def qdot(self) -> float:
        return self.x[1]

    @property
    def qddot(self) -> float:
        return self.x[2]


def kf_predict(state: KinematicKalman, dt: float) -> KinematicKalman:
    """Propagate by the constant-acceleration transition; dt = 0 is a no-op."""
    if dt == 0.0:
        return state
    f = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    x = f @ state.x
    cov = f @ state.cov @ f.T + jerk_process_noise(dt, state.jerk_psd)
    return KinematicKalman(state.jerk_psd, state.meas_var, x, cov)


def kf_update(state: KinematicKalman, q_meas: float) -> KinematicKalman:
    """Position-only measurement update in Joseph form."""
    innov = q_meas - state.x[0]
    s = state.cov[0, 0] + state.meas_var
    gain = state.cov[:, 0] / s
    x = state.x + gain * innov
    ikh = np.eye(3) - np.outer(gain, _H[0])
    cov = ikh @ state.cov @ ikh.T + np.outer(gain, gain) * state.meas_var
    cov = 0.5 * (cov + cov.T)
    return KinematicKalman(state.jerk_psd, state.meas_var, x, cov)


@dataclass(frozen=True)
class KalmanTuning:
    """Filter tuning shared by all joints of a run."""

    jerk_psd: float = 5e3
    meas_var: float = 1e-8


class KalmanBank:
    """All joints filtered at once with a precomputed transition; the math is
    the same as kf_predict/kf_update applied per joint (see the consistency
    test), batched for the 1 kHz loop."""

    def __init__(self, n_joints: int, tuning: KalmanTuning, dt: float,
                 q0=None, qd0=None, cov0=None):
        self.n = n_joints
        self.tuning = tuning
        self.f = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
        self.qmat = jerk_process_noise(dt, tuning.jerk_psd)
        self.x = np.zeros((n_joints, 3))
        if q0 is not None:
            self.x[:, 0] = q0
        if qd0 is not None:
            self.x[:, 1] = qd0
        init_cov = np.diag([1.0, 10.0, 100.0]) if cov0 is None else np.asarray(cov0)
        self.cov = np.broadcast_to(init_cov, (n_joints, 3, 3)).copy()

    def step(self, y: np.ndarray):
        """Predict by one dt then fuse the position measurements y (length n)."""
        x = self.x @ self.f.T
        cov = np.einsum("ab,nbc,dc->nad", self.f, self.cov, self.f) + self.qmat

        innov = y - x[:, 0]
        s = cov[:, 0, 0] + self.tuning.meas_var
        gain = cov[:, :, 0] / s[:, None]
        x = x + gain * innov[:, None]
        ikh = np.eye(3)[None, :, :] - gain[:, :, None] * _H[None, 0, :]
        cov = np.einsum("nab,nbc,ndc->nad", ikh, cov, ikh) + (
            gain[:, :, None] * gain[:, None, :] * self.tuning.meas_var
        )
        self.x = x
        self.cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
        return x[:, 0].copy(), x[:, 1].copy(), x[:, 2].copy()
