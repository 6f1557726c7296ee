"""Analytic rigid-body plants: inertia/Coriolis/gravity terms, forward dynamics,
a fixed-step RK4 integrator and sinusoidal excitation references.

Two plant families are provided:

* ``two_link``  -- planar 2-DOF arm in a vertical plane (rod inertias).
* ``anthro_3dof`` -- base yaw plus shoulder/elbow with point-mass links,
  so joint 1 carries no gravity torque.

The Coriolis matrix is always built from Christoffel symbols of the first
kind, which makes ``dM/dt - 2C`` exactly skew-symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "PlantModel",
    "PlantState",
    "MotionSample",
    "ReferenceSpec",
    "PlantError",
    "IntegrationDivergence",
    "two_link_plant",
    "anthro_3dof_plant",
    "ground_truth_terms",
    "forward_dynamics",
    "integrate_step",
    "excitation_reference",
    "mechanical_energy",
    "inertia_eigen_band",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

FLOAT_FMT = "%.17g"


class PlantError(ValueError):
    """Invalid plant parameters or inputs."""


class IntegrationDivergence(RuntimeError):
    """State became non-finite during integration."""

    def __init__(self, t: float, detail: str = ""):
        super().__init__(f"non-finite state at t={t:.6f}s {detail}".rstrip())
        self.t = t


@dataclass(frozen=True)
class PlantModel:
    """Parametric serial manipulator with analytic dynamics.

    ``kind`` selects the closed-form model.  ``friction`` holds per-joint
    viscous coefficients (N·m·s/rad).  ``jacobian_fn`` is bookkeeping for a
    task-space Jacobian; nothing in the identification pipeline consumes it.
    """

    kind: str
    masses: np.ndarray
    lengths: np.ndarray
    com_offsets: np.ndarray
    inertias: np.ndarray
    gravity: float = 9.81
    friction: Optional[np.ndarray] = None
    jacobian_fn: Optional[Callable] = None

    def __post_init__(self):
        for name in ("masses", "lengths", "com_offsets", "inertias"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.kind not in ("two_link", "anthro_3dof"):
            raise PlantError(f"unknown plant kind {self.kind!r}")
        if self.dof < 1:
            raise PlantError("plant needs at least one joint")
        if np.any(self.masses <= 0) or np.any(self.lengths <= 0):
            raise PlantError("masses and lengths must be positive")
        fric = np.zeros(self.dof) if self.friction is None else np.asarray(self.friction, dtype=float)
        if fric.shape != (self.dof,) or np.any(fric < 0):
            raise PlantError("friction must be a non-negative vector of length dof")
        object.__setattr__(self, "friction", fric)

    @property
    def dof(self) -> int:
        return 2 if self.kind == "two_link" else 3

    def mass_matrix(self, q: np.ndarray) -> np.ndarray:
        if self.kind == "two_link":
            m1, m2 = self.masses
            l1 = self.lengths[0]
            lc1, lc2 = self.com_offsets
            i1, i2 = self.inertias
            c2 = np.cos(q[1])
            m11 = i1 + i2 + m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2.0 * l1 * lc2 * c2)
            m12 = i2 + m2 * (lc2**2 + l1 * lc2 * c2)
            m22 = i2 + m2 * lc2**2
            return np.array([[m11, m12], [m12, m22]])
        i1 = self.inertias[0]
        m2, m3 = self.masses[1], self.masses[2]
        el2 = self.lengths[1]
        a2, a3 = self.com_offsets[1], self.com_offsets[2]
        c2, c3 = np.cos(q[1]), np.cos(q[2])
        c23 = np.cos(q[1] + q[2])
        r3 = el2 * c2 + a3 * c23
        m11 = i1 + m2 * (a2 * c2) ** 2 + m3 * r3**2
        m22 = m2 * a2**2 + m3 * (el2**2 + a3**2 + 2.0 * el2 * a3 * c3)
        m23 = m3 * (a3**2 + el2 * a3 * c3)
        m33 = m3 * a3**2
        return np.array([[m11, 0.0, 0.0], [0.0, m22, m23], [0.0, m23, m33]])

    def mass_matrix_grad(self, q: np.ndarray) -> np.ndarray:
        """dM[k, i, j] = dM_ij/dq_k."""
        n = self.dof
        dm = np.zeros((n, n, n))
        if self.kind == "two_link":
            m2 = self.masses[1]
            l1 = self.lengths[0]
            lc2 = self.com_offsets[1]
            s2 = np.sin(q[1])
            h = m2 * l1 * lc2 * s2
            dm[1, 0, 0] = -2.0 * h
            dm[1, 0, 1] = dm[1, 1, 0] = -h
            return dm
        m2, m3 = self.masses[1], self.masses[2]
        el2 = self.lengths[1]
        a2, a3 = self.com_offsets[1], self.com_offsets[2]
        c2, s2 = np.cos(q[1]), np.sin(q[1])
        c3, s3 = np.cos(q[2]), np.sin(q[2])
        c23, s23 = np.cos(q[1] + q[2]), np.sin(q[1] + q[2])
        r3 = el2 * c2 + a3 * c23
        dm[1, 0, 0] = -2.0 * m2 * a2**2 * c2 * s2 + 2.0 * m3 * r3 * (-el2 * s2 - a3 * s23)
        dm[2, 0, 0] = 2.0 * m3 * r3 * (-a3 * s23)
        dm[2, 1, 1] = -2.0 * m3 * el2 * a3 * s3
        dm[2, 1, 2] = dm[2, 2, 1] = -m3 * el2 * a3 * s3
        return dm

    def gravity_vector(self, q: np.ndarray) -> np.ndarray:
        g = self.gravity
        if self.kind == "two_link":
            m1, m2 = self.masses
            l1 = self.lengths[0]
            lc1, lc2 = self.com_offsets
            c1, c12 = np.cos(q[0]), np.cos(q[0] + q[1])
            return np.array(
                [(m1 * lc1 + m2 * l1) * g * c1 + m2 * lc2 * g * c12, m2 * lc2 * g * c12]
            )
        m2, m3 = self.masses[1], self.masses[2]
        el2 = self.lengths[1]
        a2, a3 = self.com_offsets[1], self.com_offsets[2]
        c2, c23 = np.cos(q[1]), np.cos(q[1] + q[2])
        return np.array(
            [0.0, g * (m2 * a2 * c2 + m3 * (el2 * c2 + a3 * c23)), g * m3 * a3 * c23]
        )

    def potential_energy(self, q: np.ndarray) -> float:
        g = self.gravity
        if self.kind == "two_link":
            m1, m2 = self.masses
            l1 = self.lengths[0]
            lc1, lc2 = self.com_offsets
            return m1 * g * lc1 * np.sin(q[0]) + m2 * g * (
                l1 * np.sin(q[0]) + lc2 * np.sin(q[0] + q[1])
            )
        m2, m3 = self.masses[1], self.masses[2]
        el2 = self.lengths[1]
        a2, a3 = self.com_offsets[1], self.com_offsets[2]
        return g * (m2 * a2 * np.sin(q[1]) + m3 * (el2 * np.sin(q[1]) + a3 * np.sin(q[1] + q[2])))


@dataclass
class PlantState:
    """Joint positions/velocities at time t."""

    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise PlantError("plant state must be finite")


@dataclass
class MotionSample:
    """One timestamped regressor record: motion variables plus applied torque."""

    t: float
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    tau: np.ndarray


def two_link_plant(
    masses=(1.2, 0.8),
    lengths=(0.5, 0.4),
    com_offsets=(0.25, 0.2),
    inertias=None,
    gravity=9.81,
    friction=None,
) -> PlantModel:
    """Default vertical-plane 2-link arm; rod inertias unless given."""
    masses = np.asarray(masses, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    if inertias is None:
        inertias = masses * lengths**2 / 12.0
    return PlantModel(
        kind="two_link",
        masses=masses,
        lengths=lengths,
        com_offsets=np.asarray(com_offsets, dtype=float),
        inertias=np.asarray(inertias, dtype=float),
        gravity=gravity,
        friction=friction,
    )


def anthro_3dof_plant(
    masses=(0.9, 1.0, 0.6),
    lengths=(0.1, 0.45, 0.4),
    com_offsets=(0.0, 0.22, 0.18),
    base_inertia=0.02,
    gravity=9.81,
    friction=None,
) -> PlantModel:
    """Base-yaw + shoulder + elbow arm with point-mass links 2 and 3."""
    inertias = np.array([base_inertia, 0.0, 0.0])
    return PlantModel(
        kind="anthro_3dof",
        masses=np.asarray(masses, dtype=float),
        lengths=np.asarray(lengths, dtype=float),
        com_offsets=np.asarray(com_offsets, dtype=float),
        inertias=inertias,
        gravity=gravity,
        friction=friction,
    )


def ground_truth_terms(model: PlantModel, q: np.ndarray, qdot: np.ndarray):
    """Return (M, C, G) at a joint-space point, C in Christoffel form."""
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    if q.shape != (model.dof,) or qdot.shape != (model.dof,):
        raise PlantError(f"expected joint vectors of length {model.dof}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qdot))):
        raise PlantError("non-finite joint state")
    mass = model.mass_matrix(q)
    dm = model.mass_matrix_grad(q)
    # Christoffel symbols of the first kind: c_ijk = (dM_ij/dq_k + dM_ik/dq_j - dM_jk/dq_i)/2
    cor = 0.5 * (
        np.einsum("kij,k->ij", dm, qdot)
        + np.einsum("jik,k->ij", dm, qdot)
        - np.einsum("ijk,k->ij", dm, qdot)
    )
    return mass, cor, model.gravity_vector(q)


def forward_dynamics(model: PlantModel, state: PlantState, tau: np.ndarray) -> np.ndarray:
    """Solve Eq. of motion for accelerations: qddot = M^-1 (tau - C qd - G - fric qd)."""
    mass, cor, grav = ground_truth_terms(model, state.q, state.qdot)
    if np.linalg.cond(mass) > 1e12:
        raise PlantError("inertia matrix is numerically singular (cond > 1e12)")
    rhs = np.asarray(tau, dtype=float) - cor @ state.qdot - grav - model.friction * state.qdot
    return np.linalg.solve(mass, rhs)


def _state_derivative(model, t, q, qdot, tau):
    mass = model.mass_matrix(q)
    dm = model.mass_matrix_grad(q)
    cor = 0.5 * (
        np.einsum("kij,k->ij", dm, qdot)
        + np.einsum("jik,k->ij", dm, qdot)
        - np.einsum("ijk,k->ij", dm, qdot)
    )
    rhs = tau - cor @ qdot - model.gravity_vector(q) - model.friction * qdot
    return qdot, np.linalg.solve(mass, rhs)


def integrate_step(model: PlantModel, state: PlantState, tau_fn, dt: float) -> PlantState:
    """Classical RK4 step of (q, qdot); tau_fn(t, q, qdot) is sampled at substates."""
    if dt <= 0:
        raise PlantError("dt must be positive")
    t, q, qd = state.t, state.q, state.qdot

    k1q, k1v = _state_derivative(model, t, q, qd, tau_fn(t, q, qd))
    q2, v2 = q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v
    k2q, k2v = _state_derivative(model, t + 0.5 * dt, q2, v2, tau_fn(t + 0.5 * dt, q2, v2))
    q3, v3 = q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v
    k3q, k3v = _state_derivative(model, t + 0.5 * dt, q3, v3, tau_fn(t + 0.5 * dt, q3, v3))
    q4, v4 = q + dt * k3q, qd + dt * k3v
    k4q, k4v = _state_derivative(model, t + dt, q4, v4, tau_fn(t + dt, q4, v4))

    q_new = q + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    qd_new = qd + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(qd_new))):
        raise IntegrationDivergence(t + dt, f"(from q={q}, qdot={qd})")
    return PlantState(q=q_new, qdot=qd_new, t=t + dt)


@dataclass(frozen=True)
class ReferenceSpec:
    """Per-joint sum-of-sinusoids reference with analytic derivatives.

    ``amps``/``omegas``/``phases`` are (dof, K) arrays; unused slots carry
    zero amplitude.  ``offsets`` has shape (dof,).
    """

    offsets: np.ndarray
    amps: np.ndarray
    omegas: np.ndarray
    phases: np.ndarray

    @staticmethod
    def from_lists(offsets: Sequence[float], sines: Sequence[Sequence[tuple]]) -> "ReferenceSpec":
        """sines[j] is a list of (amplitude, frequency_hz, phase) triples."""
        n = len(offsets)
        k = max(1, max(len(s) for s in sines)) if sines else 1
        amps = np.zeros((n, k))
        omegas = np.zeros((n, k))
        phases = np.zeros((n, k))
        for j, joint_sines in enumerate(sines):
            for i, (amp, freq_hz, phase) in enumerate(joint_sines):
                amps[j, i] = amp
                omegas[j, i] = 2.0 * np.pi * freq_hz
                phases[j, i] = phase
        return ReferenceSpec(np.asarray(offsets, dtype=float), amps, omegas, phases)

    @property
    def dof(self) -> int:
        return len(self.offsets)

    def frequencies_hz(self) -> list:
        """Distinct injected frequencies per joint (amplitude > 0)."""
        out = []
        for j in range(self.dof):
            mask = self.amps[j] > 0
            out.append(sorted(set(np.round(self.omegas[j, mask] / (2 * np.pi), 12))))
        return out


def excitation_reference(t: float, spec: ReferenceSpec):
    """Evaluate reference (q_d, qdot_d, qddot_d) at time t; derivatives exact."""
    arg = spec.omegas * t + spec.phases
    s, c = np.sin(arg), np.cos(arg)
    q = spec.offsets + np.sum(spec.amps * s, axis=1)
    qd = np.sum(spec.amps * spec.omegas * c, axis=1)
    qdd = -np.sum(spec.amps * spec.omegas**2 * s, axis=1)
    return q, qd, qdd


def mechanical_energy(model: PlantModel, q: np.ndarray, qdot: np.ndarray) -> float:
    """Kinetic plus potential energy (friction-free invariant under tau = 0)."""
    return float(0.5 * qdot @ model.mass_matrix(q) @ qdot + model.potential_energy(q))


def inertia_eigen_band(model: PlantModel, n_grid: int = 25):
    """Scan a dense joint grid and return (lambda_min, lambda_max) of M(q)."""
    grids = [np.linspace(-np.pi, np.pi, n_grid) for _ in range(model.dof)]
    lo, hi = np.inf, -np.inf
    for q in _grid_iter(grids):
        w = np.linalg.eigvalsh(model.mass_matrix(np.asarray(q)))
        lo = min(lo, w[0])
        hi = max(hi, w[-1])
    return float(lo), float(hi)


def _grid_iter(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = [m.ravel() for m in mesh]
    for i in range(len(flat[0])):
        yield tuple(f[i] for f in flat)


def write_trajectory_csv(path, samples: Sequence[MotionSample]):
    """Trajectory log: header then t, q*, qd*, qdd*, tau* at full precision."""
    if not samples:
        raise PlantError("no samples to write")
    n = len(samples[0].q)
    header = ",".join(
        ["t"]
        + [f"q{i+1}" for i in range(n)]
        + [f"qd{i+1}" for i in range(n)]
        + [f"qdd{i+1}" for i in range(n)]
        + [f"tau{i+1}" for i in range(n)]
    )
    rows = np.array(
        [np.concatenate(([s.t], s.q, s.qdot, s.qddot, s.tau)) for s in samples]
    )
    np.savetxt(path, rows, fmt=FLOAT_FMT, delimiter=",", header=header, comments="")


def read_trajectory_csv(path) -> list:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = (data.shape[1] - 1) // 4
    out = []
    for row in data:
        out.append(
            MotionSample(
                t=row[0],
                q=row[1 : 1 + n],
                qdot=row[1 + n : 1 + 2 * n],
                qddot=row[1 + 2 * n : 1 + 3 * n],
                tau=row[1 + 3 * n : 1 + 4 * n],
            )
        )
    return out
