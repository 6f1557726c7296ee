"""Adaptive update laws with a dead-zone robust modification and a
Lyapunov-style monitor.

The update direction for each weight block is the Jacobian of the full
weighted residual stack transposed against the stack itself, i.e. an
explicit-Euler gradient step on half its squared norm.  When only the
torque block of the stack is nonzero this collapses to the plain
torque-regression rule.  The contributions of the skew-symmetry and
eigenvalue blocks flow through central-difference Jacobians of the inertia
rate and of the eigen-shifted determinant (no analytic eigen-derivatives).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .networks import (
    BundleEval,
    NetworkBundle,
    evaluate_bundle,
    mhat_rate,
    mhat_rate_weight_jacobians_fd,
    regressor_jacobians,
    subnet_output_jacobians,
    torque_from_eval,
)
from .residuals import (
    LagrangianWeights,
    ResidualError,
    eig_time_scale,
    inertia_eigen_residual,
    offdiag_pairs,
    skew_diag_residual,
    skew_offdiag_residual,
    stack_weighted,
    stacked_length,
    torque_residual,
)

__all__ = [
    "HyperParams",
    "LyapunovReport",
    "WaeTerms",
    "UpdateDivergence",
    "RegionTracker",
    "REGION_NAMES",
    "validate_hyperparams",
    "dead_zone_gate",
    "compute_wae",
    "wae_jacobians",
    "update_step",
    "lyapunov_value",
    "lyapunov_monitor",
    "classify_region",
]

REGION_NAMES = {1: "I", 2: "II", 3: "III", 4: "IV"}


class UpdateDivergence(RuntimeError):
    """A weight update produced non-finite values (rate too large)."""


@dataclass(frozen=True)
class HyperParams:
    """Tuning bundle for the identification loop.

    ``gamma`` sets the dead-zone stability margin (1 < gamma <= alpha),
    ``nu0`` the irreducible-residual bound, ``monitor_gain`` the weight-term
    scaling of the Lyapunov diagnostic.  ``robust_mode`` selects how updates
    behave inside the dead zone: frozen ("dead_zone") or leaky ("sigma").
    """

    alpha: float = 5.0
    gamma: float = 1.5
    nu0: float = 0.05
    rate_m_hidden: float = 1.0
    rate_m_output: float = 5.0
    rate_c_hidden: float = 1.0
    rate_c_output: float = 5.0
    rate_g_hidden: float = 1.0
    rate_g_output: float = 5.0
    lw: LagrangianWeights = field(default_factory=lambda: LagrangianWeights(1.5, 1.5, 1.1))
    lambda0: float = -0.1
    dt: float = 1e-3
    monitor_gain: float = 1.0
    robust_mode: str = "dead_zone"
    sigma_leak: float = 0.0

    def rates(self) -> Dict[Tuple[str, str], float]:
        return {
            ("m", "h"): self.rate_m_hidden, ("m", "o"): self.rate_m_output,
            ("c", "h"): self.rate_c_hidden, ("c", "o"): self.rate_c_output,
            ("g", "h"): self.rate_g_hidden, ("g", "o"): self.rate_g_output,
        }

    def dead_zone_radius(self) -> float:
        return self.gamma * self.nu0 / self.alpha


def validate_hyperparams(hp: HyperParams, strict_margin: bool = True) -> list:
    """Return the list of violated rules (empty means acceptable).

    ``strict_margin=False`` drops the stability-margin checks on gamma so
    diagnostic sweeps can probe the boundary; every other rule still holds.
    """
    problems = []
    if not hp.alpha > 0:
        problems.append(f"alpha = {hp.alpha:g} must be > 0")
    if strict_margin:
        if not hp.gamma > 1.0:
            problems.append(f"gamma = {hp.gamma:g} must be > 1")
        if hp.gamma > hp.alpha:
            problems.append(
                f"gamma = {hp.gamma:g} must not exceed alpha = {hp.alpha:g}"
            )
    if hp.nu0 < 0:
        problems.append(f"nu0 = {hp.nu0:g} must be >= 0")
    if not hp.dt > 0:
        problems.append(f"dt = {hp.dt:g} must be > 0")
    elif hp.dt * hp.alpha >= 2.0:
        problems.append(
            f"dt*alpha = {hp.dt * hp.alpha:g} must be < 2 for a stable filter"
        )
    problems.extend(hp.lw.violations())
    for (sub, layer), rate in hp.rates().items():
        if rate < 0:
            problems.append(f"learning rate for {sub}/{layer} = {rate:g} must be >= 0")
    if hp.robust_mode not in ("dead_zone", "sigma"):
        problems.append(f"robust_mode = {hp.robust_mode!r} must be dead_zone or sigma")
    if hp.sigma_leak < 0:
        problems.append(f"sigma_leak = {hp.sigma_leak:g} must be >= 0")
    if hp.monitor_gain <= 0:
        problems.append(f"monitor_gain = {hp.monitor_gain:g} must be > 0")
    return problems


def dead_zone_gate(filtered: np.ndarray, hp: HyperParams) -> bool:
    """Updates run only at or outside the ball of radius gamma*nu0/alpha."""
    return bool(np.linalg.norm(filtered) >= hp.dead_zone_radius())


@dataclass
class WaeTerms:
    """One step's residual evaluation: blocks, weighted stack and caches."""

    ev: BundleEval
    m_rate: np.ndarray
    tau_hat: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    e4: np.ndarray
    stacked: np.ndarray
    band_penalty: np.ndarray


def compute_wae(
    nets: NetworkBundle,
    q: np.ndarray,
    qdot: np.ndarray,
    qddot: np.ndarray,
    tau: np.ndarray,
    lw: LagrangianWeights,
    t_run: float,
    lambda0: float,
    band=None,
) -> WaeTerms:
    """Evaluate all residual blocks and the weighted stack at one sample."""
    ev = evaluate_bundle(nets, q, qdot)
    m_rate = mhat_rate(nets, q, qdot, ev=ev)
    tau_hat = torque_from_eval(ev, np.asarray(qddot, dtype=float))
    e1 = np.asarray(tau, dtype=float) - tau_hat
    e2 = skew_diag_residual(m_rate, ev.c_hat)
    e3 = skew_offdiag_residual(m_rate, ev.c_hat)
    e4, penalty = inertia_eigen_residual(ev.m_hat, t_run, lambda0, band=band)
    return WaeTerms(
        ev, m_rate, tau_hat, e1, e2, e3, e4, stack_weighted(e1, e2, e3, e4, lw), penalty
    )


def _inertia_residual_mhat_grad_fd(m_hat, t, lambda0, fd_step=1e-6):
    """Central-difference d e4 / d vec(M_hat), batched over the N^2 entries."""
    n = m_hat.shape[0]
    eye = np.eye(n)
    scale = eig_time_scale(t, lambda0)

    shifts = np.zeros((2 * n * n, n, n))
    for idx in range(n * n):
        a, b = divmod(idx, n)
        shifts[2 * idx, a, b] = fd_step
        shifts[2 * idx + 1, a, b] = -fd_step
    perturbed = m_hat[None, :, :] + shifts
    sym = 0.5 * (perturbed + np.transpose(perturbed, (0, 2, 1)))
    eigs = np.linalg.eigvalsh(sym) * scale  # (2 n^2, n)
    shifted = perturbed[:, None, :, :] - eigs[:, :, None, None] * eye[None, None, :, :]
    e4 = np.abs(np.linalg.det(shifted.reshape(-1, n, n)).reshape(2 * n * n, n))
    grad = (e4[0::2] - e4[1::2]) / (2.0 * fd_step)  # (n^2, n)
    return grad.T  # (n, n^2): rows follow e4, columns follow vec(M_hat)


def wae_jacobians(
    nets: NetworkBundle,
    ev: BundleEval,
    qddot: np.ndarray,
    lw: LagrangianWeights,
    t_run: float,
    lambda0: float,
    fd_step: float = 1e-6,
) -> Dict[Tuple[str, str], np.ndarray]:
    """Jacobian of the weighted residual stack w.r.t. every weight block.

    Rows follow the stack layout [e1; l1 e2; l2 e3; l3 e4]; columns follow
    the row-major weight flattening.  Torque rows are the analytic
    regressor Jacobians (negated: e1 = tau - tau_hat); the remaining rows
    combine analytic subnet Jacobians with the finite-difference pieces.
    """
    n = nets.dof
    pairs = offdiag_pairs(n)
    length = stacked_length(n)
    diag_idx = [k * n + k for k in range(n)]
    reg = regressor_jacobians(nets, ev.q, ev.qdot, qddot, ev=ev)

    jac = {}
    row_e2 = slice(n, 2 * n)
    row_e3 = slice(2 * n, 2 * n + len(pairs))
    row_e4 = slice(2 * n + len(pairs), length)

    # M subnet: torque rows analytic, e2/e3 through the rate FD, e4 through
    # the eigen-determinant FD chained with the analytic output Jacobian.
    rate_j = dict(zip(("o", "h"), mhat_rate_weight_jacobians_fd(nets, ev, fd_step)))
    out_j = dict(zip(("o", "h"), subnet_output_jacobians(nets.m_net, ev.m)))
    e4_grad = _inertia_residual_mhat_grad_fd(ev.m_hat, t_run, lambda0, fd_step)
    for layer in ("o", "h"):
        block = np.zeros((length, reg[("m", layer)].shape[1]))
        block[:n] = -reg[("m", layer)]
        block[row_e2] = lw.lambda1 * rate_j[layer][diag_idx]
        for r, (i, j) in enumerate(pairs):
            block[2 * n + r] = lw.lambda2 * (
                rate_j[layer][i * n + j] + rate_j[layer][j * n + i]
            )
        block[row_e4] = lw.lambda3 * (e4_grad @ out_j[layer])
        jac[("m", layer)] = block

    # C subnet: e2/e3 couple through the raw output entries, e4 does not.
    c_out_j = dict(zip(("o", "h"), subnet_output_jacobians(nets.c_net, ev.c)))
    for layer in ("o", "h"):
        block = np.zeros((length, reg[("c", layer)].shape[1]))
        block[:n] = -reg[("c", layer)]
        block[row_e2] = -2.0 * lw.lambda1 * c_out_j[layer][diag_idx]
        for r, (i, j) in enumerate(pairs):
            block[2 * n + r] = -2.0 * lw.lambda2 * (
                c_out_j[layer][i * n + j] + c_out_j[layer][j * n + i]
            )
        jac[("c", layer)] = block

    # G subnet only feeds the torque rows.
    for layer in ("o", "h"):
        block = np.zeros((length, reg[("g", layer)].shape[1]))
        block[:n] = -reg[("g", layer)]
        jac[("g", layer)] = block
    return jac


def update_step(
    nets: NetworkBundle,
    stacked: np.ndarray,
    jac: Dict[Tuple[str, str], np.ndarray],
    hp: HyperParams,
    gate: bool,
) -> NetworkBundle:
    """One explicit-Euler update; frozen (or leaky) when the gate is closed."""
    if not gate:
        if hp.robust_mode == "sigma" and hp.sigma_leak > 0.0:
            new = nets.copy()
            for w in new.weight_blocks().values():
                w -= hp.dt * hp.sigma_leak * w
            return new
        return nets
    rates = hp.rates()
    new = nets.copy()
    for key, w in new.weight_blocks().items():
        step = hp.dt * rates[key] * (jac[key].T @ stacked)
        if not np.all(np.isfinite(step)):
            raise UpdateDivergence(
                f"non-finite update for block {key[0]}/{key[1]} "
                f"(rate {rates[key]:g}); reduce the learning rate"
            )
        w -= step.reshape(w.shape)
    return new


def lyapunov_value(filtered, nets: NetworkBundle, theta_ref: NetworkBundle, hp: HyperParams) -> float:
    """V = (||e||^2 + ||theta - theta_ref||_F^2 / monitor_gain) / 2."""
    dist = sum(
        float(np.sum((w - wr) ** 2))
        for w, wr in zip(nets.weight_blocks().values(), theta_ref.weight_blocks().values())
    )
    return 0.5 * (float(filtered @ filtered) + dist / hp.monitor_gain)


def classify_region(emod_norm: float, hp: HyperParams, over_param: bool = False,
                    buffer: float = 3.0) -> int:
    """Operating-region code 1..4 from the filtered-residual magnitude.

    1 (I): over-parameterized flag raised by the tracker heuristic.
    2 (II): stability-margin band just outside the dead-zone radius.
    3 (III): inside the operating ball (converged; adaptation frozen).
    4 (IV): beyond the margin band; still converging or unstable.
    """
    if over_param:
        return 1
    radius = hp.dead_zone_radius()
    upper = buffer * max(1.0, hp.gamma) * hp.nu0 / hp.alpha
    if emod_norm < radius:
        return 3
    if emod_norm < upper:
        return 2
    return 4


@dataclass
class LyapunovReport:
    v: float
    dv_estimate: float
    in_dead_zone: bool
    region: int

    @property
    def region_name(self) -> str:
        return REGION_NAMES[self.region]


def lyapunov_monitor(
    filtered,
    nets: NetworkBundle,
    theta_ref: NetworkBundle,
    hp: HyperParams,
    v_prev: Optional[float] = None,
    over_param: bool = False,
) -> LyapunovReport:
    v = lyapunov_value(filtered, nets, theta_ref, hp)
    dv = 0.0 if v_prev is None else (v - v_prev) / hp.dt
    emod_norm = float(np.linalg.norm(filtered))
    return LyapunovReport(
        v=v,
        dv_estimate=dv,
        in_dead_zone=emod_norm < hp.dead_zone_radius(),
        region=classify_region(emod_norm, hp, over_param),
    )


class RegionTracker:
    """Persistence heuristic for the over-parameterized flag: the filtered
    residual stays under nu0/alpha while the total weight norm keeps growing."""

    def __init__(self, hp: HyperParams, window_steps: int = 500):
        self.threshold = hp.nu0 / hp.alpha
        self.window = window_steps
        self.count = 0
        self._last_norm = None

    def update(self, emod_norm: float, nets: NetworkBundle) -> bool:
        total = sum(float(np.sum(w**2)) for w in nets.weight_blocks().values())
        growing = self._last_norm is not None and total > self._last_norm + 1e-15
        self._last_norm = total
        if emod_norm < self.threshold and growing:
            self.count += 1
        else:
            self.count = 0
        return self.count >= self.window
