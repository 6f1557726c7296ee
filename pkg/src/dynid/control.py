"""Closed-loop machinery: proportional / PD / inverse-dynamics controllers and
the online identification loop (measure -> filter -> residuals -> gate ->
update -> control -> integrate)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .kalman import KalmanBank, KalmanTuning
from .learner import (
    HyperParams,
    RegionTracker,
    UpdateDivergence,
    classify_region,
    compute_wae,
    dead_zone_gate,
    lyapunov_value,
    update_step,
    wae_jacobians,
)
from .networks import NetworkBundle, TermsEstimate, assemble_terms
from .plant import (
    IntegrationDivergence,
    PlantModel,
    PlantState,
    ReferenceSpec,
    excitation_reference,
    integrate_step,
)
from .residuals import stacked_length

__all__ = [
    "PdGains",
    "RunLog",
    "proportional_controller",
    "pd_controller",
    "nnidc_controller",
    "run_identification_loop",
    "weights_vector",
]

CONTROLLER_KINDS = ("proportional", "pd", "nnidc")


@dataclass(frozen=True)
class PdGains:
    """Diagonal proportional/derivative gains, entries > 0."""

    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kp", np.asarray(self.kp, dtype=float))
        object.__setattr__(self, "kd", np.asarray(self.kd, dtype=float))
        if np.any(self.kp <= 0) or np.any(self.kd <= 0):
            raise ValueError("gain entries must be positive")


def proportional_controller(q, q_ref, kp) -> np.ndarray:
    """tau = Kp (q_ref - q)."""
    return np.asarray(kp, dtype=float) * (q_ref - q)


def pd_controller(q, qdot, q_ref, qdot_ref, gains: PdGains) -> np.ndarray:
    """tau = Kp e + Kd edot."""
    return gains.kp * (q_ref - q) + gains.kd * (qdot_ref - qdot)


def nnidc_controller(q, qdot, ref_triple, gains: PdGains, est: TermsEstimate,
                     cond_limit: float = 1e6):
    """Feedback linearization from the live estimates:
    tau = M_hat (qdd_ref + Kd edot + Kp e) + C_hat qdot + G_hat.

    Falls back to plain PD for the step when M_hat is ill-conditioned;
    returns (tau, fallback_flag).
    """
    q_ref, qd_ref, qdd_ref = ref_triple
    e = q_ref - q
    edot = qd_ref - qdot
    if not np.all(np.isfinite(est.m_hat)) or np.linalg.cond(est.m_hat) > cond_limit:
        return gains.kp * e + gains.kd * edot, True
    v = qdd_ref + gains.kd * edot + gains.kp * e
    return est.m_hat @ v + est.c_hat @ qdot + est.g_hat, False


@dataclass
class RunLog:
    """Per-step traces of one loop run plus the weight end points."""

    dof: int
    dt: float
    t: np.ndarray
    q_meas: np.ndarray
    q_est: np.ndarray
    qd_est: np.ndarray
    qdd_est: np.ndarray
    q_true: np.ndarray
    q_ref: np.ndarray
    qd_ref: np.ndarray
    tau: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    e4: np.ndarray
    eps_norm: np.ndarray
    emod_norm: np.ndarray
    dead_zone: np.ndarray       # 1 when the filtered residual is inside the ball
    updates_active: np.ndarray  # 1 when a weight update was applied this step
    v: np.ndarray
    dv: np.ndarray
    region: np.ndarray
    weight_norms: np.ndarray    # columns: m_h, m_o, c_h, c_o, g_h, g_o
    band_penalty: np.ndarray
    fallback: np.ndarray
    initial_nets: NetworkBundle
    final_nets: NetworkBundle
    weight_traj: Optional[np.ndarray] = None
    aborted: bool = False
    abort_step: int = -1
    abort_reason: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.t)


def weights_vector(nets: NetworkBundle) -> np.ndarray:
    """All six blocks flattened into one vector (fixed block order)."""
    return np.concatenate([w.ravel() for w in nets.weight_blocks().values()])


def run_identification_loop(
    plant: PlantModel,
    nets: NetworkBundle,
    hp: HyperParams,
    kalman: KalmanTuning,
    controller: str,
    duration: float,
    *,
    reference: ReferenceSpec,
    gains: PdGains,
    noise_sigma: float = 0.0,
    seed: int = 0,
    learn: bool = True,
    warmup_steps: int = 200,
    record_weights: bool = False,
    inertia_band=None,
    nnidc_cond_limit: float = 1e6,
    fd_step: float = 1e-6,
    start_at_rest: Optional[np.ndarray] = None,
) -> RunLog:
    """Run the closed loop for ``duration`` seconds at the hp.dt sampling rate.

    The torque is held over each step; residuals pair the torque applied over
    the previous interval with the filter estimates at the current instant.
    The filtered residual (and learning) starts after the Kalman warmup.
    """
    if controller not in CONTROLLER_KINDS:
        raise ValueError(f"controller must be one of {CONTROLLER_KINDS}")
    n = plant.dof
    dt = hp.dt
    steps = int(round(duration / dt))
    p3 = (n * n - n) // 2
    rng = np.random.default_rng(seed)

    rec = {
        "q_meas": np.zeros((steps, n)), "q_est": np.zeros((steps, n)),
        "qd_est": np.zeros((steps, n)), "qdd_est": np.zeros((steps, n)),
        "q_true": np.zeros((steps, n)),
        "q_ref": np.zeros((steps, n)), "qd_ref": np.zeros((steps, n)),
        "tau": np.zeros((steps, n)),
        "e1": np.zeros((steps, n)), "e2": np.zeros((steps, n)),
        "e3": np.zeros((steps, p3)), "e4": np.zeros((steps, n)),
        "eps_norm": np.zeros(steps), "emod_norm": np.zeros(steps),
        "dead_zone": np.zeros(steps), "updates_active": np.zeros(steps),
        "v": np.zeros(steps), "dv": np.zeros(steps),
        "region": np.zeros(steps, dtype=int),
        "weight_norms": np.zeros((steps, 6)),
        "band_penalty": np.zeros(steps), "fallback": np.zeros(steps),
    }
    weight_traj = np.zeros((steps, weights_vector(nets).size)) if record_weights else None

    initial_nets = nets.copy()
    if start_at_rest is not None:
        q0 = np.asarray(start_at_rest, dtype=float)
        qd0 = np.zeros(n)
    else:
        q0, qd0, _ = excitation_reference(0.0, reference)
    state = PlantState(q=q0.copy(), qdot=qd0.copy(), t=0.0)
    # the start pose and rate are known, so the filter starts there too; only
    # the acceleration is unknown at t = 0
    bank = KalmanBank(
        n, kalman, dt,
        q0=q0 + (rng.normal(0.0, noise_sigma, n) if noise_sigma > 0 else 0.0),
        qd0=qd0,
        cov0=np.diag([max(kalman.meas_var, 1e-10), 1e-2, 100.0]),
    )

    filtered = np.zeros(stacked_length(n))
    tau_prev = np.zeros(n)
    v_prev = None
    tracker = RegionTracker(hp)
    aborted, abort_step, abort_reason = False, -1, ""

    for k in range(steps):
        t = k * dt
        y = state.q + (rng.normal(0.0, noise_sigma, n) if noise_sigma > 0 else 0.0)
        if k == 0:
            q_est, qd_est, qdd_est = bank.x[:, 0].copy(), bank.x[:, 1].copy(), bank.x[:, 2].copy()
        else:
            q_est, qd_est, qdd_est = bank.step(y)

        est = None
        gate = False
        if k >= 1:
            terms = compute_wae(
                nets, q_est, qd_est, qdd_est, tau_prev, hp.lw, t, hp.lambda0,
                band=inertia_band,
            )
            est = TermsEstimate(terms.ev.m_hat, terms.ev.c_hat, terms.ev.g_hat, q_est, qd_est)
            if k >= warmup_steps:
                filtered = filtered + dt * (terms.stacked - hp.alpha * filtered)
            gate = dead_zone_gate(filtered, hp)
            do_update = learn and gate and k >= warmup_steps
            if do_update:
                jac = wae_jacobians(nets, terms.ev, qdd_est, hp.lw, t, hp.lambda0, fd_step)
                try:
                    nets = update_step(nets, terms.stacked, jac, hp, gate=True)
                except UpdateDivergence as exc:
                    aborted, abort_step, abort_reason = True, k, str(exc)
            elif not gate and hp.robust_mode == "sigma" and learn and k >= warmup_steps:
                nets = update_step(nets, terms.stacked, {}, hp, gate=False)

            rec["e1"][k] = terms.e1
            rec["e2"][k] = terms.e2
            rec["e3"][k] = terms.e3
            rec["e4"][k] = terms.e4
            rec["eps_norm"][k] = np.linalg.norm(terms.stacked)
            rec["band_penalty"][k] = np.sum(terms.band_penalty)
            rec["updates_active"][k] = float(do_update and not aborted)

        emod_norm = float(np.linalg.norm(filtered))
        over_param = tracker.update(emod_norm, nets)
        v_now = lyapunov_value(filtered, nets, initial_nets, hp)
        rec["emod_norm"][k] = emod_norm
        rec["dead_zone"][k] = float(emod_norm < hp.dead_zone_radius())
        rec["v"][k] = v_now
        rec["dv"][k] = 0.0 if v_prev is None else (v_now - v_prev) / dt
        rec["region"][k] = classify_region(emod_norm, hp, over_param)
        v_prev = v_now
        wn = nets.frobenius_norms()
        rec["weight_norms"][k] = [wn["m_h"], wn["m_o"], wn["c_h"], wn["c_o"], wn["g_h"], wn["g_o"]]
        if record_weights:
            weight_traj[k] = weights_vector(nets)

        q_ref, qd_ref, qdd_ref = excitation_reference(t, reference)
        if controller == "proportional":
            tau = proportional_controller(q_est, q_ref, gains.kp)
        elif controller == "pd":
            tau = pd_controller(q_est, qd_est, q_ref, qd_ref, gains)
        else:
            if est is None:
                est = assemble_terms(nets, q_est, qd_est)
            tau, fb = nnidc_controller(
                q_est, qd_est, (q_ref, qd_ref, qdd_ref), gains, est, nnidc_cond_limit
            )
            rec["fallback"][k] = float(fb)

        rec["q_meas"][k] = y
        rec["q_true"][k] = state.q
        rec["q_est"][k] = q_est
        rec["qd_est"][k] = qd_est
        rec["qdd_est"][k] = qdd_est
        rec["q_ref"][k] = q_ref
        rec["qd_ref"][k] = qd_ref
        rec["tau"][k] = tau

        if aborted:
            rec = {key: arr[: k + 1] for key, arr in rec.items()}
            if record_weights:
                weight_traj = weight_traj[: k + 1]
            steps = k + 1
            break

        tau_held = tau
        try:
            state = integrate_step(plant, state, lambda _t, _q, _qd: tau_held, dt)
        except IntegrationDivergence as exc:
            aborted, abort_step, abort_reason = True, k, str(exc)
            rec = {key: arr[: k + 1] for key, arr in rec.items()}
            if record_weights:
                weight_traj = weight_traj[: k + 1]
            steps = k + 1
            break
        tau_prev = tau

    return RunLog(
        dof=n, dt=dt, t=np.arange(steps) * dt,
        initial_nets=initial_nets, final_nets=nets,
        weight_traj=weight_traj,
        aborted=aborted, abort_step=abort_step, abort_reason=abort_reason,
        **rec,
    )
