"""Batch warm start: ridge least squares of each subnet's output layer on a
logged open-loop dataset, with the plant's analytic terms as targets (a
simulation-only capability; hidden layers stay at their seeded values)."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .control import PdGains, run_identification_loop
from .kalman import KalmanTuning
from .learner import HyperParams
from .networks import NetworkBundle, _eval_subnet, init_bundle
from .plant import PlantModel, ReferenceSpec, ground_truth_terms

__all__ = ["pretune_least_squares", "collect_open_loop_points", "pretune_warm_start"]


def _fit_output_layer(net, inputs, targets, act, ridge):
    """Solve (Phi^T Phi + ridge I) W^T = Phi^T Y for the output layer."""
    feats = np.array([_eval_subnet(net, x, act).hidden_ext for x in inputs])
    gram = feats.T @ feats + ridge * np.eye(feats.shape[1])
    sol = np.linalg.solve(gram, feats.T @ np.asarray(targets))
    return sol.T


def pretune_least_squares(
    nets: NetworkBundle,
    plant: PlantModel,
    points: Sequence[Tuple[np.ndarray, np.ndarray]],
    ridge: float = 1e-8,
) -> NetworkBundle:
    """Return a copy of ``nets`` whose output layers are least-squares fit to
    the plant terms over the given (q, qdot) points."""
    act = nets.activation
    qs = [p[0] for p in points]
    terms = [ground_truth_terms(plant, q, qd) for q, qd in points]
    out = nets.copy()
    out.m_net.w_output = _fit_output_layer(
        nets.m_net, qs, [m.ravel() for m, _, _ in terms], act, ridge
    )
    out.c_net.w_output = _fit_output_layer(
        nets.c_net, [np.concatenate([q, qd]) for q, qd in points],
        [c.ravel() for _, c, _ in terms], act, ridge,
    )
    out.g_net.w_output = _fit_output_layer(
        nets.g_net, qs, [g for _, _, g in terms], act, ridge
    )
    return out


def collect_open_loop_points(
    plant: PlantModel,
    reference: ReferenceSpec,
    gains: PdGains,
    kalman: KalmanTuning,
    hp: HyperParams,
    duration: float = 8.0,
    stride: int = 10,
    seed: int = 0,
    noise_sigma: float = 0.0,
    warmup_steps: int = 200,
):
    """Log a learning-free proportional-controller run and return the filtered
    regressor points (q, qdot) every ``stride`` steps past the warmup."""
    dummy = init_bundle(plant.dof, 2, 2, 2, seed=0)
    log = run_identification_loop(
        plant, dummy, hp, kalman, "proportional", duration,
        reference=reference, gains=gains, noise_sigma=noise_sigma, seed=seed,
        learn=False, warmup_steps=warmup_steps,
    )
    idx = range(warmup_steps, log.n_steps, stride)
    return [(log.q_est[k], log.qd_est[k]) for k in idx]


def pretune_warm_start(
    nets: NetworkBundle,
    plant: PlantModel,
    reference: ReferenceSpec,
    gains: PdGains,
    kalman: KalmanTuning,
    hp: HyperParams,
    duration: float = 8.0,
    stride: int = 10,
    seed: int = 0,
    noise_sigma: float = 0.0,
    ridge: float = 1e-8,
) -> NetworkBundle:
    """Convenience wrapper: log the open-loop dataset, then batch-fit."""
    points = collect_open_loop_points(
        plant, reference, gains, kalman, hp, duration, stride, seed, noise_sigma
    )
    return pretune_least_squares(nets, plant, points, ridge=ridge)
