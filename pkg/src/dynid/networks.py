"""Three parallel one-hidden-layer subnets that emit the estimated inertia
matrix, Coriolis matrix and gravity vector, plus the torque prediction and
the weight-space Jacobians the adaptive updates consume.

Weight layout contract (shared with the learner): every matrix stores the
bias as its last column, and flattened views are row-major, so the flat
index of entry (r, c) is ``r * n_cols + c`` with biases last per row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

__all__ = [
    "Activation",
    "ACTIVATIONS",
    "SubnetWeights",
    "NetworkBundle",
    "TermsEstimate",
    "SubnetEval",
    "BundleEval",
    "NetworkError",
    "subnet_forward",
    "assemble_terms",
    "predicted_torque",
    "regressor_jacobians",
    "mhat_rate",
    "subnet_output_jacobians",
    "mhat_rate_weight_jacobians_fd",
    "init_bundle",
    "save_weights",
    "load_weights",
]


class NetworkError(ValueError):
    """Shape mismatch or invalid network configuration."""


@dataclass(frozen=True)
class Activation:
    name: str
    f: callable
    df: callable


ACTIVATIONS = {
    "tanh": Activation("tanh", np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "identity": Activation("identity", lambda z: z, lambda z: np.ones_like(z)),
    "logistic": Activation(
        "logistic",
        lambda z: 1.0 / (1.0 + np.exp(-z)),
        lambda z: (lambda s: s * (1.0 - s))(1.0 / (1.0 + np.exp(-z))),
    ),
}


@dataclass
class SubnetWeights:
    """Hidden weights (P x (d_in+1)) and output weights (d_out x (P+1))."""

    w_hidden: np.ndarray
    w_output: np.ndarray

    def __post_init__(self):
        self.w_hidden = np.asarray(self.w_hidden, dtype=float)
        self.w_output = np.asarray(self.w_output, dtype=float)
        if self.w_hidden.ndim != 2 or self.w_output.ndim != 2:
            raise NetworkError("weights must be 2-D matrices")
        if self.w_output.shape[1] != self.w_hidden.shape[0] + 1:
            raise NetworkError("output layer inconsistent with hidden size")

    @property
    def hidden_size(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_hidden.shape[1] - 1

    @property
    def d_out(self) -> int:
        return self.w_output.shape[0]

    def copy(self) -> "SubnetWeights":
        return SubnetWeights(self.w_hidden.copy(), self.w_output.copy())


@dataclass
class NetworkBundle:
    """The M/C/G subnets plus the shared activation."""

    m_net: SubnetWeights
    c_net: SubnetWeights
    g_net: SubnetWeights
    activation: Activation = ACTIVATIONS["tanh"]

    def __post_init__(self):
        n = self.dof
        if self.m_net.d_in != n or self.m_net.d_out != n * n:
            raise NetworkError("m_net shape inconsistent with dof")
        if self.c_net.d_in != 2 * n or self.c_net.d_out != n * n:
            raise NetworkError("c_net shape inconsistent with dof")
        if self.g_net.d_out != n:
            raise NetworkError("g_net shape inconsistent with dof")

    @property
    def dof(self) -> int:
        return self.g_net.d_out

    def copy(self) -> "NetworkBundle":
        return NetworkBundle(
            self.m_net.copy(), self.c_net.copy(), self.g_net.copy(), self.activation
        )

    def weight_blocks(self) -> Dict[Tuple[str, str], np.ndarray]:
        """Flat map of the six weight matrices, keyed (subnet, layer)."""
        return {
            ("m", "h"): self.m_net.w_hidden, ("m", "o"): self.m_net.w_output,
            ("c", "h"): self.c_net.w_hidden, ("c", "o"): self.c_net.w_output,
            ("g", "h"): self.g_net.w_hidden, ("g", "o"): self.g_net.w_output,
        }

    def frobenius_norms(self) -> Dict[str, float]:
        return {
            f"{sub}_{layer}": float(np.linalg.norm(w))
            for (sub, layer), w in self.weight_blocks().items()
        }


@dataclass
class TermsEstimate:
    """Assembled estimates at a query point."""

    m_hat: np.ndarray
    c_hat: np.ndarray
    g_hat: np.ndarray
    q: np.ndarray
    qdot: np.ndarray


@dataclass
class SubnetEval:
    """Cached forward pass of one subnet: reused by every Jacobian."""

    x_ext: np.ndarray     # [x; 1]
    z: np.ndarray         # hidden pre-activations
    hidden: np.ndarray    # F(z)
    hidden_ext: np.ndarray  # [F(z); 1]
    fprime: np.ndarray    # F'(z)
    y: np.ndarray         # output vector


def _eval_subnet(w: SubnetWeights, x: np.ndarray, act: Activation) -> SubnetEval:
    x = np.asarray(x, dtype=float)
    if x.shape != (w.d_in,):
        raise NetworkError(f"expected input of length {w.d_in}, got {x.shape}")
    x_ext = np.concatenate([x, [1.0]])
    z = w.w_hidden @ x_ext
    hidden = act.f(z)
    hidden_ext = np.concatenate([hidden, [1.0]])
    return SubnetEval(x_ext, z, hidden, hidden_ext, act.df(z), w.w_output @ hidden_ext)


def subnet_forward(w: SubnetWeights, x: np.ndarray, act: Activation = ACTIVATIONS["tanh"]):
    """y_n = sum_j Wo[n,j] F(sum_i Wh[j,i] x_i + bias_j) + out_bias_n."""
    return _eval_subnet(w, x, act).y


@dataclass
class BundleEval:
    """All three subnet caches at one (q, qdot) query point."""

    nets: NetworkBundle
    q: np.ndarray
    qdot: np.ndarray
    m: SubnetEval
    c: SubnetEval
    g: SubnetEval

    @property
    def m_hat(self) -> np.ndarray:
        n = self.nets.dof
        return self.m.y.reshape(n, n)

    @property
    def c_hat(self) -> np.ndarray:
        n = self.nets.dof
        return self.c.y.reshape(n, n)

    @property
    def g_hat(self) -> np.ndarray:
        return self.g.y


def evaluate_bundle(nets: NetworkBundle, q, qdot) -> BundleEval:
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    act = nets.activation
    return BundleEval(
        nets, q, qdot,
        _eval_subnet(nets.m_net, q, act),
        _eval_subnet(nets.c_net, np.concatenate([q, qdot]), act),
        _eval_subnet(nets.g_net, q, act),
    )


def assemble_terms(nets: NetworkBundle, q, qdot) -> TermsEstimate:
    """M_hat/C_hat from row-major reshape of the N^2 outputs, G_hat direct."""
    ev = evaluate_bundle(nets, q, qdot)
    return TermsEstimate(ev.m_hat, ev.c_hat, ev.g_hat, ev.q, ev.qdot)


def predicted_torque(nets: NetworkBundle, q, qdot, qddot) -> np.ndarray:
    ev = evaluate_bundle(nets, q, qdot)
    return torque_from_eval(ev, np.asarray(qddot, dtype=float))


def torque_from_eval(ev: BundleEval, qddot: np.ndarray) -> np.ndarray:
    return ev.m_hat @ qddot + ev.c_hat @ ev.qdot + ev.g_hat


def regressor_jacobians(nets: NetworkBundle, q, qdot, qddot, ev: Optional[BundleEval] = None):
    """Jacobians of the predicted torque w.r.t. flattened weights.

    Returns {('m'|'c'|'g', 'o'|'h'): (dof x n_params) array}; the 'o' entries
    are exact, the 'h' entries are the first-order terms evaluated at the
    current pre-activations.
    """
    qddot = np.asarray(qddot, dtype=float)
    if ev is None:
        ev = evaluate_bundle(nets, q, qdot)
    n = nets.dof
    out = {}

    out[("m", "o")] = np.kron(np.eye(n), np.kron(qddot, ev.m.hidden_ext))
    out[("c", "o")] = np.kron(np.eye(n), np.kron(ev.qdot, ev.c.hidden_ext))
    out[("g", "o")] = np.kron(np.eye(n), ev.g.hidden_ext)

    for key, sub, vec in (("m", nets.m_net, qddot), ("c", nets.c_net, ev.qdot)):
        cache = ev.m if key == "m" else ev.c
        rows = sub.w_output[:, :-1].reshape(n, n, sub.hidden_size)
        amp = np.einsum("nip,i->np", rows, vec)  # dtau_n / dhidden_j pathway
        xi3 = (amp * cache.fprime[None, :])[:, :, None] * cache.x_ext[None, None, :]
        out[(key, "h")] = xi3.reshape(n, -1)

    g = nets.g_net
    xi3 = (g.w_output[:, :-1] * ev.g.fprime[None, :])[:, :, None] * ev.g.x_ext[None, None, :]
    out[("g", "h")] = xi3.reshape(n, -1)
    return out


def mhat_rate(nets: NetworkBundle, q, qdot, ev: Optional[BundleEval] = None) -> np.ndarray:
    """dM_hat/dt via the chain rule through the M subnet, as an N x N matrix."""
    if ev is None:
        ev = evaluate_bundle(nets, q, qdot)
    n = nets.dof
    u = nets.m_net.w_hidden[:, :-1] @ ev.qdot  # dz/dt
    return (nets.m_net.w_output[:, :-1] @ (ev.m.fprime * u)).reshape(n, n)


def subnet_output_jacobians(w: SubnetWeights, cache: SubnetEval):
    """Jacobians of the raw subnet output vector w.r.t. flattened weights."""
    j_out = np.kron(np.eye(w.d_out), cache.hidden_ext)
    j_hid3 = (w.w_output[:, :-1] * cache.fprime[None, :])[:, :, None] * cache.x_ext[None, None, :]
    return j_out, j_hid3.reshape(w.d_out, -1)


def mhat_rate_weight_jacobians_fd(
    nets: NetworkBundle, ev: BundleEval, fd_step: float = 1e-6
):
    """Central-difference Jacobians of vec(dM_hat/dt) w.r.t. the M-subnet weights.

    Each hidden weight perturbs exactly one hidden unit, so the difference
    quotients collapse to closed expressions evaluated at shifted
    pre-activations; they are computed that way instead of looping.
    """
    m = nets.m_net
    act = nets.activation
    n2, p = m.d_out, m.hidden_size
    u = m.w_hidden[:, :-1] @ ev.qdot
    xd_ext = np.concatenate([ev.qdot, [0.0]])  # bias slot does not move with qdot

    zp = ev.m.z[:, None] + fd_step * ev.m.x_ext[None, :]
    zm = ev.m.z[:, None] - fd_step * ev.m.x_ext[None, :]
    up = u[:, None] + fd_step * xd_ext[None, :]
    um = u[:, None] - fd_step * xd_ext[None, :]
    delta = (act.df(zp) * up - act.df(zm) * um) / (2.0 * fd_step)  # (P, d_in+1)
    j_hidden = np.einsum("rj,ji->rji", m.w_output[:, :-1], delta).reshape(n2, -1)

    # Output weights enter linearly: quotient equals F'(z_j) u_j, bias column 0.
    row = np.concatenate([ev.m.fprime * u, [0.0]])
    j_output = np.kron(np.eye(n2), row)
    return j_output, j_hidden


def init_bundle(
    dof: int,
    hidden_m: int,
    hidden_c: int,
    hidden_g: int,
    seed: int,
    activation: str = "tanh",
    init_scale: float = 0.1,
    m_bias_target: Optional[float] = None,
    q0: Optional[np.ndarray] = None,
) -> NetworkBundle:
    """Seeded uniform init in +-scale/sqrt(d_in); optionally shift the M-subnet
    output bias so M_hat(q0) equals m_bias_target * identity."""
    rng = np.random.default_rng(seed)

    def make(d_in, d_out, p):
        bound = init_scale / np.sqrt(d_in)
        return SubnetWeights(
            rng.uniform(-bound, bound, (p, d_in + 1)),
            rng.uniform(-bound, bound, (d_out, p + 1)),
        )

    nets = NetworkBundle(
        make(dof, dof * dof, hidden_m),
        make(2 * dof, dof * dof, hidden_c),
        make(dof, dof, hidden_g),
        ACTIVATIONS[activation],
    )
    if m_bias_target is not None:
        q0 = np.zeros(dof) if q0 is None else np.asarray(q0, dtype=float)
        current = subnet_forward(nets.m_net, q0, nets.activation)
        target = (m_bias_target * np.eye(dof)).ravel()
        nets.m_net.w_output[:, -1] += target - current
    return nets


def save_weights(path, nets: NetworkBundle):
    """Text snapshot: shape headers followed by row-major payload rows."""
    lines = [f"dynid-weights,v1,{nets.activation.name},{nets.dof}"]
    for (sub, layer), w in nets.weight_blocks().items():
        lines.append(f"{sub},{layer},{w.shape[0]},{w.shape[1]}")
        for row in w:
            lines.append(",".join("%.17g" % v for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_weights(path) -> NetworkBundle:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    magic, version, act_name, dof = lines[0].split(",")
    if magic != "dynid-weights" or version != "v1":
        raise NetworkError(f"unrecognized weights file header: {lines[0]!r}")
    blocks = {}
    i = 1
    while i < len(lines):
        sub, layer, rows, cols = lines[i].split(",")
        rows, cols = int(rows), int(cols)
        data = np.array(
            [[float(v) for v in lines[i + 1 + r].split(",")] for r in range(rows)]
        )
        if data.shape != (rows, cols):
            raise NetworkError(f"payload shape mismatch for block {sub}/{layer}")
        blocks[(sub, layer)] = data
        i += 1 + rows
    return NetworkBundle(
        SubnetWeights(blocks[("m", "h")], blocks[("m", "o")]),
        SubnetWeights(blocks[("c", "h")], blocks[("c", "o")]),
        SubnetWeights(blocks[("g", "h")], blocks[("g", "o")]),
        ACTIVATIONS[act_name],
    )
