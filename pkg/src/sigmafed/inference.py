"""Variational inference over the approximate models: mean-field families,
the sticking-the-landing gradient, centralized fitting, and the federated
round protocol whose global-parameter trajectory matches the centralized
one exactly, plus closed-form conjugate posteriors used as ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericError, ShapeError
from .model import ClientData, SigmaPriorModel, _client_term, _global_term
from .nn import AdamState, SeededRng, adam_step, clip_grad_norm
from .priors import AdjacencyGraph, Grid1D, RbfSpec, cholesky_lower, rbf_cross, rbf_kernel

LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "VarBlock",
    "MeanFieldApprox",
    "stl_gradient",
    "mfvi_fit",
    "SigmaModelTarget",
    "GradMessage",
    "ServerState",
    "ClientState",
    "make_federation",
    "sfvi_round",
    "gp_conjugate_posterior",
    "gp_marginal_posterior",
    "pcar_conjugate_posterior",
]


@dataclass
class VarBlock:
    """Diagonal-Gaussian variational factor (mu, log sigma)."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.log_sigma = np.atleast_1d(np.asarray(self.log_sigma, dtype=np.float64))
        if self.mu.shape != self.log_sigma.shape:
            raise ShapeError("mu and log_sigma must have equal shape")

    def copy(self) -> "VarBlock":
        return VarBlock(self.mu.copy(), self.log_sigma.copy())


class MeanFieldApprox:
    """Named independent Gaussian blocks over the latent point."""

    def __init__(self, blocks: dict[str, VarBlock]):
        self.blocks = dict(blocks)

    @classmethod
    def initial(cls, dims: dict[str, int], mu0: float = 0.0, log_sigma0: float = -1.0) -> "MeanFieldApprox":
        return cls(
            {name: VarBlock(np.full(d, mu0), np.full(d, log_sigma0)) for name, d in dims.items()}
        )

    def copy(self) -> "MeanFieldApprox":
        return MeanFieldApprox({k: v.copy() for k, v in self.blocks.items()})

    def param_dict(self, names=None) -> dict[str, np.ndarray]:
        names = self.blocks.keys() if names is None else names
        out = {}
        for n in names:
            out[f"{n}.mu"] = self.blocks[n].mu
            out[f"{n}.log_sigma"] = self.blocks[n].log_sigma
        return out

    def sample_with(self, eps: dict[str, np.ndarray], names=None) -> dict[str, np.ndarray]:
        names = self.blocks.keys() if names is None else names
        return {
            n: self.blocks[n].mu + np.exp(self.blocks[n].log_sigma) * eps[n] for n in names
        }

    def log_q(self, x: dict[str, np.ndarray], names=None) -> float:
        names = self.blocks.keys() if names is None else names
        total = 0.0
        for n in names:
            b = self.blocks[n]
            r = (x[n] - b.mu) * np.exp(-b.log_sigma)
            total += -0.5 * float(np.sum(LOG_2PI + 2.0 * b.log_sigma + r * r))
        return total

    def mean_point(self) -> dict[str, np.ndarray]:
        return {n: b.mu.copy() for n, b in self.blocks.items()}


def _block_noise(step_rng: SeededRng, q: MeanFieldApprox, names) -> dict[str, np.ndarray]:
    """Per-block noise keyed by block name, so streams are stable under any
    evaluation order and shared between centralized and federated runs."""
    return {n: step_rng.derive(n).normal(q.blocks[n].mu.shape) for n in names}


def stl_gradient(log_joint, q: MeanFieldApprox, rng: SeededRng):
    """Single-sample sticking-the-landing gradient of the ELBO.

    Samples x = mu + sigma * eps, evaluates grad_x[log p(x, y) - log q(x)]
    with the variational parameters inside log q held fixed (the score
    term is dropped), and maps back through the reparameterization.
    Returns (elbo_estimate, gradients) with gradients keyed like
    MeanFieldApprox.param_dict.
    """
    names = list(q.blocks.keys())
    eps = _block_noise(rng, q, names)
    x = q.sample_with(eps, names)
    val, gx = log_joint(x)
    elbo = val - q.log_q(x, names)
    grads = {}
    for n in names:
        b = q.blocks[n]
        sigma = np.exp(b.log_sigma)
        v = gx[n] + eps[n] / sigma
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for block '{n}'")
        grads[f"{n}.mu"] = v
        grads[f"{n}.log_sigma"] = v * sigma * eps[n]
    return elbo, grads


def mfvi_fit(
    log_joint,
    init: MeanFieldApprox,
    steps: int,
    lr: float,
    rng: SeededRng,
    clip_norm: float | None = None,
):
    """Adam ascent on STL gradients; deterministic given the rng seed.

    Clipping, when enabled, is a single global-norm clip over every block
    passed jointly. Returns the fitted approximation and the per-step
    single-sample ELBO trace.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    q = init.copy()
    params = q.param_dict()
    adam = AdamState(params, lr=lr)
    trace = np.empty(steps)
    for t in range(steps):
        try:
            elbo, grads = stl_gradient(log_joint, q, rng.derive("step", t))
        except NumericError as exc:
            raise NumericError(f"step {t}: {exc}") from exc
        if not np.isfinite(elbo):
            raise NumericError(f"step {t}: non-finite ELBO")
        trace[t] = elbo
        for g in grads.values():
            np.negative(g, out=g)
        if clip_norm is not None:
            clip_grad_norm(grads, clip_norm)
        adam_step(adam, params, grads)
    return q, trace


GLOBAL_BLOCKS = ("logit_phi", "z_G")


class SigmaModelTarget:
    """Log-joint of a deterministic or auxiliary-variable inference model,
    decomposed into one global term plus one term per client.

    The decomposition is exact: log_joint accumulates the global term first
    and then each client term in client-id order, which is also precisely
    what the federated server reproduces.
    """

    def __init__(
        self,
        model: SigmaPriorModel,
        data: list[ClientData],
        variant: str = "deterministic",
        tau2: np.ndarray | None = None,
    ):
        if variant not in ("deterministic", "aux"):
            raise ValueError(f"unknown variant '{variant}'")
        if variant == "aux":
            if tau2 is None:
                raise ValueError("aux variant requires tau2")
            tau2 = np.asarray(tau2, dtype=np.float64)
            if tau2.shape != (model.config.d_total,):
                raise ShapeError(f"tau2 must have shape ({model.config.d_total},)")
        if len(data) != model.config.n_clients:
            raise ShapeError("need one data container per client")
        self.model = model
        self.data = data
        self.variant = variant
        self.tau2 = tau2

    @property
    def n_clients(self) -> int:
        return self.model.config.n_clients

    def client_block_names(self, j: int) -> tuple[str, ...]:
        if self.variant == "aux":
            return (f"z_L{j}", f"theta_{j}")
        return (f"z_L{j}",)

    def block_dims(self) -> dict[str, int]:
        cfg = self.model.config
        dims = {"logit_phi": 1, "z_G": cfg.global_latent}
        for j in range(cfg.n_clients):
            dims[f"z_L{j}"] = cfg.local_latents[j]
            if self.variant == "aux":
                dims[f"theta_{j}"] = cfg.client_dims[j]
        return dims

    def initial_approx(self) -> MeanFieldApprox:
        return MeanFieldApprox.initial(self.block_dims())

    def global_term(self, x: dict[str, np.ndarray]):
        val, du, dzg = _global_term(self.model, float(x["logit_phi"][0]), x["z_G"])
        return val, {"logit_phi": np.array([du]), "z_G": dzg}

    def client_term(self, j: int, x: dict[str, np.ndarray], data_j: ClientData | None = None):
        """One client's contribution; data defaults to this target's slice so
        a federated client can pass its privately held container instead."""
        if data_j is None:
            data_j = self.data[j]
        theta_j = x[f"theta_{j}"] if self.variant == "aux" else None
        tau2_j = self.tau2[self.model.partition.blocks[j]] if self.variant == "aux" else None
        val, du, dzg, dzl, dtheta = _client_term(
            self.model, j, float(x["logit_phi"][0]), x["z_G"], x[f"z_L{j}"],
            data_j, theta_j, tau2_j,
        )
        grads = {"logit_phi": np.array([du]), "z_G": dzg, f"z_L{j}": dzl}
        if self.variant == "aux":
            grads[f"theta_{j}"] = dtheta
        return val, grads

    def log_joint(self, x: dict[str, np.ndarray]):
        val, grads = self.global_term(x)
        grads = {k: v.copy() for k, v in grads.items()}
        for j in range(self.n_clients):
            v_j, g_j = self.client_term(j, x)
            val += v_j
            for name, g in g_j.items():
                if name in grads:
                    grads[name] += g
                else:
                    grads[name] = g
        return val, grads


@dataclass
class GradMessage:
    """Client-to-server payload for one round: contributions to the global
    blocks' gradient only, never local blocks or raw data.

    Each per-block array is the client's term of grad_x of its log-joint
    piece at the shared global sample; it equals the client's contribution
    to the mu-gradient, and the server forms the log-sigma part with the
    shared (sigma, eps) it already knows. The ELBO contribution is an
    in-process diagnostic and is not part of the wire schema.
    """

    round_index: int
    client_id: int
    blocks: dict[str, np.ndarray]
    elbo_contribution: float = 0.0

    def to_json(self) -> str:
        doc = {
            "round": int(self.round_index),
            "client_id": int(self.client_id),
            "blocks": {k: [float(v) for v in arr] for k, arr in self.blocks.items()},
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GradMessage":
        doc = json.loads(text)
        return cls(
            round_index=int(doc["round"]),
            client_id=int(doc["client_id"]),
            blocks={k: np.asarray(v, dtype=np.float64) for k, v in doc["blocks"].items()},
        )


@dataclass
class ServerState:
    """Owns the global variational blocks and their optimizer."""

    q_global: MeanFieldApprox
    adam: AdamState
    target: SigmaModelTarget
    round_index: int = 0
    clip_norm: float | None = None


@dataclass
class ClientState:
    """Owns one client's local blocks, optimizer, and data partition only."""

    client_id: int
    q_local: MeanFieldApprox
    adam: AdamState
    data: ClientData
    target: SigmaModelTarget
    round_index: int = 0
    clip_norm: float | None = None


def make_federation(
    target: SigmaModelTarget,
    lr: float,
    init: MeanFieldApprox | None = None,
    clip_norm: float | None = None,
):
    """Split a model target into server and client states.

    Each client state receives only its own data container; the shared
    target handle carries the model networks and tau2, which are public.
    """
    full = target.initial_approx() if init is None else init.copy()
    q_g = MeanFieldApprox({n: full.blocks[n].copy() for n in GLOBAL_BLOCKS})
    server = ServerState(
        q_global=q_g,
        adam=AdamState(q_g.param_dict(), lr=lr),
        target=target,
        clip_norm=clip_norm,
    )
    clients = []
    for j in range(target.n_clients):
        names = target.client_block_names(j)
        q_j = MeanFieldApprox({n: full.blocks[n].copy() for n in names})
        clients.append(
            ClientState(
                client_id=j,
                q_local=q_j,
                adam=AdamState(q_j.param_dict(), lr=lr),
                data=target.data[j],
                target=target,
                clip_norm=clip_norm,
            )
        )
    return server, clients


def _client_round(client: ClientState, q_global: MeanFieldApprox, step_rng: SeededRng) -> GradMessage:
    """One client update: sample shared global noise and private local noise,
    take the STL step on the local blocks, and emit the global contribution."""
    eps_g = _block_noise(step_rng, q_global, GLOBAL_BLOCKS)
    x = q_global.sample_with(eps_g, GLOBAL_BLOCKS)
    names = list(client.q_local.blocks.keys())
    eps_l = _block_noise(step_rng, client.q_local, names)
    x.update(client.q_local.sample_with(eps_l, names))

    val, gx = client.target.client_term(client.client_id, x, data_j=client.data)
    grads = {}
    for n in names:
        b = client.q_local.blocks[n]
        sigma = np.exp(b.log_sigma)
        v = gx[n] + eps_l[n] / sigma
        grads[f"{n}.mu"] = -v
        grads[f"{n}.log_sigma"] = -(v * sigma * eps_l[n])
    if client.clip_norm is not None:
        clip_grad_norm(grads, client.clip_norm)
    adam_step(client.adam, client.q_local.param_dict(), grads)

    message = GradMessage(
        round_index=client.round_index,
        client_id=client.client_id,
        blocks={n: gx[n] for n in GLOBAL_BLOCKS},
        elbo_contribution=val - client.q_local.log_q(x, names),
    )
    client.round_index += 1
    return message


def sfvi_round(server: ServerState, clients: list[ClientState], rng: SeededRng) -> float:
    """One synchronous federated round; returns the round's ELBO estimate.

    The server broadcasts its global blocks, every client answers with a
    GradMessage, and the aggregate must be complete before any global
    update happens: a missing or misaligned client aborts the round with
    no partial aggregation.
    """
    r = server.round_index
    for c in clients:
        if c.round_index != r:
            raise NumericError(
                f"client {c.client_id} is at round {c.round_index}, server at {r}; round aborted"
            )
    step_rng = rng.derive("step", r)
    messages = [_client_round(c, server.q_global, step_rng) for c in clients]
    messages.sort(key=lambda m: m.client_id)
    if len({m.client_id for m in messages}) != len(clients):
        raise NumericError("duplicate or missing client message; round aborted")

    eps_g = _block_noise(step_rng, server.q_global, GLOBAL_BLOCKS)
    x_g = server.q_global.sample_with(eps_g, GLOBAL_BLOCKS)
    val_g, gx_g = server.target.global_term(x_g)
    acc = {n: gx_g[n].copy() for n in GLOBAL_BLOCKS}
    for m in messages:
        for n in GLOBAL_BLOCKS:
            acc[n] += m.blocks[n]
    grads = {}
    for n in GLOBAL_BLOCKS:
        b = server.q_global.blocks[n]
        sigma = np.exp(b.log_sigma)
        v = acc[n] + eps_g[n] / sigma
        grads[f"{n}.mu"] = -v
        grads[f"{n}.log_sigma"] = -(v * sigma * eps_g[n])
    if server.clip_norm is not None:
        clip_grad_norm(grads, server.clip_norm)
    adam_step(server.adam, server.q_global.param_dict(), grads)
    server.round_index += 1

    elbo = val_g - server.q_global.log_q(x_g, GLOBAL_BLOCKS)
    for m in messages:
        elbo += m.elbo_contribution
    return elbo


def federation_approx(server: ServerState, clients: list[ClientState]) -> MeanFieldApprox:
    """Assemble the joint approximation from server and client states."""
    blocks = {n: server.q_global.blocks[n].copy() for n in GLOBAL_BLOCKS}
    for c in sorted(clients, key=lambda c: c.client_id):
        for n, b in c.q_local.blocks.items():
            blocks[n] = b.copy()
    return MeanFieldApprox(blocks)


def gp_conjugate_posterior(
    x_obs: np.ndarray,
    y_obs: np.ndarray,
    phi: float,
    sigma_lik: float,
    grid: Grid1D,
    variance: float = 1.0,
):
    """Closed-form GP regression posterior on the grid at fixed lengthscale."""
    spec = RbfSpec(lengthscale=phi, variance=variance)
    k_gg = rbf_kernel(grid, spec)
    x_obs = np.asarray(x_obs, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    if x_obs.size == 0:
        return np.zeros(grid.n), k_gg
    k_oo = rbf_cross(x_obs, x_obs, spec) + sigma_lik**2 * np.eye(x_obs.size)
    k_go = rbf_cross(grid.points, x_obs, spec)
    lower = cholesky_lower(k_oo)
    alpha = solve_triangular(lower.T, solve_triangular(lower, y_obs, lower=True), lower=False)
    mean = k_go @ alpha
    half = solve_triangular(lower, k_go.T, lower=True)
    cov = k_gg - half.T @ half
    return mean, cov


def gp_marginal_posterior(
    x_obs: np.ndarray,
    y_obs: np.ndarray,
    phi_low: float,
    phi_high: float,
    sigma_lik: float,
    grid: Grid1D,
    n_phi: int = 101,
    variance: float = 1.0,
):
    """GP posterior with the lengthscale integrated out by the trapezoid rule
    over a dense phi grid under a uniform hyperprior; returns (mean, phi
    grid, normalized weights)."""
    x_obs = np.asarray(x_obs, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    phis = np.linspace(phi_low, phi_high, n_phi)
    loglik = np.empty(n_phi)
    means = np.empty((n_phi, grid.n))
    for i, phi in enumerate(phis):
        spec = RbfSpec(lengthscale=float(phi), variance=variance)
        k_oo = rbf_cross(x_obs, x_obs, spec) + sigma_lik**2 * np.eye(x_obs.size)
        lower = cholesky_lower(k_oo)
        white = solve_triangular(lower, y_obs, lower=True)
        loglik[i] = -0.5 * float(np.sum(white * white)) - float(np.sum(np.log(np.diag(lower))))
        means[i], _ = gp_conjugate_posterior(x_obs, y_obs, float(phi), sigma_lik, grid, variance)
    w = np.exp(loglik - loglik.max())
    trap = np.ones(n_phi)
    trap[0] = trap[-1] = 0.5
    w *= trap
    w /= w.sum()
    return w @ means, phis, w


def pcar_conjugate_posterior(
    graph: AdjacencyGraph,
    alpha: float,
    sigma2: float,
    sigma_lik: float,
    y: np.ndarray,
):
    """Gaussian conjugate posterior for the CAR field at fixed alpha:
    precision (D - alpha W)/sigma2 + I/sigma_lik^2, fully observed y."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (graph.n,):
        raise ShapeError(f"y must have shape ({graph.n},)")
    from .priors import pcar_precision

    prec = pcar_precision(graph, alpha) / sigma2 + np.eye(graph.n) / sigma_lik**2
    lower = cholesky_lower(prec)
    inv_l = solve_triangular(lower, np.eye(graph.n), lower=True)
    cov = inv_l.T @ inv_l
    mean = cov @ (y / sigma_lik**2)
    return mean, cov
