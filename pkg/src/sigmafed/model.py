"""Package a trained checkpoint as a drop-in prior approximation and expose
the two inferential models built on it: the deterministic model (field =
decoder mean) and the auxiliary-variable model (field is Gaussian around
the decoder mean with per-coordinate variance tau^2), plus the tau^2
estimator itself.

Log-joints are evaluated per client and summed, so the federated layer can
reuse the per-client pieces unchanged; every evaluation also returns exact
gradients with respect to the latent point, chained through the encoder
and decoder networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .nn import SeededRng, dense_backward, dense_forward
from .priors import ClientPartition
from .vae import (
    Checkpoint,
    _backward_cached,
    _forward_cached,
    decode_batch,
    encoder_backward,
    encoder_forward,
)

LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "HyperpriorSpec",
    "SigmaPriorModel",
    "ClientData",
    "LatentPoint",
    "Tau2Estimate",
    "split_observations",
    "sample_sigma_prior",
    "det_model_log_joint",
    "aux_model_log_joint",
    "estimate_tau2",
]


def _sigmoid(u):
    return np.where(u >= 0, 1.0 / (1.0 + np.exp(-u)), np.exp(u) / (1.0 + np.exp(u)))


@dataclass(frozen=True)
class HyperpriorSpec:
    """Prior over the conditioning scalar phi, parameterized on the logit scale.

    kind "logit_normal": logit(phi) ~ N(loc, scale) with scale read as a
    variance by default (set scale_is_variance=False to read it as a
    standard deviation). kind "uniform": phi ~ U(low, high), represented
    internally as phi = low + (high - low) * sigmoid(u).
    """

    kind: str
    loc: float = 0.0
    scale: float = 2.0
    scale_is_variance: bool = True
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("logit_normal", "uniform"):
            raise ValueError(f"unknown hyperprior kind '{self.kind}'")
        if self.kind == "logit_normal" and self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.kind == "uniform" and self.high <= self.low:
            raise ValueError("uniform hyperprior needs low < high")

    @property
    def _var(self) -> float:
        return self.scale if self.scale_is_variance else self.scale**2

    def sample_phi(self, rng: SeededRng, size=None) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, size)
        u = self.loc + np.sqrt(self._var) * rng.normal(size)
        return _sigmoid(u)

    def phi_of(self, u: float) -> tuple[float, float]:
        """Map the unconstrained latent to phi; returns (phi, dphi/du)."""
        s = float(_sigmoid(np.asarray(u)))
        if self.kind == "uniform":
            w = self.high - self.low
            return self.low + w * s, w * s * (1.0 - s)
        return s, s * (1.0 - s)

    def u_of(self, phi: float) -> float:
        if self.kind == "uniform":
            p = (phi - self.low) / (self.high - self.low)
        else:
            p = phi
        p = min(max(p, 1e-12), 1.0 - 1e-12)
        return float(np.log(p) - np.log1p(-p))

    def log_prior_u(self, u: float) -> tuple[float, float]:
        """Log density of the unconstrained latent and its derivative.

        For the uniform kind this is the U(low, high) density pushed back
        through the sigmoid (the Jacobian term is all that is left).
        """
        if self.kind == "uniform":
            s = float(_sigmoid(np.asarray(u)))
            return float(np.log(s) + np.log1p(-s)), 1.0 - 2.0 * s
        var = self._var
        r = u - self.loc
        return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * r * r / var, -r / var


@dataclass
class ClientData:
    """One client's observations: positions are local (within-block) indices."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape:
            raise ShapeError("indices and values must have equal length")


def split_observations(partition: ClientPartition, global_indices, values) -> list[ClientData]:
    """Route globally-indexed observations to their owning clients."""
    global_indices = np.asarray(global_indices, dtype=np.intp)
    values = np.asarray(values, dtype=np.float64)
    if global_indices.shape != values.shape:
        raise ShapeError("indices and values must have equal length")
    owner = np.empty(partition.n, dtype=np.intp)
    local = np.empty(partition.n, dtype=np.intp)
    for j, block in enumerate(partition.blocks):
        owner[block] = j
        local[block] = np.arange(block.size)
    if global_indices.size and (global_indices.min() < 0 or global_indices.max() >= partition.n):
        raise ShapeError("observation index outside the field")
    out = []
    for j in range(partition.J):
        sel = owner[global_indices] == j
        out.append(ClientData(indices=local[global_indices[sel]], values=values[sel]))
    return out


@dataclass
class LatentPoint:
    """Inference-time unknowns: scalar logit phi, latents, optional field."""

    logit_phi: float
    z_global: np.ndarray
    z_local: list
    theta: list | None = None


@dataclass
class Tau2Estimate:
    tau2: np.ndarray
    low: float
    high: float
    clipped_fraction: float


@dataclass
class SigmaPriorModel:
    """Trained checkpoint packaged with its inference-time companions."""

    checkpoint: Checkpoint
    hyperprior: HyperpriorSpec
    sigma_lik: float
    partition: ClientPartition

    def __post_init__(self):
        if self.sigma_lik <= 0:
            raise ValueError("sigma_lik must be positive")
        if self.partition.dims != self.checkpoint.config.client_dims:
            raise ShapeError(
                f"partition dims {self.partition.dims} do not match "
                f"checkpoint client dims {self.checkpoint.config.client_dims}"
            )

    @property
    def config(self):
        return self.checkpoint.config

    @property
    def params(self):
        return self.checkpoint.params


def sample_sigma_prior(model: SigmaPriorModel, rng: SeededRng, n: int, phi_fixed: float | None = None):
    """n draws from the prior approximation.

    phi comes from the hyperprior (or is pinned to phi_fixed), z_G from
    N(0, I), each local latent from its learned conditional, and the field
    is the decoder mean with no observation-scale noise added. Returns
    (theta (n, d_total), phi (n,), z_global, z_local list).
    """
    if n < 1:
        raise ValueError("need n >= 1 draws")
    cfg = model.config
    if phi_fixed is None:
        phi = np.asarray(model.hyperprior.sample_phi(rng.derive("phi"), n), dtype=np.float64)
    else:
        phi = np.full(n, float(phi_fixed))
    phi_col = phi.reshape(-1, 1)
    z_g = rng.derive("z_g").normal((n, cfg.global_latent))
    z_locals = []
    enc_in = np.concatenate([z_g, phi_col], axis=1)
    for j in range(cfg.n_clients):
        mu, lv, _ = encoder_forward(model.params.enc_local[j], enc_in)
        eps = rng.derive("z_l", j).normal(mu.shape)
        z_locals.append(mu + np.exp(0.5 * lv) * eps)
    blocks = decode_batch(model.params, z_g, z_locals, phi_col)
    return np.concatenate(blocks, axis=1), phi, z_g, z_locals


def _gauss_terms(x, mu, log_var):
    """Diagonal-Gaussian log density with gradients w.r.t. x, mu, log_var."""
    r = x - mu
    inv = np.exp(-log_var)
    val = -0.5 * float(np.sum(LOG_2PI + log_var + r * r * inv))
    dx = -r * inv
    dlv = -0.5 * (1.0 - r * r * inv)
    return val, dx, -dx, dlv


def _client_term(model: SigmaPriorModel, j: int, u: float, z_g: np.ndarray, z_lj: np.ndarray,
                 data_j: ClientData, theta_j: np.ndarray | None, tau2_j: np.ndarray | None):
    """One client's log-joint contribution and its gradients.

    Covers both inferential models: with theta_j/tau2_j present the field
    is latent (auxiliary-variable model); otherwise the decoder mean feeds
    the likelihood directly. Gradients are returned for (u, z_G, z_Lj and,
    when present, theta_j); everything flows through the local encoder,
    the decoder trunk, and this client's head.
    """
    cfg = model.config
    phi, dphi_du = model.hyperprior.phi_of(u)
    phi_vec = np.array([phi])
    x_in = np.concatenate([z_g, phi_vec])

    mu_l, lv_l, enc_cache = encoder_forward(model.params.enc_local[j], x_in)
    h, dec_cache = _forward_cached(model.params.dec_trunk, x_in)
    head_in = np.concatenate([h, z_lj, phi_vec])
    theta_hat = dense_forward(model.params.dec_heads[j], head_in)

    val, d_zlj, d_mu_l, d_lv_l = _gauss_terms(z_lj, mu_l, lv_l)
    g_theta_hat = np.zeros_like(theta_hat)
    d_theta_j = None
    sig2 = model.sigma_lik**2
    if theta_j is None:
        resid = data_j.values - theta_hat[data_j.indices]
        val += -0.5 * float(np.sum(LOG_2PI + np.log(sig2) + resid * resid / sig2))
        np.add.at(g_theta_hat, data_j.indices, resid / sig2)
    else:
        lt, d_theta, d_that, _ = _gauss_terms(theta_j, theta_hat, np.log(tau2_j))
        val += lt
        g_theta_hat += d_that
        d_theta_j = d_theta
        resid = data_j.values - theta_j[data_j.indices]
        val += -0.5 * float(np.sum(LOG_2PI + np.log(sig2) + resid * resid / sig2))
        np.add.at(d_theta_j, data_j.indices, resid / sig2)

    # decoder head -> (h, z_lj, phi)
    _, g_head_in = dense_backward(model.params.dec_heads[j], head_in, g_theta_hat)
    k = model.params.dec_trunk.out_dim
    g_h = g_head_in[:k]
    d_zlj = d_zlj + g_head_in[k : k + cfg.local_latents[j]]
    g_phi = float(g_head_in[-1])

    # decoder trunk -> (z_G, phi)
    _, g_dec_in = _backward_cached(model.params.dec_trunk, dec_cache, g_h)
    d_zg = g_dec_in[: cfg.global_latent].copy()
    g_phi += float(g_dec_in[-1])

    # local encoder -> (z_G, phi)
    g_enc_in = encoder_backward(model.params.enc_local[j], enc_cache, d_mu_l, d_lv_l, None, "")
    d_zg += g_enc_in[: cfg.global_latent]
    g_phi += float(g_enc_in[-1])

    return val, g_phi * dphi_du, d_zg, d_zlj, d_theta_j


def _global_term(model: SigmaPriorModel, u: float, z_g: np.ndarray):
    """Hyperprior and global-latent prior terms with gradients."""
    val, du = model.hyperprior.log_prior_u(u)
    val += -0.5 * float(np.sum(LOG_2PI + z_g * z_g))
    return val, du, -z_g


def _check_point(model: SigmaPriorModel, point: LatentPoint, want_theta: bool):
    cfg = model.config
    if want_theta and point.theta is None:
        raise ShapeError("this model treats the field as latent; point.theta is required")
    if not want_theta and point.theta is not None:
        raise ShapeError("deterministic model takes no field block; point.theta must be absent")
    if np.shape(point.z_global) != (cfg.global_latent,):
        raise ShapeError(f"z_global must have shape ({cfg.global_latent},)")
    if len(point.z_local) != cfg.n_clients:
        raise ShapeError(f"expected {cfg.n_clients} local latents")
    for j, z in enumerate(point.z_local):
        if np.shape(z) != (cfg.local_latents[j],):
            raise ShapeError(f"z_local[{j}] must have shape ({cfg.local_latents[j]},)")
    if want_theta:
        for j, t in enumerate(point.theta):
            if np.shape(t) != (cfg.client_dims[j],):
                raise ShapeError(f"theta[{j}] must have shape ({cfg.client_dims[j]},)")


def det_model_log_joint(model: SigmaPriorModel, point: LatentPoint, data: list[ClientData]) -> float:
    """Log joint of the deterministic model at the given latent point."""
    _check_point(model, point, want_theta=False)
    val, _, _ = _global_term(model, point.logit_phi, point.z_global)
    for j in range(model.config.n_clients):
        v, _, _, _, _ = _client_term(
            model, j, point.logit_phi, point.z_global, point.z_local[j], data[j], None, None
        )
        val += v
    return val


def aux_model_log_joint(
    model: SigmaPriorModel, tau2: np.ndarray, point: LatentPoint, data: list[ClientData]
) -> float:
    """Log joint of the auxiliary-variable model (field latent, tau^2 fixed)."""
    _check_point(model, point, want_theta=True)
    tau2 = np.asarray(tau2, dtype=np.float64)
    if tau2.shape != (model.config.d_total,):
        raise ShapeError(f"tau2 must have shape ({model.config.d_total},)")
    val, _, _ = _global_term(model, point.logit_phi, point.z_global)
    for j, block in enumerate(model.partition.blocks):
        v, _, _, _, _ = _client_term(
            model, j, point.logit_phi, point.z_global, point.z_local[j],
            data[j], point.theta[j], tau2[block],
        )
        val += v
    return val


def estimate_tau2(true_draws: np.ndarray, sigma_draws: np.ndarray, low: float = 0.01, high: float = 100.0) -> Tau2Estimate:
    """Per-coordinate variance deficit of the prior approximation.

    tau^2 = Var(true draws) - Var(approximation draws), clipped into
    [low, high]; the clipped fraction is reported alongside.
    """
    true_draws = np.asarray(true_draws, dtype=np.float64)
    sigma_draws = np.asarray(sigma_draws, dtype=np.float64)
    if true_draws.ndim != 2 or sigma_draws.ndim != 2:
        raise ShapeError("draw sets must be 2-d (draws x dim)")
    if true_draws.shape[1] != sigma_draws.shape[1]:
        raise ShapeError("draw sets must share their dimension")
    if true_draws.shape[0] < 2 or sigma_draws.shape[0] < 2:
        raise ValueError("need at least 2 draws in each set")
    if not (0 < low <= high):
        raise ValueError("need 0 < low <= high")
    raw = true_draws.var(axis=0, ddof=1) - sigma_draws.var(axis=0, ddof=1)
    tau2 = np.clip(raw, low, high)
    clipped = float(np.mean((raw < low) | (raw > high)))
    return Tau2Estimate(tau2=tau2, low=low, high=high, clipped_fraction=clipped)
