"""Hierarchical VAE with a client-factorized structure.

One global encoder reads the whole field (theta, phi); per-client local
encoders read only (z_G, phi); a shared global decoder pathway produces a
representation h from (z_G, phi), and per-client affine heads map
(h, z_Lj, phi) to that client's block. The training objective is the
conditional-VAE ELBO with analytic Gaussian KL terms and exact
reverse-mode gradients chained through every sub-network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NumericError, ShapeError
from .nn import (
    AdamState,
    DenseLayer,
    Mlp,
    SeededRng,
    _backward_cached,
    _forward_cached,
    adam_step,
    dense_backward,
    dense_forward,
    init_dense,
)

CHECKPOINT_VERSION = 1
ELBO_SMOOTHING_WINDOW = 500

__all__ = [
    "SigmaVaeConfig",
    "EncoderParams",
    "SigmaVaeParams",
    "Checkpoint",
    "init_params",
    "encode_global",
    "encode_local",
    "decode",
    "decode_batch",
    "elbo_minibatch",
    "train",
    "smoothed_trace",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class SigmaVaeConfig:
    """Architecture and training hyperparameters.

    client_dims are the per-client block widths d_j (their sum is the
    field dimension); local_latents has one latent width per client.
    gamma is the fixed decoder noise standard deviation.
    """

    client_dims: tuple[int, ...]
    global_latent: int
    local_latents: tuple[int, ...]
    enc_global_hidden: int
    enc_local_hidden: int
    dec_hidden: int
    gamma: float
    iterations: int
    batch_size: int
    learning_rate: float
    seed: int
    phi_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "client_dims", tuple(int(d) for d in self.client_dims))
        object.__setattr__(self, "local_latents", tuple(int(p) for p in self.local_latents))
        if len(self.client_dims) < 1:
            raise ValueError("need at least one client")
        if len(self.local_latents) != len(self.client_dims):
            raise ValueError("need one local latent width per client")
        dims = (
            self.client_dims
            + self.local_latents
            + (self.global_latent, self.enc_global_hidden, self.enc_local_hidden, self.dec_hidden, self.phi_dim)
        )
        if any(d <= 0 for d in dims):
            raise ValueError("all dimensions must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    @property
    def n_clients(self) -> int:
        return len(self.client_dims)

    @property
    def d_total(self) -> int:
        return int(sum(self.client_dims))

    def to_dict(self) -> dict:
        return {
            "client_dims": list(self.client_dims),
            "global_latent": self.global_latent,
            "local_latents": list(self.local_latents),
            "enc_global_hidden": self.enc_global_hidden,
            "enc_local_hidden": self.enc_local_hidden,
            "dec_hidden": self.dec_hidden,
            "gamma": self.gamma,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "phi_dim": self.phi_dim,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SigmaVaeConfig":
        try:
            return cls(
                client_dims=tuple(doc["client_dims"]),
                global_latent=int(doc["global_latent"]),
                local_latents=tuple(doc["local_latents"]),
                enc_global_hidden=int(doc["enc_global_hidden"]),
                enc_local_hidden=int(doc["enc_local_hidden"]),
                dec_hidden=int(doc["dec_hidden"]),
                gamma=float(doc["gamma"]),
                iterations=int(doc["iterations"]),
                batch_size=int(doc["batch_size"]),
                learning_rate=float(doc["learning_rate"]),
                seed=int(doc["seed"]),
                phi_dim=int(doc.get("phi_dim", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad VAE config: {exc}") from exc


@dataclass
class EncoderParams:
    """Two-layer trunk plus affine mean / log-variance heads.

    The trunk applies ReLU only between its two layers, so the heads read
    an unrectified representation.
    """

    trunk: Mlp
    head_mu: DenseLayer
    head_logvar: DenseLayer


@dataclass
class SigmaVaeParams:
    enc_global: EncoderParams
    enc_local: list[EncoderParams]
    dec_trunk: Mlp
    dec_heads: list[DenseLayer]

    def param_dict(self) -> dict[str, np.ndarray]:
        """Flat name -> array view over every trainable tensor."""
        out: dict[str, np.ndarray] = {}

        def add_encoder(prefix: str, enc: EncoderParams):
            for i, layer in enumerate(enc.trunk.layers):
                out[f"{prefix}.l{i}.w"] = layer.weights
                out[f"{prefix}.l{i}.b"] = layer.bias
            out[f"{prefix}.mu.w"] = enc.head_mu.weights
            out[f"{prefix}.mu.b"] = enc.head_mu.bias
            out[f"{prefix}.lv.w"] = enc.head_logvar.weights
            out[f"{prefix}.lv.b"] = enc.head_logvar.bias

        add_encoder("enc_g", self.enc_global)
        for j, enc in enumerate(self.enc_local):
            add_encoder(f"enc_l{j}", enc)
        for i, layer in enumerate(self.dec_trunk.layers):
            out[f"dec.l{i}.w"] = layer.weights
            out[f"dec.l{i}.b"] = layer.bias
        for j, head in enumerate(self.dec_heads):
            out[f"dec_head{j}.w"] = head.weights
            out[f"dec_head{j}.b"] = head.bias
        return out


@dataclass
class Checkpoint:
    config: SigmaVaeConfig
    params: SigmaVaeParams
    metadata: dict = field(default_factory=dict)


def _init_encoder(rng: SeededRng, in_dim: int, hidden: int, out_dim: int) -> EncoderParams:
    return EncoderParams(
        trunk=Mlp([init_dense(rng.derive(0), hidden, in_dim), init_dense(rng.derive(1), hidden, hidden)]),
        head_mu=init_dense(rng.derive(2), out_dim, hidden),
        head_logvar=init_dense(rng.derive(3), out_dim, hidden),
    )


def init_params(config: SigmaVaeConfig) -> SigmaVaeParams:
    """Fan-based uniform init, fully determined by config.seed."""
    rng = SeededRng(config.seed).derive("init")
    enc_g = _init_encoder(
        rng.derive("enc_g"), config.d_total + config.phi_dim, config.enc_global_hidden, config.global_latent
    )
    enc_l = [
        _init_encoder(
            rng.derive("enc_l", j),
            config.global_latent + config.phi_dim,
            config.enc_local_hidden,
            config.local_latents[j],
        )
        for j in range(config.n_clients)
    ]
    dec_in = config.global_latent + config.phi_dim
    dec_trunk = Mlp(
        [
            init_dense(rng.derive("dec", 0), config.dec_hidden, dec_in),
            init_dense(rng.derive("dec", 1), config.dec_hidden, config.dec_hidden),
        ]
    )
    dec_heads = [
        init_dense(
            rng.derive("dec_head", j),
            config.client_dims[j],
            config.dec_hidden + config.local_latents[j] + config.phi_dim,
        )
        for j in range(config.n_clients)
    ]
    return SigmaVaeParams(enc_g, enc_l, dec_trunk, dec_heads)


def encoder_forward(enc: EncoderParams, x: np.ndarray):
    """(mu, log_var) heads on the trunk representation; batch or vector."""
    f, cache = _forward_cached(enc.trunk, x)
    return dense_forward(enc.head_mu, f), dense_forward(enc.head_logvar, f), (cache, f)


def encoder_backward(
    enc: EncoderParams,
    cache,
    g_mu: np.ndarray,
    g_logvar: np.ndarray,
    grads: dict | None,
    prefix: str,
) -> np.ndarray:
    """Chain head gradients through the trunk; returns the input gradient.

    Parameter gradients are accumulated into `grads` under `prefix` when a
    dict is supplied; pass None to get input gradients only.
    """
    trunk_cache, f = cache
    (dmu_w, dmu_b), g_f_mu = dense_backward(enc.head_mu, f, g_mu)
    (dlv_w, dlv_b), g_f_lv = dense_backward(enc.head_logvar, f, g_logvar)
    layer_grads, g_x = _backward_cached(enc.trunk, trunk_cache, g_f_mu + g_f_lv)
    if grads is not None:
        grads[f"{prefix}.mu.w"] += dmu_w
        grads[f"{prefix}.mu.b"] += dmu_b
        grads[f"{prefix}.lv.w"] += dlv_w
        grads[f"{prefix}.lv.b"] += dlv_b
        for i, (dw, db) in enumerate(layer_grads):
            grads[f"{prefix}.l{i}.w"] += dw
            grads[f"{prefix}.l{i}.b"] += db
    return g_x


def encode_global(params: SigmaVaeParams, theta_all: np.ndarray, phi: np.ndarray):
    """Variational (mu, log_var) for the global latent given the full field."""
    x = np.concatenate([np.asarray(theta_all, dtype=np.float64), np.atleast_1d(phi)])
    if x.shape[-1] != params.enc_global.trunk.in_dim:
        raise ShapeError(
            f"global encoder expects input dim {params.enc_global.trunk.in_dim}, got {x.shape[-1]}"
        )
    mu, lv, _ = encoder_forward(params.enc_global, x)
    return mu, lv


def encode_local(enc_j: EncoderParams, z_g: np.ndarray, phi: np.ndarray):
    """Variational (mu, log_var) for one client's latent; reads only (z_G, phi)."""
    x = np.concatenate([np.asarray(z_g, dtype=np.float64), np.atleast_1d(phi)])
    if x.shape[-1] != enc_j.trunk.in_dim:
        raise ShapeError(f"local encoder expects input dim {enc_j.trunk.in_dim}, got {x.shape[-1]}")
    mu, lv, _ = encoder_forward(enc_j, x)
    return mu, lv


def decode(params: SigmaVaeParams, z_g: np.ndarray, z_locals, phi: np.ndarray) -> list[np.ndarray]:
    """Decoder mean blocks, one per client, for a single latent point."""
    if len(z_locals) != len(params.dec_heads):
        raise ShapeError(f"expected {len(params.dec_heads)} local latents, got {len(z_locals)}")
    phi = np.atleast_1d(phi)
    h, _ = _forward_cached(params.dec_trunk, np.concatenate([z_g, phi]))
    return [
        dense_forward(head, np.concatenate([h, z_j, phi]))
        for head, z_j in zip(params.dec_heads, z_locals)
    ]


def decode_batch(params: SigmaVaeParams, z_g: np.ndarray, z_locals, phi: np.ndarray) -> list[np.ndarray]:
    """Batched decode; rows are independent draws."""
    h, _ = _forward_cached(params.dec_trunk, np.concatenate([z_g, phi], axis=1))
    return [
        dense_forward(head, np.concatenate([h, z_j, phi], axis=1))
        for head, z_j in zip(params.dec_heads, z_locals)
    ]


def _zero_grads(params: SigmaVaeParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.param_dict().items()}


def elbo_minibatch(
    params: SigmaVaeParams,
    config: SigmaVaeConfig,
    phi_batch: np.ndarray,
    theta_batch: np.ndarray,
    rng: SeededRng,
):
    """Single-sample ELBO estimate averaged over the batch, plus exact
    reverse-mode gradients of that estimate for every parameter tensor.

    The reconstruction term is the Gaussian log-likelihood with fixed
    noise scale gamma; both KL terms (global, and local conditional on
    the sampled global latent) are analytic.
    """
    phi_batch = np.atleast_2d(np.asarray(phi_batch, dtype=np.float64))
    theta_batch = np.atleast_2d(np.asarray(theta_batch, dtype=np.float64))
    if phi_batch.shape[0] == 1 and theta_batch.shape[0] > 1:
        phi_batch = phi_batch.T
    b = theta_batch.shape[0]
    if b == 0:
        raise ShapeError("batch must be nonempty")
    if theta_batch.shape[1] != config.d_total or phi_batch.shape[1] != config.phi_dim:
        raise ShapeError(
            f"batch dims ({phi_batch.shape[1]}, {theta_batch.shape[1]}) do not match "
            f"config ({config.phi_dim}, {config.d_total})"
        )
    gamma2 = config.gamma**2
    scale = 1.0 / b
    offsets = np.concatenate([[0], np.cumsum(config.client_dims)])

    # forward
    enc_in = np.concatenate([theta_batch, phi_batch], axis=1)
    mu_g, lv_g, cache_g = encoder_forward(params.enc_global, enc_in)
    eps_g = rng.normal((b, config.global_latent))
    z_g = mu_g + np.exp(0.5 * lv_g) * eps_g
    kl_g = 0.5 * np.sum(mu_g**2 + np.exp(lv_g) - 1.0 - lv_g, axis=1)

    dec_in = np.concatenate([z_g, phi_batch], axis=1)
    h, cache_dec = _forward_cached(params.dec_trunk, dec_in)

    per_datum = -kl_g.copy()
    locals_fwd = []
    for j in range(config.n_clients):
        mu_j, lv_j, cache_j = encoder_forward(params.enc_local[j], dec_in)
        eps_j = rng.normal((b, config.local_latents[j]))
        z_j = mu_j + np.exp(0.5 * lv_j) * eps_j
        kl_j = 0.5 * np.sum(mu_j**2 + np.exp(lv_j) - 1.0 - lv_j, axis=1)
        head_in = np.concatenate([h, z_j, phi_batch], axis=1)
        theta_hat = dense_forward(params.dec_heads[j], head_in)
        resid = theta_batch[:, offsets[j] : offsets[j + 1]] - theta_hat
        d_j = config.client_dims[j]
        recon = -0.5 * d_j * np.log(2.0 * np.pi * gamma2) - np.sum(resid**2, axis=1) / (2.0 * gamma2)
        per_datum += recon - kl_j
        locals_fwd.append((mu_j, lv_j, cache_j, eps_j, z_j, head_in, resid))

    if not np.all(np.isfinite(per_datum)):
        bad = int(np.flatnonzero(~np.isfinite(per_datum))[0])
        raise NumericError(f"non-finite ELBO at batch index {bad}")
    elbo = float(per_datum.mean())

    # backward
    grads = _zero_grads(params)
    g_h = np.zeros_like(h)
    g_zg = np.zeros((b, config.global_latent))
    for j in range(config.n_clients):
        mu_j, lv_j, cache_j, eps_j, z_j, head_in, resid = locals_fwd[j]
        g_theta_hat = (resid / gamma2) * scale
        (dw, db), g_head_in = dense_backward(params.dec_heads[j], head_in, g_theta_hat)
        grads[f"dec_head{j}.w"] += dw
        grads[f"dec_head{j}.b"] += db
        k = params.dec_trunk.out_dim
        g_h += g_head_in[:, :k]
        g_zj = g_head_in[:, k : k + config.local_latents[j]]
        g_mu_j = g_zj - mu_j * scale
        g_lv_j = g_zj * (0.5 * np.exp(0.5 * lv_j) * eps_j) - 0.5 * (np.exp(lv_j) - 1.0) * scale
        g_loc_in = encoder_backward(params.enc_local[j], cache_j, g_mu_j, g_lv_j, grads, f"enc_l{j}")
        g_zg += g_loc_in[:, : config.global_latent]

    dec_layer_grads, g_dec_in = _backward_cached(params.dec_trunk, cache_dec, g_h)
    for i, (dw, db) in enumerate(dec_layer_grads):
        grads[f"dec.l{i}.w"] += dw
        grads[f"dec.l{i}.b"] += db
    g_zg += g_dec_in[:, : config.global_latent]

    g_mu_g = g_zg - mu_g * scale
    g_lv_g = g_zg * (0.5 * np.exp(0.5 * lv_g) * eps_g) - 0.5 * (np.exp(lv_g) - 1.0) * scale
    encoder_backward(params.enc_global, cache_g, g_mu_g, g_lv_g, grads, "enc_g")
    return elbo, grads


def smoothed_trace(trace: np.ndarray, window: int = ELBO_SMOOTHING_WINDOW) -> np.ndarray:
    """Trailing moving average; shorter prefix windows average what exists."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size == 0:
        return trace
    csum = np.concatenate([[0.0], np.cumsum(trace)])
    idx = np.arange(1, trace.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def train(
    config: SigmaVaeConfig,
    phi: np.ndarray,
    theta: np.ndarray,
    rng: SeededRng | None = None,
) -> tuple[Checkpoint, np.ndarray]:
    """Adam over shuffled minibatches for config.iterations steps.

    Fully deterministic given config.seed (init, shuffling, and latent
    noise all derive from it). Returns the checkpoint and the raw
    per-iteration ELBO trace.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if phi.shape[0] == 1 and theta.shape[0] > 1:
        phi = phi.T
    if theta.shape[1] != config.d_total or phi.shape[1] != config.phi_dim:
        raise ShapeError(
            f"dataset dims ({phi.shape[1]}, {theta.shape[1]}) do not match "
            f"config ({config.phi_dim}, {config.d_total})"
        )
    n = theta.shape[0]
    if rng is None:
        rng = SeededRng(config.seed)
    params = init_params(config)
    adam = AdamState(params.param_dict(), lr=config.learning_rate)
    trace = np.empty(config.iterations)

    perm = None
    pos = 0
    epoch = 0
    pdict = params.param_dict()
    for it in range(config.iterations):
        if perm is None or pos >= n:
            perm = rng.derive("shuffle", epoch).permutation(n)
            pos = 0
            epoch += 1
        idx = perm[pos : pos + config.batch_size]
        pos += config.batch_size
        try:
            elbo, grads = elbo_minibatch(params, config, phi[idx], theta[idx], rng.derive("noise", it))
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from exc
        trace[it] = elbo
        for g in grads.values():
            np.negative(g, out=g)
        adam_step(adam, pdict, grads)

    smoothed = smoothed_trace(trace)
    metadata = {
        "iterations": int(config.iterations),
        "final_smoothed_elbo": float(smoothed[-1]) if config.iterations > 0 else None,
        "seed": int(config.seed),
    }
    return Checkpoint(config=config, params=params, metadata=metadata), trace


def _params_to_doc(params: SigmaVaeParams) -> dict:
    doc = {}
    for name, arr in params.param_dict().items():
        doc[name] = {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
    return doc


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "params": _params_to_doc(ckpt.params),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    """Lossless inverse of save_checkpoint; validates version and shapes."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except ValueError as exc:
            raise FormatError(f"malformed checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"checkpoint {path} has version {doc.get('version') if isinstance(doc, dict) else '?'}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    config = SigmaVaeConfig.from_dict(doc.get("config", {}))
    params = init_params(config)
    stored = doc.get("params", {})
    for name, arr in params.param_dict().items():
        if name not in stored:
            raise FormatError(f"checkpoint {path} missing tensor '{name}'")
        entry = stored[name]
        if tuple(entry.get("shape", ())) != arr.shape:
            raise FormatError(f"checkpoint {path} tensor '{name}' has shape {entry.get('shape')}, expected {list(arr.shape)}")
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != arr.size:
            raise FormatError(f"checkpoint {path} tensor '{name}' has {data.size} values, expected {arr.size}")
        arr[...] = data.reshape(arr.shape)
    return Checkpoint(config=config, params=params, metadata=doc.get("metadata", {}))
