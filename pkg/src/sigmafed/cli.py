"""Command-line surface: dataset generation, training, covariance and
posterior evaluation, variance-deficit estimation, and inference in
centralized or federated mode.

Every command is a pure function of (config file, input files, seed):
reruns produce byte-identical outputs, including the rendered figures. All
reports embed the config hash, the seed, and the package version.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError, NumericError, ShapeError, SigmaFedError
from .figures import (
    covariance_figure,
    difference_figure,
    field_comparison_figure,
    posterior_band_figure,
    prior_draws_figure,
    trace_figure,
)
from .inference import (
    SigmaModelTarget,
    federation_approx,
    gp_conjugate_posterior,
    make_federation,
    mfvi_fit,
    pcar_conjugate_posterior,
    sfvi_round,
)
from .model import (
    HyperpriorSpec,
    SigmaPriorModel,
    estimate_tau2,
    sample_sigma_prior,
    split_observations,
)
from .nn import SeededRng
from .priors import (
    ClientPartition,
    GpPrior,
    Grid1D,
    PcarPrior,
    PcarSpec,
    generate_training_set,
    load_dataset,
    load_graph,
    partition_graph,
    partition_grid,
    sample_pcar,
    save_dataset,
)
from .vae import load_checkpoint, save_checkpoint, smoothed_trace, train, SigmaVaeConfig
from .vae import decode_batch

POSTERIOR_VERSION = 1


# ---------------------------------------------------------------------------
# config plumbing


def _fail(msg: str):
    raise ConfigError(msg)


def _require_keys(doc: dict, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(doc, dict):
        _fail(f"{where} must be a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        _fail(f"{where} has unknown keys: {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        _fail(f"{where} is missing required keys: {sorted(missing)}")


def load_config(path: Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _resolve(path_str: str, base: Path) -> Path:
    p = Path(path_str)
    return p if p.is_absolute() else base / p


def _build_grid(section, where) -> Grid1D:
    _require_keys(section, {"n", "low", "high"}, {"n"}, where)
    return Grid1D.equidistant(int(section["n"]), float(section.get("low", 0.0)), float(section.get("high", 1.0)))


def _build_prior(section, base: Path, where="prior"):
    """Returns (prior, grid_or_None, graph_or_None, labels_or_None)."""
    _require_keys(section, {"kind", "grid", "graph", "variance", "sigma2"}, {"kind"}, where)
    kind = section["kind"]
    if kind == "gp":
        if "grid" not in section:
            _fail(f"{where}: gp prior needs a grid")
        grid = _build_grid(section["grid"], f"{where}.grid")
        return GpPrior(grid, float(section.get("variance", 1.0))), grid, None, None
    if kind == "pcar":
        if "graph" not in section:
            _fail(f"{where}: pcar prior needs a graph path")
        graph, labels = load_graph(_resolve(section["graph"], base))
        return PcarPrior(graph, float(section.get("sigma2", 1.0))), None, graph, labels
    _fail(f"{where}: unknown prior kind '{kind}'")


def _build_partition(section, base: Path, where="partition"):
    """Returns (partition, grid_or_None, graph_or_None)."""
    _require_keys(section, {"kind", "n", "low", "high", "boundaries", "graph"}, {"kind"}, where)
    if section["kind"] == "grid":
        grid = _build_grid({k: section[k] for k in ("n", "low", "high") if k in section}, where)
        part = partition_grid(grid, tuple(section.get("boundaries", ())))
        return part, grid, None
    if section["kind"] == "graph":
        if "graph" not in section:
            _fail(f"{where}: graph partition needs a graph path")
        graph, labels = load_graph(_resolve(section["graph"], base))
        if labels is None:
            _fail(f"{where}: graph file has no client labels")
        return partition_graph(graph, labels), None, graph
    _fail(f"{where}: unknown partition kind '{section['kind']}'")


def _build_hyperprior(section, where="hyperprior") -> HyperpriorSpec:
    _require_keys(
        section, {"kind", "loc", "scale", "scale_is_variance", "low", "high"}, {"kind"}, where
    )
    try:
        return HyperpriorSpec(
            kind=section["kind"],
            loc=float(section.get("loc", 0.0)),
            scale=float(section.get("scale", 2.0)),
            scale_is_variance=bool(section.get("scale_is_variance", True)),
            low=float(section.get("low", 0.0)),
            high=float(section.get("high", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_observations(path: Path):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read observations {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"observations {path} are not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "indices" not in doc or "values" not in doc:
        raise FormatError(f"observations {path} need 'indices' and 'values'")
    idx = np.asarray(doc["indices"], dtype=np.intp)
    vals = np.asarray(doc["values"], dtype=np.float64)
    if idx.shape != vals.shape or idx.ndim != 1:
        raise FormatError(f"observations {path}: indices/values must be equal-length lists")
    if idx.size == 0:
        raise FormatError(f"observations {path}: zero-length data rejected")
    return idx, vals


def save_observations(path: Path, indices, values) -> None:
    doc = {"indices": [int(i) for i in indices], "values": [float(v) for v in values]}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_report(out_dir: Path, name: str, metrics: dict, vectors: dict | None = None) -> None:
    """Emit <name>.json and <name>.csv; vectors become indexed CSV rows."""
    vectors = vectors or {}
    doc = {"metrics": metrics, "vectors": {k: np.asarray(v).tolist() for k, v in vectors.items()}}
    (out_dir / f"{name}.json").write_text(json.dumps(doc, sort_keys=True, default=_json_default) + "\n")
    lines = ["name,index,value"]
    for key in sorted(metrics):
        val = metrics[key]
        if isinstance(val, (int, float, np.floating, np.integer, bool)):
            lines.append(f"{key},,{val!r}")
        else:
            lines.append(f"{key},,{json.dumps(val, sort_keys=True, default=_json_default)!r}")
    for key in sorted(vectors):
        arr = np.asarray(vectors[key], dtype=np.float64).ravel()
        for i, v in enumerate(arr):
            lines.append(f"{key},{i},{float(v)!r}")
    (out_dir / f"{name}.csv").write_text("\n".join(lines) + "\n")


def _base_metrics(cfg_doc: dict, seed: int) -> dict:
    return {"config_hash": config_hash(cfg_doc), "seed": int(seed), "version": __version__}


# ---------------------------------------------------------------------------
# commands


def cmd_sample_prior(cfg: dict, base: Path, out: Path, seed: int) -> None:
    _require_keys(
        cfg,
        {"kind", "grid", "graph", "variance", "sigma2", "n_draws", "phi_low", "phi_high", "seed"},
        {"kind", "n_draws", "phi_low", "phi_high"},
        "config",
    )
    prior, grid, graph, _ = _build_prior(
        {k: cfg[k] for k in ("kind", "grid", "graph", "variance", "sigma2") if k in cfg}, base, "config"
    )
    n_draws = int(cfg["n_draws"])
    phi, theta = generate_training_set(
        SeededRng(seed).derive("data"), prior, (float(cfg["phi_low"]), float(cfg["phi_high"])), n_draws
    )
    save_dataset(out / "dataset.csv", phi, theta)
    metrics = _base_metrics(cfg, seed)
    metrics.update(
        {
            "n_draws": n_draws,
            "dim": int(theta.shape[1]),
            "phi_low": float(cfg["phi_low"]),
            "phi_high": float(cfg["phi_high"]),
            "kind": cfg["kind"],
        }
    )
    write_report(out, "sample_prior_report", metrics)


def _vae_config_from(cfg: dict, client_dims, seed: int) -> SigmaVaeConfig:
    sec = cfg["vae"]
    _require_keys(
        sec,
        {
            "global_latent",
            "local_latents",
            "hidden",
            "enc_global_hidden",
            "enc_local_hidden",
            "dec_hidden",
            "gamma",
            "iterations",
            "batch_size",
            "learning_rate",
        },
        {"global_latent", "local_latents", "gamma", "iterations", "batch_size", "learning_rate"},
        "config.vae",
    )
    locs = sec["local_latents"]
    if isinstance(locs, int):
        locs = [locs] * len(client_dims)
    if len(locs) != len(client_dims):
        _fail("config.vae.local_latents must match the number of clients")
    hidden = int(sec.get("hidden", 16))
    try:
        return SigmaVaeConfig(
            client_dims=tuple(int(d) for d in client_dims),
            global_latent=int(sec["global_latent"]),
            local_latents=tuple(int(p) for p in locs),
            enc_global_hidden=int(sec.get("enc_global_hidden", hidden)),
            enc_local_hidden=int(sec.get("enc_local_hidden", hidden)),
            dec_hidden=int(sec.get("dec_hidden", hidden)),
            gamma=float(sec["gamma"]),
            iterations=int(sec["iterations"]),
            batch_size=int(sec["batch_size"]),
            learning_rate=float(sec["learning_rate"]),
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"config.vae: {exc}") from exc


def cmd_train(cfg: dict, base: Path, out: Path, seed: int) -> None:
    _require_keys(cfg, {"dataset", "partition", "vae", "seed"}, {"dataset", "partition", "vae"}, "config")
    partition, _, _ = _build_partition(cfg["partition"], base)
    phi, theta = load_dataset(_resolve(cfg["dataset"], base))
    if theta.shape[1] != partition.n:
        _fail(f"dataset dim {theta.shape[1]} does not match partition size {partition.n}")
    vae_cfg = _vae_config_from(cfg, partition.dims, seed)
    ckpt, trace = train(vae_cfg, phi, theta)
    ckpt.metadata["train_phi_range"] = [float(phi.min()), float(phi.max())]
    save_checkpoint(ckpt, out / "checkpoint.json")
    sm = smoothed_trace(trace)
    with open(out / "trace.csv", "w") as fh:
        for i in range(trace.size):
            fh.write(f"{i},{trace[i]!r},{sm[i]!r}\n")
    trace_figure(out / "trace.png", trace, sm)
    metrics = _base_metrics(cfg, seed)
    metrics.update(
        {
            "iterations": int(vae_cfg.iterations),
            "final_smoothed_elbo": ckpt.metadata["final_smoothed_elbo"],
            "smoothed_elbo_at_100": float(sm[99]) if trace.size >= 100 else None,
        }
    )
    write_report(out, "train_report", metrics)


def _blocks_from_dims(dims) -> ClientPartition:
    offsets = np.concatenate([[0], np.cumsum(dims)])
    return ClientPartition(tuple(np.arange(offsets[j], offsets[j + 1]) for j in range(len(dims))))


def _true_covariance(prior, phi: float) -> np.ndarray:
    return prior.covariance(min(max(float(phi), 1e-9), 1.0 - 1e-9) if isinstance(prior, PcarPrior) else float(phi))


def _boundary_pairs(partition: ClientPartition, graph) -> list[tuple[int, int]]:
    """Adjacent index pairs straddling client boundaries."""
    if graph is None:
        pairs = []
        for j in range(partition.J - 1):
            pairs.append((int(partition.blocks[j][-1]), int(partition.blocks[j + 1][0])))
        return pairs
    owner = np.empty(partition.n, dtype=np.intp)
    for j, block in enumerate(partition.blocks):
        owner[block] = j
    pairs = []
    for i in range(graph.n):
        for k in graph.neighbors[i]:
            if i < k and owner[i] != owner[k]:
                pairs.append((i, int(k)))
    return pairs


def cmd_eval_cov(cfg: dict, base: Path, out: Path, seed: int) -> None:
    _require_keys(
        cfg, {"checkpoint", "phis", "n_draws", "prior", "draw_figure_count", "seed"},
        {"checkpoint", "phis", "n_draws", "prior"}, "config",
    )
    ckpt = load_checkpoint(_resolve(cfg["checkpoint"], base))
    prior, grid, graph, labels = _build_prior(cfg["prior"], base)
    if prior.dim != ckpt.config.d_total:
        _fail(f"prior dim {prior.dim} does not match checkpoint dim {ckpt.config.d_total}")
    if graph is not None and labels is not None:
        partition = partition_graph(graph, labels)
    else:
        partition = _blocks_from_dims(ckpt.config.client_dims)
    if partition.dims != ckpt.config.client_dims:
        _fail("partition dims do not match checkpoint client dims")
    model = SigmaPriorModel(
        checkpoint=ckpt,
        hyperprior=HyperpriorSpec(kind="uniform", low=0.0, high=1.0),
        sigma_lik=1.0,
        partition=partition,
    )
    n = int(cfg["n_draws"])
    rng = SeededRng(seed)
    phi_range = ckpt.metadata.get("train_phi_range")
    pairs = _boundary_pairs(partition, graph)

    metrics = _base_metrics(cfg, seed)
    vectors = {}
    true_covs, emp_covs = [], []
    per_phi = []
    for i, phi in enumerate(cfg["phis"]):
        phi = float(phi)
        k_true = _true_covariance(prior, phi)
        draws, _, _, _ = sample_sigma_prior(model, rng.derive("sigma", i), n, phi_fixed=phi)
        c_emp = np.cov(draws, rowvar=False)
        err = float(np.linalg.norm(c_emp - k_true, "fro") / np.linalg.norm(k_true, "fro"))
        true_draw_rng = rng.derive("true", i)
        true_draws = np.stack([prior.sample(true_draw_rng.derive(t), phi) for t in range(n)])
        base_err = float(
            np.linalg.norm(np.cov(true_draws, rowvar=False) - k_true, "fro") / np.linalg.norm(k_true, "fro")
        )
        sd_emp = np.sqrt(np.diag(c_emp))
        sd_true = np.sqrt(np.diag(k_true))
        pair_stats = []
        for (a, b) in pairs:
            emp = float(c_emp[a, b] / (sd_emp[a] * sd_emp[b]))
            tru = float(k_true[a, b] / (sd_true[a] * sd_true[b]))
            pair_stats.append({"i": a, "j": b, "empirical": emp, "true": tru, "abs_diff": abs(emp - tru)})
        out_of_range = bool(phi_range and not (phi_range[0] <= phi <= phi_range[1]))
        per_phi.append(
            {
                "phi": phi,
                "relative_frobenius_error": err,
                "mc_baseline_error": base_err,
                "error_ratio": err / base_err,
                "boundary_pairs": pair_stats,
                "max_boundary_abs_diff": max((p["abs_diff"] for p in pair_stats), default=0.0),
                "outside_training_range": out_of_range,
            }
        )
        vectors[f"marginal_sd_phi{i}"] = sd_emp
        true_covs.append(k_true)
        emp_covs.append(c_emp)
    metrics["per_phi"] = per_phi
    metrics["n_draws"] = n
    covariance_figure(out / "covariance.png", [p["phi"] for p in per_phi], true_covs, emp_covs)
    if grid is not None:
        n_fig = int(cfg.get("draw_figure_count", 25))
        lo, hi = (phi_range if phi_range else (0.2, 1.0))
        fig_model = SigmaPriorModel(
            checkpoint=ckpt,
            hyperprior=HyperpriorSpec(kind="uniform", low=float(lo), high=float(hi)),
            sigma_lik=1.0,
            partition=partition,
        )
        draws, phis_fig, _, _ = sample_sigma_prior(fig_model, rng.derive("figure"), n_fig)
        bounds = [grid.points[partition.blocks[j][-1]] for j in range(partition.J - 1)]
        prior_draws_figure(out / "prior_draws.png", grid.points, draws, phis_fig, bounds)
    write_report(out, "eval_cov_report", metrics, vectors)


def cmd_estimate_tau2(cfg: dict, base: Path, out: Path, seed: int) -> None:
    _require_keys(
        cfg, {"checkpoint", "prior", "hyperprior", "n_draws", "clip", "seed"},
        {"checkpoint", "prior", "hyperprior", "n_draws"}, "config",
    )
    ckpt = load_checkpoint(_resolve(cfg["checkpoint"], base))
    prior, _, graph, labels = _build_prior(cfg["prior"], base)
    if prior.dim != ckpt.config.d_total:
        _fail(f"prior dim {prior.dim} does not match checkpoint dim {ckpt.config.d_total}")
    hyper = _build_hyperprior(cfg["hyperprior"])
    clip = cfg.get("clip", [0.01, 100.0])
    if len(clip) != 2:
        _fail("config.clip must be [low, high]")
    partition = (
        partition_graph(graph, labels)
        if graph is not None and labels is not None
        else _blocks_from_dims(ckpt.config.client_dims)
    )
    model = SigmaPriorModel(checkpoint=ckpt, hyperprior=hyper, sigma_lik=1.0, partition=partition)
    n = int(cfg["n_draws"])
    rng = SeededRng(seed)
    sigma_draws, _, _, _ = sample_sigma_prior(model, rng.derive("sigma"), n)
    true_draws = np.empty((n, prior.dim))
    for i in range(n):
        r = rng.derive("true", i)
        true_draws[i] = prior.sample(r.derive("draw"), float(hyper.sample_phi(r.derive("phi"))))
    est = estimate_tau2(true_draws, sigma_draws, float(clip[0]), float(clip[1]))
    save_dataset(out / "tau2.csv", np.zeros((1, 0)), est.tau2[None, :])
    metrics = _base_metrics(cfg, seed)
    metrics.update(
        {
            "clip_low": est.low,
            "clip_high": est.high,
            "clipped_fraction": est.clipped_fraction,
            "tau2_mean": float(est.tau2.mean()),
            "tau2_min": float(est.tau2.min()),
            "tau2_max": float(est.tau2.max()),
            "n_draws": n,
        }
    )
    write_report(out, "estimate_tau2_report", metrics, {"tau2": est.tau2})


def _load_tau2(path: Path, dim: int) -> np.ndarray:
    phi, rows = load_dataset(path)
    if rows.shape != (1, dim):
        raise FormatError(f"tau2 file {path} must hold one row of {dim} values")
    return rows[0]


def _posterior_summaries(model, approx, variant, pushforward_draws, rng, sigma_lik):
    """Per-coordinate posterior mean/sd and 90% intervals of the field, plus
    predictive intervals that include the likelihood noise."""
    cfg = model.config
    d = cfg.d_total
    if variant == "deterministic":
        n = pushforward_draws
        eps = {nm: rng.derive("pf", nm).normal((n, approx.blocks[nm].mu.size)) for nm in approx.blocks}
        draws_u = approx.blocks["logit_phi"].mu[0] + np.exp(approx.blocks["logit_phi"].log_sigma[0]) * eps["logit_phi"][:, 0]
        phis = np.array([model.hyperprior.phi_of(float(u))[0] for u in draws_u]).reshape(-1, 1)
        z_g = approx.blocks["z_G"].mu + np.exp(approx.blocks["z_G"].log_sigma) * eps["z_G"]
        z_l = [
            approx.blocks[f"z_L{j}"].mu + np.exp(approx.blocks[f"z_L{j}"].log_sigma) * eps[f"z_L{j}"]
            for j in range(cfg.n_clients)
        ]
        field = np.empty((n, d))
        blocks = decode_batch(model.params, z_g, z_l, phis)
        for j, block in enumerate(model.partition.blocks):
            field[:, block] = blocks[j]
        pred = field + sigma_lik * rng.derive("pf", "lik").normal(field.shape)
        return {
            "mean": field.mean(axis=0),
            "sd": field.std(axis=0, ddof=1),
            "q05": np.quantile(field, 0.05, axis=0),
            "q95": np.quantile(field, 0.95, axis=0),
            "pred_q05": np.quantile(pred, 0.05, axis=0),
            "pred_q95": np.quantile(pred, 0.95, axis=0),
        }
    mean = np.empty(d)
    sd = np.empty(d)
    for j, block in enumerate(model.partition.blocks):
        mean[block] = approx.blocks[f"theta_{j}"].mu
        sd[block] = np.exp(approx.blocks[f"theta_{j}"].log_sigma)
    z = 1.6448536269514722  # 95th percentile of the standard normal
    pred_sd = np.sqrt(sd**2 + sigma_lik**2)
    return {
        "mean": mean,
        "sd": sd,
        "q05": mean - z * sd,
        "q95": mean + z * sd,
        "pred_q05": mean - z * pred_sd,
        "pred_q95": mean + z * pred_sd,
    }


def cmd_infer(cfg: dict, base: Path, out: Path, seed: int) -> None:
    _require_keys(
        cfg,
        {
            "checkpoint", "data", "variant", "mode", "tau2", "hyperprior", "sigma_lik",
            "partition", "inference", "pushforward_draws", "seed",
        },
        {"checkpoint", "data", "variant", "mode", "hyperprior", "sigma_lik", "partition", "inference"},
        "config",
    )
    variant = cfg["variant"]
    if variant not in ("deterministic", "aux"):
        _fail(f"unknown variant '{variant}'")
    mode = cfg["mode"]
    if mode not in ("central", "federated"):
        _fail(f"unknown mode '{mode}'")
    inf = cfg["inference"]
    _require_keys(inf, {"steps", "learning_rate", "clip_norm"}, {"steps", "learning_rate"}, "config.inference")
    ckpt = load_checkpoint(_resolve(cfg["checkpoint"], base))
    partition, grid, graph = _build_partition(cfg["partition"], base)
    if partition.dims != ckpt.config.client_dims:
        _fail(f"partition dims {partition.dims} do not match checkpoint {ckpt.config.client_dims}")
    hyper = _build_hyperprior(cfg["hyperprior"])
    sigma_lik = float(cfg["sigma_lik"])
    model = SigmaPriorModel(checkpoint=ckpt, hyperprior=hyper, sigma_lik=sigma_lik, partition=partition)
    obs_idx, obs_vals = load_observations(_resolve(cfg["data"], base))
    data = split_observations(partition, obs_idx, obs_vals)
    tau2 = None
    if variant == "aux":
        if "tau2" not in cfg:
            _fail("aux variant requires a tau2 file")
        tau2 = _load_tau2(_resolve(cfg["tau2"], base), ckpt.config.d_total)
    target = SigmaModelTarget(model, data, variant=variant, tau2=tau2)

    steps = int(inf["steps"])
    lr = float(inf["learning_rate"])
    clip = inf.get("clip_norm")
    clip = None if clip is None else float(clip)
    rng = SeededRng(seed)
    if mode == "central":
        approx, trace = mfvi_fit(target.log_joint, target.initial_approx(), steps, lr, rng, clip_norm=clip)
    else:
        server, clients = make_federation(target, lr=lr, clip_norm=clip)
        trace = np.empty(steps)
        for r in range(steps):
            trace[r] = sfvi_round(server, clients, rng)
        approx = federation_approx(server, clients)

    summaries = _posterior_summaries(
        model, approx, variant, int(cfg.get("pushforward_draws", 1000)), SeededRng(seed).derive("summary"), sigma_lik
    )
    phi_median = model.hyperprior.phi_of(float(approx.blocks["logit_phi"].mu[0]))[0]
    residuals = summaries["mean"][obs_idx] - obs_vals
    inside_pred = np.mean(
        (obs_vals >= summaries["pred_q05"][obs_idx]) & (obs_vals <= summaries["pred_q95"][obs_idx])
    )
    inside_field = np.mean((obs_vals >= summaries["q05"][obs_idx]) & (obs_vals <= summaries["q95"][obs_idx]))

    posterior_doc = {
        "version": POSTERIOR_VERSION,
        "variant": variant,
        "mode": mode,
        "blocks": {
            n: {"mu": b.mu.tolist(), "log_sigma": b.log_sigma.tolist()} for n, b in approx.blocks.items()
        },
        "theta_summary": {k: v.tolist() for k, v in summaries.items()},
        "observations": {"indices": obs_idx.tolist(), "values": obs_vals.tolist()},
        "metadata": {
            "seed": int(seed),
            "config_hash": config_hash(cfg),
            "phi_median": float(phi_median),
            "sigma_lik": sigma_lik,
            "version": __version__,
        },
    }
    (out / "posterior.json").write_text(json.dumps(posterior_doc, sort_keys=True) + "\n")
    sm = smoothed_trace(trace, window=min(200, max(1, steps)))
    with open(out / "infer_trace.csv", "w") as fh:
        for i in range(trace.size):
            fh.write(f"{i},{trace[i]!r},{sm[i]!r}\n")

    metrics = _base_metrics(cfg, seed)
    metrics.update(
        {
            "variant": variant,
            "mode": mode,
            "steps": steps,
            "final_smoothed_elbo": float(sm[-1]) if steps else None,
            "phi_median": float(phi_median),
            "predictive_interval_coverage": float(inside_pred),
            "field_interval_coverage": float(inside_field),
            "observations_inside_predictive_90": int(round(inside_pred * obs_idx.size)),
            "n_observations": int(obs_idx.size),
            "residual_variance": float(np.var(residuals, ddof=1)) if obs_idx.size > 1 else None,
        }
    )
    vectors = {
        "theta_mean": summaries["mean"],
        "theta_sd": summaries["sd"],
        "residuals": residuals,
    }
    write_report(out, "infer_report", metrics, vectors)
    if grid is not None:
        posterior_band_figure(
            out / "posterior_fit.png",
            grid.points,
            summaries["mean"],
            summaries["q05"],
            summaries["q95"],
            grid.points[obs_idx],
            obs_vals,
            [grid.points[partition.blocks[j][-1]] for j in range(partition.J - 1)],
        )
    else:
        full_obs = np.full(ckpt.config.d_total, np.nan)
        full_obs[obs_idx] = obs_vals
        field_comparison_figure(out / "posterior_fit.png", summaries["mean"], summaries["sd"], full_obs)


def cmd_eval_posterior(cfg: dict, base: Path, out: Path, seed: int) -> None:
    _require_keys(cfg, {"posterior", "oracle", "seed"}, {"posterior", "oracle"}, "config")
    try:
        pdoc = json.loads(Path(_resolve(cfg["posterior"], base)).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read posterior: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"posterior file is not valid JSON: {exc}") from exc
    if pdoc.get("version") != POSTERIOR_VERSION:
        raise FormatError(f"posterior version {pdoc.get('version')} unsupported")
    mean = np.asarray(pdoc["theta_summary"]["mean"])
    q05 = np.asarray(pdoc["theta_summary"]["q05"])
    q95 = np.asarray(pdoc["theta_summary"]["q95"])
    obs_idx = np.asarray(pdoc["observations"]["indices"], dtype=np.intp)
    obs_vals = np.asarray(pdoc["observations"]["values"])

    oracle = cfg["oracle"]
    _require_keys(
        oracle,
        {"kind", "grid", "graph", "phi", "alpha", "sigma2", "sigma_lik", "variance"},
        {"kind", "sigma_lik"},
        "config.oracle",
    )
    sigma_lik = float(oracle["sigma_lik"])
    if oracle["kind"] == "gp":
        grid = _build_grid(oracle.get("grid", {}), "config.oracle.grid")
        phi = oracle.get("phi", "posterior_median")
        phi = float(pdoc["metadata"]["phi_median"]) if phi == "posterior_median" else float(phi)
        omean, _ = gp_conjugate_posterior(
            grid.points[obs_idx], obs_vals, phi, sigma_lik, grid, float(oracle.get("variance", 1.0))
        )
        oracle_desc = {"kind": "gp", "phi": phi}
    elif oracle["kind"] == "pcar":
        graph, _ = load_graph(_resolve(oracle["graph"], base))
        if obs_idx.size != graph.n:
            _fail("pcar oracle expects fully observed data")
        y_full = np.empty(graph.n)
        y_full[obs_idx] = obs_vals
        alpha = oracle.get("alpha", "posterior_median")
        alpha = float(pdoc["metadata"]["phi_median"]) if alpha == "posterior_median" else float(alpha)
        omean, _ = pcar_conjugate_posterior(graph, alpha, float(oracle.get("sigma2", 1.0)), sigma_lik, y_full)
        oracle_desc = {"kind": "pcar", "alpha": alpha}
    else:
        _fail(f"unknown oracle kind '{oracle['kind']}'")

    if omean.shape != mean.shape:
        _fail(f"oracle dim {omean.shape} does not match posterior dim {mean.shape}")
    diff = mean - omean
    rmse = float(np.sqrt(np.mean(diff**2)))
    coverage = float(np.mean((omean >= q05) & (omean <= q95)))
    residuals = mean[obs_idx] - obs_vals
    metrics = _base_metrics(cfg, seed)
    metrics.update(
        {
            "rmse_vs_oracle": rmse,
            "oracle_coverage_90": coverage,
            "residual_variance": float(np.var(residuals, ddof=1)) if obs_idx.size > 1 else None,
            "variant": pdoc.get("variant"),
            "mode": pdoc.get("mode"),
            "oracle": oracle_desc,
        }
    )
    write_report(out, "eval_posterior_report", metrics, {"difference": diff, "oracle_mean": omean})
    difference_figure(out / "posterior_vs_oracle.png", {str(pdoc.get("variant")): diff})


COMMANDS = {
    "sample-prior": cmd_sample_prior,
    "train": cmd_train,
    "eval-cov": cmd_eval_cov,
    "estimate-tau2": cmd_estimate_tau2,
    "infer": cmd_infer,
    "eval-posterior": cmd_eval_posterior,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sigma-fed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    args = parser.parse_args(argv)
    try:
        cfg_path = Path(args.config)
        cfg = load_config(cfg_path)
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if seed is None:
            raise ConfigError("no seed: provide --seed or a 'seed' config key")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, cfg_path.parent, out, int(seed))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except SigmaFedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
