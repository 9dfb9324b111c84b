"""End-to-end CLI runs at toy scale: file outputs, figure rendering, mode
equivalence, byte-level determinism, and exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from sigmafed.cli import main, save_observations
from sigmafed.nn import SeededRng
from sigmafed.priors import lattice_graph, load_dataset, quadrant_labels, save_graph


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A toy GP pipeline: dataset -> checkpoint -> tau2, shared by tests."""
    ws = tmp_path_factory.mktemp("cli_gp")
    grid = {"n": 20, "low": 0.0, "high": 1.0}
    (ws / "sample.json").write_text(
        json.dumps(
            {"kind": "gp", "grid": grid, "n_draws": 400, "phi_low": 0.2, "phi_high": 1.0, "seed": 5}
        )
    )
    assert run(["sample-prior", "--config", ws / "sample.json", "--out", ws / "data"]) == 0
    (ws / "train.json").write_text(
        json.dumps(
            {
                "dataset": "data/dataset.csv",
                "partition": {"kind": "grid", "n": 20, "boundaries": [0.5]},
                "vae": {
                    "global_latent": 3,
                    "local_latents": 2,
                    "hidden": 8,
                    "gamma": 0.5,
                    "iterations": 300,
                    "batch_size": 16,
                    "learning_rate": 1e-3,
                },
                "seed": 1,
            }
        )
    )
    assert run(["train", "--config", ws / "train.json", "--out", ws / "fit"]) == 0
    (ws / "tau2.json").write_text(
        json.dumps(
            {
                "checkpoint": "fit/checkpoint.json",
                "prior": {"kind": "gp", "grid": grid},
                "hyperprior": {"kind": "uniform", "low": 0.2, "high": 1.0},
                "n_draws": 500,
                "seed": 9,
            }
        )
    )
    assert run(["estimate-tau2", "--config", ws / "tau2.json", "--out", ws / "tau"]) == 0
    x = np.linspace(0, 1, 20)
    idx = np.array([2, 7, 11, 16])
    y = np.sin(x[idx]) + 0.1 * SeededRng(3).normal(4)
    save_observations(ws / "obs.json", idx, y)
    return ws


def infer_config(ws, variant="deterministic", mode="central"):
    cfg = {
        "checkpoint": "fit/checkpoint.json",
        "data": "obs.json",
        "variant": variant,
        "mode": mode,
        "hyperprior": {"kind": "uniform", "low": 0.2, "high": 1.0},
        "sigma_lik": 0.2,
        "partition": {"kind": "grid", "n": 20, "boundaries": [0.5]},
        "inference": {"steps": 400, "learning_rate": 0.01, "clip_norm": None},
        "pushforward_draws": 200,
        "seed": 11,
    }
    if variant == "aux":
        cfg["tau2"] = "tau/tau2.csv"
    return cfg


class TestSamplePrior:
    def test_gp_dataset_shape(self, workspace):
        phi, theta = load_dataset(workspace / "data" / "dataset.csv")
        assert phi.shape == (400, 1)
        assert theta.shape == (400, 20)

    def test_report_embeds_provenance(self, workspace):
        doc = json.loads((workspace / "data" / "sample_prior_report.json").read_text())
        assert {"config_hash", "seed", "version"} <= set(doc["metrics"])

    def test_pcar_row_width(self, tmp_path):
        g = lattice_graph(6, 6)
        save_graph(tmp_path / "g.json", g, quadrant_labels(6, 6))
        (tmp_path / "c.json").write_text(
            json.dumps(
                {"kind": "pcar", "graph": "g.json", "n_draws": 3, "phi_low": 0.0, "phi_high": 1.0, "seed": 2}
            )
        )
        assert run(["sample-prior", "--config", tmp_path / "c.json", "--out", tmp_path / "o"]) == 0
        lines = (tmp_path / "o" / "dataset.csv").read_text().splitlines()
        assert len(lines[1].split(",")) == 37

    def test_single_draw(self, tmp_path):
        (tmp_path / "c.json").write_text(
            json.dumps(
                {
                    "kind": "gp",
                    "grid": {"n": 5},
                    "n_draws": 1,
                    "phi_low": 0.2,
                    "phi_high": 1.0,
                    "seed": 4,
                }
            )
        )
        assert run(["sample-prior", "--config", tmp_path / "c.json", "--out", tmp_path / "o"]) == 0
        phi, theta = load_dataset(tmp_path / "o" / "dataset.csv")
        assert theta.shape == (1, 5)
        assert 0.2 <= phi[0, 0] <= 1.0


class TestTrain:
    def test_outputs_exist(self, workspace):
        for name in ("checkpoint.json", "trace.csv", "trace.png", "train_report.json", "train_report.csv"):
            assert (workspace / "fit" / name).exists()

    def test_trace_has_exactly_iteration_rows(self, workspace):
        lines = (workspace / "fit" / "trace.csv").read_text().splitlines()
        assert len(lines) == 300

    def test_smoothed_elbo_improves(self, workspace):
        doc = json.loads((workspace / "fit" / "train_report.json").read_text())
        m = doc["metrics"]
        assert m["final_smoothed_elbo"] > m["smoothed_elbo_at_100"]

    def test_rerun_identical_checkpoint(self, workspace, tmp_path):
        assert run(["train", "--config", workspace / "train.json", "--out", tmp_path / "fit2"]) == 0
        a = (workspace / "fit" / "checkpoint.json").read_bytes()
        b = (tmp_path / "fit2" / "checkpoint.json").read_bytes()
        assert a == b


class TestEvalCov:
    def test_report_and_figures(self, workspace, tmp_path):
        (workspace / "evalcov.json").write_text(
            json.dumps(
                {
                    "checkpoint": "fit/checkpoint.json",
                    "phis": [0.5, 1.5],
                    "n_draws": 400,
                    "prior": {"kind": "gp", "grid": {"n": 20}},
                    "seed": 6,
                }
            )
        )
        out = tmp_path / "cov"
        assert run(["eval-cov", "--config", workspace / "evalcov.json", "--out", out]) == 0
        doc = json.loads((out / "eval_cov_report.json").read_text())
        per_phi = doc["metrics"]["per_phi"]
        assert len(per_phi) == 2
        assert per_phi[0]["relative_frobenius_error"] > 0
        assert per_phi[0]["outside_training_range"] is False
        assert per_phi[1]["outside_training_range"] is True  # 1.5 beyond training range
        assert (out / "covariance.png").exists()
        assert (out / "prior_draws.png").exists()

    def test_identical_covariance_gives_zero_error(self):
        # C vs itself through the same error formula
        c = np.array([[2.0, 0.3], [0.3, 1.0]])
        err = np.linalg.norm(c - c, "fro") / np.linalg.norm(c, "fro")
        assert err == 0.0


class TestEstimateTau2:
    def test_outputs(self, workspace):
        doc = json.loads((workspace / "tau" / "estimate_tau2_report.json").read_text())
        m = doc["metrics"]
        assert m["clip_low"] == 0.01 and m["clip_high"] == 100.0
        assert 0.0 <= m["clipped_fraction"] <= 1.0
        phi, rows = load_dataset(workspace / "tau" / "tau2.csv")
        assert rows.shape == (1, 20)
        assert np.all((rows >= 0.01) & (rows <= 100.0))


class TestInfer:
    def test_central_deterministic(self, workspace, tmp_path):
        cfg = infer_config(workspace)
        (workspace / "inf_c.json").write_text(json.dumps(cfg))
        out = tmp_path / "inf"
        assert run(["infer", "--config", workspace / "inf_c.json", "--out", out]) == 0
        pdoc = json.loads((out / "posterior.json").read_text())
        assert pdoc["variant"] == "deterministic"
        assert len(pdoc["theta_summary"]["mean"]) == 20
        assert (out / "posterior_fit.png").exists()
        rdoc = json.loads((out / "infer_report.json").read_text())
        assert rdoc["metrics"]["n_observations"] == 4

    def test_federated_matches_central_global_blocks(self, workspace, tmp_path):
        for mode, tag in (("central", "c2"), ("federated", "f2")):
            cfg = infer_config(workspace, mode=mode)
            (workspace / f"inf_{tag}.json").write_text(json.dumps(cfg))
            assert run(["infer", "--config", workspace / f"inf_{tag}.json", "--out", tmp_path / tag]) == 0
        a = json.loads((tmp_path / "c2" / "posterior.json").read_text())["blocks"]
        b = json.loads((tmp_path / "f2" / "posterior.json").read_text())["blocks"]
        for name in ("logit_phi", "z_G"):
            np.testing.assert_allclose(a[name]["mu"], b[name]["mu"], atol=1e-9)
            np.testing.assert_allclose(a[name]["log_sigma"], b[name]["log_sigma"], atol=1e-9)

    def test_aux_variant(self, workspace, tmp_path):
        cfg = infer_config(workspace, variant="aux")
        (workspace / "inf_aux.json").write_text(json.dumps(cfg))
        out = tmp_path / "aux"
        assert run(["infer", "--config", workspace / "inf_aux.json", "--out", out]) == 0
        pdoc = json.loads((out / "posterior.json").read_text())
        assert "theta_0" in pdoc["blocks"]

    def test_aux_without_tau2_rejected(self, workspace, tmp_path):
        cfg = infer_config(workspace, variant="aux")
        del cfg["tau2"]
        (workspace / "inf_bad.json").write_text(json.dumps(cfg))
        assert run(["infer", "--config", workspace / "inf_bad.json", "--out", tmp_path / "x"]) == 2

    def test_zero_length_data_rejected(self, workspace, tmp_path):
        (workspace / "empty_obs.json").write_text('{"indices": [], "values": []}')
        cfg = infer_config(workspace)
        cfg["data"] = "empty_obs.json"
        (workspace / "inf_empty.json").write_text(json.dumps(cfg))
        assert run(["infer", "--config", workspace / "inf_empty.json", "--out", tmp_path / "x"]) == 4


@pytest.fixture(scope="module")
def posterior_dir(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("post")
    cfg = infer_config(workspace)
    (workspace / "inf_ep.json").write_text(json.dumps(cfg))
    assert run(["infer", "--config", workspace / "inf_ep.json", "--out", out]) == 0
    return out


class TestEvalPosterior:

    def test_gp_oracle_metrics(self, workspace, posterior_dir, tmp_path):
        (workspace / "evalpost.json").write_text(
            json.dumps(
                {
                    "posterior": str(posterior_dir / "posterior.json"),
                    "oracle": {"kind": "gp", "grid": {"n": 20}, "phi": "posterior_median", "sigma_lik": 0.2},
                    "seed": 3,
                }
            )
        )
        out = tmp_path / "ep"
        assert run(["eval-posterior", "--config", workspace / "evalpost.json", "--out", out]) == 0
        doc = json.loads((out / "eval_posterior_report.json").read_text())
        m = doc["metrics"]
        assert m["rmse_vs_oracle"] >= 0
        assert 0.0 <= m["oracle_coverage_90"] <= 1.0
        assert (out / "posterior_vs_oracle.png").exists()

    def test_posterior_equal_to_oracle_scores_perfectly(self, workspace, posterior_dir, tmp_path):
        # rewrite the posterior so its mean IS the oracle mean
        from sigmafed.inference import gp_conjugate_posterior
        from sigmafed.priors import Grid1D

        pdoc = json.loads((posterior_dir / "posterior.json").read_text())
        grid = Grid1D.equidistant(20)
        idx = np.asarray(pdoc["observations"]["indices"], dtype=np.intp)
        vals = np.asarray(pdoc["observations"]["values"])
        phi = pdoc["metadata"]["phi_median"]
        omean, _ = gp_conjugate_posterior(grid.points[idx], vals, phi, 0.2, grid)
        pdoc["theta_summary"]["mean"] = omean.tolist()
        pdoc["theta_summary"]["q05"] = (omean - 0.1).tolist()
        pdoc["theta_summary"]["q95"] = (omean + 0.1).tolist()
        (tmp_path / "perfect.json").write_text(json.dumps(pdoc, sort_keys=True))
        (tmp_path / "c.json").write_text(
            json.dumps(
                {
                    "posterior": str(tmp_path / "perfect.json"),
                    "oracle": {"kind": "gp", "grid": {"n": 20}, "phi": phi, "sigma_lik": 0.2},
                    "seed": 3,
                }
            )
        )
        assert run(["eval-posterior", "--config", tmp_path / "c.json", "--out", tmp_path / "o"]) == 0
        doc = json.loads((tmp_path / "o" / "eval_posterior_report.json").read_text())
        assert doc["metrics"]["rmse_vs_oracle"] == pytest.approx(0.0, abs=1e-12)
        assert doc["metrics"]["oracle_coverage_90"] == 1.0


class TestDeterminismAndErrors:
    def test_rerun_byte_identical_outputs(self, workspace, tmp_path):
        cfg = infer_config(workspace)
        (workspace / "inf_det.json").write_text(json.dumps(cfg))
        outs = []
        for tag in ("r1", "r2"):
            out = tmp_path / tag
            assert run(["infer", "--config", workspace / "inf_det.json", "--out", out]) == 0
            outs.append(out)
        for name in sorted(p.name for p in outs[0].iterdir()):
            a = (outs[0] / name).read_bytes()
            b = (outs[1] / name).read_bytes()
            assert a == b, f"{name} differs between reruns"

    def test_unknown_config_key_rejected(self, workspace, tmp_path):
        cfg = json.loads((workspace / "sample.json").read_text())
        cfg["bogus"] = 1
        (tmp_path / "bad.json").write_text(json.dumps(cfg))
        assert run(["sample-prior", "--config", tmp_path / "bad.json", "--out", tmp_path / "o"]) == 2

    def test_missing_input_file_is_io_error(self, workspace, tmp_path):
        cfg = infer_config(workspace)
        cfg["checkpoint"] = "nope/missing.json"
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert run(["infer", "--config", tmp_path / "c.json", "--out", tmp_path / "o"]) == 4

    def test_seed_flag_overrides_config(self, workspace, tmp_path):
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        assert run(["sample-prior", "--config", workspace / "sample.json", "--out", out1, "--seed", 123]) == 0
        assert run(["sample-prior", "--config", workspace / "sample.json", "--out", out2]) == 0
        a = (out1 / "dataset.csv").read_bytes()
        b = (out2 / "dataset.csv").read_bytes()
        assert a != b
        doc = json.loads((out1 / "sample_prior_report.json").read_text())
        assert doc["metrics"]["seed"] == 123
