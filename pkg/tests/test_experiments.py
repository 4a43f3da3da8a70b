import csv
import json

import numpy as np
import pytest

from cgat.cli import main
from cgat.experiments import (ExperimentSpec, apply_overrides, chain_collapse_trials, oracle_graphs,
                              robustness_values, run_experiment, write_result)
from cgat.graph import generate_sbm
from cgat.seeding import make_rng
from cgat.train import cgat_config

TINY_SBM = {"classes": 3, "nodes_per_class": 12, "p_in": 0.4, "p_out": 0.03, "feature_dim": 4,
            "feature_shift": 1.5}
TINY_TRAIN = {"hidden_dims": 4, "heads": 2, "max_epochs": 5, "early_stop_window": 5}


def tiny(experiment, **kw):
    base = dict(experiment=experiment, sbm=TINY_SBM, overrides=TINY_TRAIN, runs=2)
    base.update(kw)
    return ExperimentSpec(**base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestSpec:
    def test_unknown_experiment(self):
        with pytest.raises(ValueError, match="unknown experiment"):
            ExperimentSpec(experiment="nope")

    @pytest.mark.parametrize("exp, field", [("robustness", "ratios"), ("depth", "depths"), ("ksweep", "ks")])
    def test_empty_sweep(self, exp, field):
        with pytest.raises(ValueError, match=field):
            ExperimentSpec(experiment=exp, **{field: []})

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="unknown"):
            ExperimentSpec.from_dict({"experiment": "classify", "bogus": 1})

    def test_unknown_protocol(self):
        with pytest.raises(ValueError):
            ExperimentSpec(experiment="robustness", protocols=["sideways"])

    def test_dataset_and_sbm_exclusive(self):
        with pytest.raises(ValueError):
            ExperimentSpec(experiment="classify", dataset="x.json", sbm={})

    def test_bad_runs(self):
        with pytest.raises(ValueError):
            ExperimentSpec(experiment="classify", runs=0)

    def test_override_layering(self):
        spec = tiny("classify", cgat={"k": 2, "margin": {"zeta_g": 0.5}})
        cfg = spec.model_config("cgat")
        assert (cfg.k, cfg.margin.zeta_g, cfg.margin.zeta_b, cfg.max_epochs) == (2, 0.5, 0.2, 5)
        assert spec.model_config("gat").k is None

    def test_unknown_training_option(self):
        with pytest.raises(ValueError):
            apply_overrides(cgat_config(), {"hiden_dims": 3})

    def test_sbm_seed_follows_spec(self):
        a = tiny("classify", seed=0).load_data()
        b = tiny("classify", seed=1).load_data()
        assert not np.array_equal(a.features, b.features)


class TestRunners:
    def test_classify(self, tmp_path):
        res = run_experiment(tiny("classify"))
        assert res.header == ["dataset", "model", "metric", "mean", "std", "runs"]
        assert [r[1] for r in res.rows] == ["gat", "cgat"]
        assert all(0 <= r[3] <= 1 and r[5] == 2 for r in res.rows)
        files = write_result(res, tiny("classify"), tmp_path)
        side = json.loads(files[-1].read_text())
        assert side["configs"]["gat"]["attention_form"] == "gat" and side["spec"]["runs"] == 2

    def test_ablation_variants(self):
        res = run_experiment(tiny("ablation", runs=1))
        assert [r[0] for r in res.rows] == ["full", "no_structure_loss", "no_boundary_loss", "no_top_k",
                                           "uniform_negatives"]
        assert res.configs["no_top_k"]["k"] is None
        assert res.configs["no_structure_loss"]["margin"]["lambda_g"] == 0.0

    def test_robustness_rows(self):
        res = run_experiment(tiny("robustness", runs=1, ratios=[0.0, 0.5]))
        assert len(res.rows) == 3 * 2 * 2
        assert {r[0] for r in res.rows} == {"test_add", "train_drop", "train_add"}
        assert set(res.summary["drop_first_to_last_ratio"]) == {f"{p}/{m}" for p in
                                                                 ("test_add", "train_drop", "train_add")
                                                                 for m in ("gat", "cgat")}

    def test_ratio_zero_matches_classify(self):
        spec = tiny("classify")
        ds = spec.load_data()
        cls = run_experiment(spec)
        for model, row in zip(("gat", "cgat"), cls.rows):
            vals = robustness_values(ds, spec.model_config(model), "test_add", [0.0], 2, 0)
            assert np.mean(vals[0.0]) == pytest.approx(row[3])

    def test_depth_curves(self):
        res = run_experiment(tiny("depth", runs=1, depths=[2, 3]))
        assert [(r[0], r[1]) for r in res.rows] == [(2, "gat"), (2, "cgat"), (3, "gat"), (3, "cgat")]
        header, rows = res.curves["depth_curves.csv"]
        assert header[:4] == ["model", "depth", "run", "epoch"] and len(rows) == 4 * 5

    def test_k_sweep(self):
        res = run_experiment(tiny("ksweep", runs=1, ks=[1, 3]))
        assert [(r[0], r[1]) for r in res.rows] == [("clean", 1), ("clean", 3), ("noisy", 1), ("noisy", 3)]
        assert set(res.summary["peak_k"].values()) <= {1, 3}


class TestOracle:
    def test_all_checks_pass(self):
        res = run_experiment(ExperimentSpec(experiment="oracle"))
        failed = [r for r in res.rows if not r[-1]]
        assert res.passed and not failed
        checks = {r[0] for r in res.rows}
        assert {"laplacian_smoothing_identity", "stationary_convergence", "chain_collapse_ratio",
                "mixing_bound_c0.5", "mixing_bound_c1", "mixing_bound_c2", "chain_collapse_trials",
                "trained_attention_identity"} <= checks
        assert {f"delta_{g}.csv" for g in oracle_graphs(0)} == set(res.curves)

    def test_injected_non_stochastic_fails(self):
        res = run_experiment(ExperimentSpec(experiment="oracle"), inject=np.array([[0.5, 0.2], [0.3, 0.7]]))
        bad = [r for r in res.rows if not r[-1]]
        assert not res.passed and [(r[0], r[1]) for r in bad] == [("injected_matrix", "row_stochastic")]

    def test_chain_trials_fraction(self):
        assert chain_collapse_trials(make_rng(0, 5, 1), trials=20) >= 0.9


class TestCli:
    def test_oracle_exit_zero(self, tmp_path):
        assert main(["oracle", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "oracle.csv")
        assert rows[0] == ["check", "subject", "value", "threshold", "passed"]
        assert (tmp_path / "oracle.json").exists() and (tmp_path / "delta_path10.csv").exists()

    def test_oracle_injection_exit_one(self, tmp_path, caplog):
        m = tmp_path / "bad.json"
        m.write_text("[[0.5, 0.2], [0.3, 0.7]]")
        assert main(["oracle", "--out", str(tmp_path), "--inject", str(m)]) == 1
        assert "row_stochastic" in caplog.text

    def test_bad_config_exit_two(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"depths": []}))
        assert main(["depth", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_missing_dataset_exit_two(self, tmp_path):
        assert main(["classify", "--dataset", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"sbm": TINY_SBM, "overrides": TINY_TRAIN, "runs": 5, "seed": 9}))
        assert main(["classify", "--config", str(cfg), "--runs", "1", "--seed", "2", "--max-epochs", "3",
                     "--out", str(tmp_path)]) == 0
        side = json.loads((tmp_path / "classify.json").read_text())
        assert side["spec"]["runs"] == 1 and side["spec"]["seed"] == 2
        assert side["configs"]["cgat"]["max_epochs"] == 3 and side["configs"]["cgat"]["hidden_dims"] == 4

    @pytest.mark.parametrize("experiment, extra", [("classify", {}), ("robustness", {"ratios": [0.0, 0.3]}),
                                                    ("depth", {"depths": [2, 3]})])
    def test_byte_identical_rerun(self, tmp_path, experiment, extra):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"sbm": TINY_SBM, "overrides": TINY_TRAIN, "runs": 1, **extra}))
        outs = []
        for name in ("a", "b"):
            assert main([experiment, "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
        assert outs[0] == outs[1]

    def test_dataset_file(self, tmp_path):
        from cgat.graph import save_dataset
        save_dataset(generate_sbm(**TINY_SBM, seed=3), tmp_path / "d.json")
        assert main(["classify", "--dataset", str(tmp_path / "d.json"), "--runs", "1", "--max-epochs", "2",
                     "--out", str(tmp_path)]) == 0
        assert read_csv(tmp_path / "classify.csv")[1][0] == "sbm-3x12"
