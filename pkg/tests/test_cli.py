import json
import subprocess
import sys

import numpy as np
import pytest

from pearl import data_io
from pearl.cli import main


def run(argv):
    return main(argv)


@pytest.fixture(scope="class")
def pipeline(tmp_path_factory):
    """One tiny synth -> preprocess -> score -> train -> predict chain."""
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "synth": {
            "n_spots": 48,
            "n_genes": 30,
            "n_pathways": 3,
            "n_slides": 2,
            "d_img": 6,
            "n_subjects": 12,
            "embed_dim": 8,
        },
        "preprocess": {"min_spots_per_gene": 2, "top_hvg": 10},
        "ssgsea": {"null_sets": 3},
        "train": {"batch_size": 8, "max_epochs": 2, "patience": 1},
        "model": {
            "n_heads": 1,
            "d_k": 2,
            "phi_hidden": 4,
            "proj_hidden": 8,
            "head_hidden": 8,
            "embed_dim": 8,
        },
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    data = root / "data"
    base = ["--config", str(cfg_path), "--seed", "0", "--out-dir", str(data)]
    assert run(["synth", *base]) == 0
    assert run(
        [
            "preprocess", *base,
            "--expression", str(data / "expression.tsv"),
            "--coords", str(data / "coords.csv"),
        ]
    ) == 0
    assert run(
        [
            "score-pathways", *base,
            "--expression", str(data / "normalized.tsv"),
            "--gene-sets", str(data / "gene_sets.gmt"),
        ]
    ) == 0
    assert run(
        [
            "train-contrastive", *base,
            "--scores", str(data / "scores.tsv"),
            "--coords", str(data / "coords.csv"),
            "--features", str(data / "features.tsv"),
            "--hvg", str(data / "hvg.tsv"),
        ]
    ) == 0
    assert run(
        [
            "train-heads", *base,
            "--checkpoint", str(data / "stage1"),
            "--scores", str(data / "scores.tsv"),
            "--coords", str(data / "coords.csv"),
            "--features", str(data / "features.tsv"),
            "--hvg", str(data / "hvg.tsv"),
        ]
    ) == 0
    assert run(
        [
            "predict", *base,
            "--checkpoint", str(data / "final"),
            "--features", str(data / "features.tsv"),
            "--coords", str(data / "coords.csv"),
            "--emit-embeddings",
        ]
    ) == 0
    return root, data, cfg_path


class TestPipeline:
    def test_synth_outputs(self, pipeline):
        _, data, _ = pipeline
        for name in (
            "expression.tsv",
            "coords.csv",
            "gene_sets.gmt",
            "features.tsv",
            "survival.csv",
            "survival_embeddings.tsv",
        ):
            assert (data / name).exists(), name

    def test_preprocess_outputs(self, pipeline):
        _, data, _ = pipeline
        hvg = data_io.parse_expression(
            data / "hvg.tsv", value_kind=data_io.NORMALIZED_LOG
        )
        assert hvg.matrix.shape == (48, 10)
        genes = (data / "hvg_genes.txt").read_text().split()
        # the list is in selection order, the matrix in serialization order
        assert sorted(genes) == sorted(hvg.gene_ids)

    def test_scores_aligned_with_spots(self, pipeline):
        _, data, _ = pipeline
        sm = data_io.read_scores(data / "scores.tsv")
        assert len(sm.pathway_names) == 3
        assert sm.scores.shape == (48, 3)

    def test_predict_contract(self, pipeline):
        _, data, _ = pipeline
        yp = data_io.read_scores(data / "yhat_path.tsv")
        yg = data_io.read_scores(data / "yhat_gene.tsv")
        assert yp.scores.shape == (48, 3)
        assert yg.scores.shape == (48, 10)
        emb_lines = (data / "embeddings.tsv").read_text().strip().split("\n")
        assert emb_lines[0].startswith("spot_id\tslide_id\te0")
        assert len(emb_lines) == 49

    def test_evaluate_report(self, pipeline, tmp_path):
        _, data, _ = pipeline
        assert run(
            [
                "evaluate",
                "--out-dir", str(tmp_path),
                "--pred", str(data / "yhat_path.tsv"),
                "--truth", str(data / "scores.tsv"),
            ]
        ) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["n_spots"] == 48
        assert rep["n_targets"] == 3
        assert np.isfinite(rep["mse"])

    def test_survival_train_eval(self, pipeline, tmp_path):
        _, data, _ = pipeline
        cfg = tmp_path / "surv.json"
        cfg.write_text(json.dumps({"survival": {"max_epochs": 5, "patience": 3}}))
        assert run(
            [
                "survival-train",
                "--config", str(cfg),
                "--out-dir", str(tmp_path),
                "--survival", str(data / "survival.csv"),
                "--embeddings", str(data / "survival_embeddings.tsv"),
            ]
        ) == 0
        assert run(
            [
                "survival-eval",
                "--out-dir", str(tmp_path),
                "--checkpoint", str(tmp_path / "cox"),
                "--survival", str(data / "survival.csv"),
                "--embeddings", str(data / "survival_embeddings.tsv"),
            ]
        ) == 0
        rep = json.loads((tmp_path / "survival_report.json").read_text())
        assert 0.0 <= rep["c_index"] <= 1.0
        assert rep["n_subjects"] == 12

    def test_run_cv_two_folds(self, pipeline, tmp_path):
        root, data, cfg_path = pipeline
        cfg = json.loads(cfg_path.read_text())
        cfg["paths"] = {
            "expression": str(data / "expression.tsv"),
            "coords": str(data / "coords.csv"),
            "gene_sets": str(data / "gene_sets.gmt"),
            "features": str(data / "features.tsv"),
        }
        cv_cfg = tmp_path / "cv.json"
        cv_cfg.write_text(json.dumps(cfg))
        assert run(
            [
                "run-cv",
                "--config", str(cv_cfg),
                "--out-dir", str(tmp_path),
                "--folds", "2",
            ]
        ) == 0
        agg = json.loads((tmp_path / "aggregate.json").read_text())
        assert agg["folds"] == 2
        for fold in range(2):
            rep = json.loads((tmp_path / f"fold_{fold}.json").read_text())
            assert rep["n_test_spots"] == 24


class TestErrors:
    def test_unknown_config_field_named(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        proc = subprocess.run(
            [sys.executable, "-m", "pearl.cli", "synth", "--config", str(cfg)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        err = json.loads(proc.stderr)
        assert err["error"] == "config"
        assert "train.learning_rate" in err["message"]

    def test_missing_paths_field(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"paths": {"coords": "x"}}))
        proc = subprocess.run(
            [
                sys.executable, "-m", "pearl.cli",
                "run-cv", "--config", str(cfg), "--out-dir", str(tmp_path),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        err = json.loads(proc.stderr)
        assert "paths.expression" in err["message"]

    def test_malformed_input_file(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("spot\tgene\tvalue\ns1\tg1\tnot_a_number\n")
        proc = subprocess.run(
            [
                sys.executable, "-m", "pearl.cli",
                "preprocess",
                "--expression", str(bad),
                "--coords", str(tmp_path / "missing.csv"),
                "--out-dir", str(tmp_path),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 1
        err = json.loads(proc.stderr)
        assert "error" in err and "message" in err

    def test_gradcheck_command(self, capsys):
        assert run(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        assert "FAIL" not in out
