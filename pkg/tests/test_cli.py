import json

import numpy as np
import pandas as pd
import pytest

import evizilla.cli as cli
import evizilla.training as training
from evizilla.app import EXIT_INPUT, EXIT_OK, EXIT_TRAINING, main
from evizilla.evidence_model import load_checkpoint

REPORT_SUFFIXES = (".tsv", ".json", ".npz")


def _read(path):
    return pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)


def _outputs(directory):
    if not directory.exists():
        return []
    return sorted(p.name for p in directory.iterdir() if p.suffix in REPORT_SUFFIXES)


@pytest.fixture(scope="module")
def sbm_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sbm")
    code = main(
        [
            "sbm-generate", "--out", str(out), "--n", "60", "--k", "2", "--feature-dim", "4",
            "--separation", "2.0", "--noise", "0.5", "--p-in", "0.2", "--p-out", "0.01", "--layout", "axis",
            "--train-per-class", "6", "--val-per-class", "6", "--seed", "1",
        ]
    )
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, sbm_dir, fixtures_dir):
    out = tmp_path_factory.mktemp("train")
    code = main(_train_args(sbm_dir, out, fixtures_dir))
    assert code == EXIT_OK
    return out


def _data_args(sbm_dir):
    return ["--dataset", str(sbm_dir), "--dataset-format", "generic"]


def _train_args(sbm_dir, out, fixtures_dir, *extra):
    return ["train", *_data_args(sbm_dir), "--out", str(out), "--config", str(fixtures_dir / "small_config.json"), *extra]


def test_sbm_generate_writes_generic_layout(sbm_dir):
    for name in ("features.csv", "edges.tsv", "labels.csv", "splits.txt", "sbm_generate.tsv"):
        assert (sbm_dir / name).is_file()
    rows = _read(sbm_dir / "sbm_generate.tsv")
    modularity = float(rows.loc[rows["name"] == "modularity", "value"].item())
    assert modularity > 0.3
    manifest = json.loads((sbm_dir / "sbm_generate.manifest.json").read_text())
    assert manifest["config"]["seed"] == 1 and manifest["config"]["n"] == 60


def test_train_outputs(trained_dir):
    assert _outputs(trained_dir) == [
        "model.npz", "train.history.tsv", "train.manifest.json", "train.tsv",
    ]
    assert (trained_dir / "run.log").is_file()
    rows = _read(trained_dir / "train.tsv")
    assert set(rows.loc[rows["name"] == "accuracy", "split"]) == {"train", "val", "test"}
    assert rows["config_hash"].nunique() == 1
    _, config = load_checkpoint(trained_dir / "model.npz")
    assert config.max_epochs == 50 and config.hidden_size == 16


def test_rerun_is_byte_identical(tmp_path, sbm_dir, trained_dir, fixtures_dir):
    assert main(_train_args(sbm_dir, tmp_path, fixtures_dir)) == EXIT_OK
    for name in ("train.tsv", "train.history.tsv", "train.manifest.json"):
        assert (tmp_path / name).read_bytes() == (trained_dir / name).read_bytes()
    a, _ = load_checkpoint(tmp_path / "model.npz")
    b, _ = load_checkpoint(trained_dir / "model.npz")
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


def test_flags_override_config_file(tmp_path, sbm_dir, fixtures_dir):
    code = main(_train_args(sbm_dir, tmp_path, fixtures_dir, "--max-epochs", "3", "--seed", "7", "--hops", "1,2"))
    assert code == EXIT_OK
    _, config = load_checkpoint(tmp_path / "model.npz")
    assert (config.max_epochs, config.seed, config.hops) == (3, 7, (1, 2))


def test_train_with_runs_adds_summary(tmp_path, sbm_dir, fixtures_dir):
    code = main(_train_args(sbm_dir, tmp_path, fixtures_dir, "--max-epochs", "3", "--runs", "2"))
    assert code == EXIT_OK
    runs = _read(tmp_path / "train.runs.tsv")
    assert list(runs["seed"]) == ["0", "1"]


def test_eval_and_uncertainty_curve(sbm_dir, trained_dir):
    assert main(["eval", *_data_args(sbm_dir), "--out", str(trained_dir)]) == EXIT_OK
    rows = _read(trained_dir / "eval.tsv")
    counts = rows[rows["name"] == "node_count"].set_index("split")["value"]
    assert counts.to_dict() == {"train": "12", "val": "12", "test": "36"}

    code = main(["uncertainty-curve", *_data_args(sbm_dir), "--out", str(trained_dir), "--thresholds", "0.5,1.0"])
    assert code == EXIT_OK
    curve = _read(trained_dir / "uncertainty_curve.tsv")
    retained = curve[curve["name"] == "retained_fraction"]
    assert list(retained["coordinate"]) == ["0.5", "1"]
    assert retained["value"].iloc[-1] == "1"


def test_uncertainty_curve_rejects_bad_threshold(tmp_path, sbm_dir, trained_dir):
    ckpt = str(trained_dir / "model.npz")
    code = main(["uncertainty-curve", *_data_args(sbm_dir), "--out", str(tmp_path), "--checkpoint", ckpt, "--thresholds", "0,0.5"])
    assert code == EXIT_INPUT
    assert _outputs(tmp_path) == []


def test_ood_compare_eta_zero_matches_clean(tmp_path, sbm_dir, trained_dir):
    ckpt = str(trained_dir / "model.npz")
    assert main(["ood-compare", *_data_args(sbm_dir), "--out", str(tmp_path), "--checkpoint", ckpt, "--eta", "0"]) == EXIT_OK
    rows = _read(tmp_path / "ood_compare.tsv")
    dens = rows[rows["name"] == "density"]
    clean = dens[dens["series"] == "clean"]["value"].tolist()
    polluted = dens[dens["series"] == "polluted"]["value"].tolist()
    assert len(clean) == 20 and clean == polluted


def test_ood_compare_noise_raises_vacuity(tmp_path, sbm_dir, trained_dir):
    ckpt = str(trained_dir / "model.npz")
    assert main(["ood-compare", *_data_args(sbm_dir), "--out", str(tmp_path), "--checkpoint", ckpt, "--eta", "5"]) == EXIT_OK
    rows = _read(tmp_path / "ood_compare.tsv")
    u = rows[rows["name"] == "mean_uncertainty"].set_index("series")["value"].astype(float)
    assert u["polluted"] > u["clean"]


def test_hop_uncertainty(tmp_path, sbm_dir, trained_dir):
    ckpt = str(trained_dir / "model.npz")
    assert main(["hop-uncertainty", *_data_args(sbm_dir), "--out", str(tmp_path), "--checkpoint", ckpt]) == EXIT_OK
    rows = _read(tmp_path / "hop_uncertainty.tsv")
    u = rows[rows["name"] == "mean_uncertainty"].set_index("series")["value"].astype(float)
    assert list(u.index) == ["EP-0", "EP-1", "EP-2", "fused"]
    assert u["fused"] <= u.drop("fused").min()


def test_hop_ablation_single_step(tmp_path, sbm_dir, fixtures_dir):
    args = ["hop-ablation", *_data_args(sbm_dir), "--out", str(tmp_path), "--config", str(fixtures_dir / "small_config.json"),
            "--propagation-steps", "1", "--max-epochs", "5"]
    assert main(args) == EXIT_OK
    rows = _read(tmp_path / "hop_ablation.tsv")
    assert list(rows["series"]) == ["EP-0", "EP-1", "fused"]
    assert len(_read(tmp_path / "hop_ablation.variants.tsv")) == 3


def test_grid_covers_every_cell(tmp_path, sbm_dir, fixtures_dir):
    args = ["grid", *_data_args(sbm_dir), "--out", str(tmp_path), "--config", str(fixtures_dir / "lambda_grid.json")]
    assert main(args) == EXIT_OK
    sweep = _read(tmp_path / "grid.sweep.tsv")
    cells = {(float(a), float(b)) for a, b in zip(sweep["lambda_kl"], sweep["lambda_dis"])}
    assert cells == {(0.0, 0.0), (0.0, 0.3), (0.05, 0.0), (0.05, 0.3)}
    manifest = json.loads((tmp_path / "grid.manifest.json").read_text())
    assert manifest["extra"]["best_config"]["max_epochs"] == 30


def test_grid_without_space_is_an_input_error(tmp_path, sbm_dir):
    assert main(["grid", *_data_args(sbm_dir), "--out", str(tmp_path)]) == EXIT_INPUT


def test_std_density(tmp_path, sbm_dir, fixtures_dir):
    args = ["std-density", *_data_args(sbm_dir), "--out", str(tmp_path), "--config", str(fixtures_dir / "small_config.json"),
            "--depths", "1,2", "--max-epochs", "5", "--bins", "5"]
    assert main(args) == EXIT_OK
    rows = _read(tmp_path / "std_density.tsv")
    means = rows[rows["name"] == "mean_std"]
    assert list(means["series"]) == ["fused-1", "single-1", "fused-2", "single-2"]
    counts = rows[(rows["name"] == "count") & (rows["series"] == "fused-2")]
    assert len(counts) == 5 and sum(int(c) for c in counts["value"]) == 36
    tcp = _read(tmp_path / "std_density.true_class.tsv")
    assert set(tcp["depth"]) == {"1", "2"}


# --- failures --------------------------------------------------------------

def test_missing_dataset_exits_1_without_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--dataset", str(tmp_path / "nowhere"), "--out", str(out)]) == EXIT_INPUT
    assert _outputs(out) == []


def test_unknown_config_field(tmp_path, sbm_dir):
    bad = tmp_path / "bad.json"
    bad.write_text('{"learnin_rate": 0.1}')
    out = tmp_path / "out"
    assert main(["train", *_data_args(sbm_dir), "--out", str(out), "--config", str(bad)]) == EXIT_INPUT
    assert _outputs(out) == []
    assert "learnin_rate" in (out / "run.log").read_text()


def test_missing_config_path_exits_1_without_outputs(tmp_path, sbm_dir):
    out = tmp_path / "out"
    code = main(["train", *_data_args(sbm_dir), "--out", str(out), "--config", str(tmp_path / "absent.json")])
    assert code == EXIT_INPUT
    assert _outputs(out) == []


def test_zero_learning_rate_rejected_for_train(tmp_path, sbm_dir, fixtures_dir):
    out = tmp_path / "out"
    assert main([*_train_args(sbm_dir, out, fixtures_dir), "--learning-rate", "0"]) == EXIT_INPUT
    assert _outputs(out) == []


def test_single_class_dataset_rejected(tmp_path):
    (tmp_path / "mono.content").write_text("a 1 0 x\nb 0 1 x\n")
    (tmp_path / "mono.cites").write_text("a b\n")
    out = tmp_path / "out"
    assert main(["train", "--dataset", str(tmp_path / "mono"), "--out", str(out)]) == EXIT_INPUT
    assert _outputs(out) == []


def test_checkpoint_dataset_mismatch(tmp_path, trained_dir, fixtures_dir):
    code = main(["eval", "--dataset", str(fixtures_dir / "toy"), "--out", str(tmp_path), "--checkpoint", str(trained_dir / "model.npz")])
    assert code == EXIT_INPUT
    assert _outputs(tmp_path) == []


def test_divergence_exits_2(tmp_path, sbm_dir, fixtures_dir, monkeypatch):
    real = training.backward

    def nan_loss(*args, **kwargs):
        _, grads = real(*args, **kwargs)
        return float("nan"), grads

    monkeypatch.setattr(training, "backward", nan_loss)
    out = tmp_path / "out"
    assert main(_train_args(sbm_dir, out, fixtures_dir)) == EXIT_TRAINING
    assert _outputs(out) == []
    assert "epoch 0" in (out / "run.log").read_text()


def test_unexpected_error_lands_in_sidecar(tmp_path, sbm_dir, fixtures_dir, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("kaboom")

    monkeypatch.setattr(cli, "train", boom)
    out = tmp_path / "out"
    assert main(_train_args(sbm_dir, out, fixtures_dir)) == EXIT_INPUT
    log_text = (out / "run.log").read_text()
    assert "Traceback" in log_text and "kaboom" in log_text


def test_bad_log_level(tmp_path, sbm_dir):
    assert main(["eval", *_data_args(sbm_dir), "--out", str(tmp_path), "--log-level", "LOUD"]) == EXIT_INPUT


def test_help_lists_every_verb(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for verb in ("train", "eval", "uncertainty-curve", "ood-compare", "hop-ablation", "hop-uncertainty",
                 "std-density", "grid", "sbm-generate"):
        assert verb in text
