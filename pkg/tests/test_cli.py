import re
import json

import pandas as pd
import pytest
import torch
from safetensors.torch import save_file

from mpbm import args_utils, cli
from mpbm.args_utils import ConfigError, RunConfig


@pytest.fixture
def manifest(tmp_path):
    path = tmp_path / "blobs.json"
    path.write_text(json.dumps({
        "num_classes": 3,
        "source": {"synthetic": "blobs", "num_classes": 3, "n_per_class": 15, "separation": 3.0, "seed": 0},
        "targets": {"rotated": {"base": "source", "shifts": [{"kind": "rotate", "magnitude": 30.0}]}},
    }))
    return str(path)


@pytest.fixture
def config(tmp_path, manifest):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({
        "manifest": manifest,
        "architecture": "mlp",
        "batch_size": 16,
        "epochs": 2,
        "pretrain_epochs": 2,
        "outer_iters": 2,
        "generator_iters": 2,
        "finetune_iters": 3,
        "queries_per_outer": 4,
        "sgld_steps": 2,
        "n_b": 3,
        "lr": "1e-2",
    }))
    return str(path)


def train(config, output_dir, *extra):
    return cli.main(["train", "--config", config, "--output_dir", str(output_dir), *extra])


def test_load_config_coerces_types(config):
    cfg = args_utils.load_config(config)
    assert isinstance(cfg, RunConfig)
    assert cfg.lr == pytest.approx(1e-2) and isinstance(cfg.lr, float)
    resolved = args_utils.check_run_config(cfg)
    assert resolved.queries_per_outer == 4 and resolved.outer_iters == 2


def test_derived_defaults(manifest):
    cfg = args_utils.check_run_config(RunConfig(manifest=manifest, architecture="mlp", batch_size=8, epochs=4))
    assert cfg.outer_iters == 4 and cfg.pretrain_epochs == 4 and cfg.queries_per_outer == 8
    assert args_utils.resolve_dataset_defaults(cfg, 45).finetune_iters == 6


def test_config_errors_name_the_field(tmp_path, manifest):
    with pytest.raises(ConfigError, match="manifest"):
        args_utils.check_run_config(RunConfig(manifest=None))
    with pytest.raises(ConfigError, match="manifest"):
        args_utils.check_run_config(RunConfig(manifest=str(tmp_path / "missing.json")))
    with pytest.raises(ConfigError, match="method"):
        args_utils.check_run_config(RunConfig(manifest=manifest, architecture="mlp", method="gan"))
    with pytest.raises(ConfigError, match="batch_size"):
        args_utils.check_run_config(RunConfig(manifest=manifest, architecture="mlp", batch_size=0))

    bad = tmp_path / "bad.json"
    bad.write_text('{"lambda_adv": [1, 2')
    with pytest.raises(ConfigError, match=re.escape(str(bad))):
        args_utils.load_config(str(bad))
    bad.write_text('{"lambda_adv": "high"}')
    with pytest.raises(ConfigError, match="lambda_adv"):
        args_utils.load_config(str(bad))
    bad.write_text('{"learning_rate": 0.1}')
    with pytest.raises(ConfigError, match="learning_rate"):
        args_utils.load_config(str(bad))


def test_overrides():
    cfg = args_utils.apply_overrides(RunConfig(), ["lambda_adv=0", "no_sgld=true", "input_clamp=null"])
    assert cfg.lambda_adv == 0.0 and cfg.no_sgld is True and cfg.input_clamp is None
    with pytest.raises(ConfigError):
        args_utils.apply_overrides(RunConfig(), ["unknown=1"])
    with pytest.raises(ConfigError):
        args_utils.apply_overrides(RunConfig(), ["lambda_adv"])
    with pytest.raises(ConfigError):
        args_utils.apply_overrides(RunConfig(), ["batch_size=1.5"])


def test_train_writes_run_directory(tmp_path, config):
    out = tmp_path / "run"
    assert train(config, out) == cli.EXIT_OK

    resolved = json.loads((out / "training_config.json").read_text(encoding="utf-8"))
    assert resolved["finetune_iters"] == 3 and resolved["manifest"].endswith("blobs.json")
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in records] == [1, 2]
    results = pd.read_csv(out / "results.csv")
    assert set(results["domain"]) == {"source", "rotated"}
    assert results.loc[results["domain"] == "rotated", "accuracy"].item() == pytest.approx(records[-1]["eval"]["rotated"])
    assert (out / "train.log").exists()
    assert (out / "model_2" / "model.safetensors").exists()


def test_train_is_reproducible(tmp_path, config):
    assert train(config, tmp_path / "a", "--seed", "7") == cli.EXIT_OK
    assert train(config, tmp_path / "b", "--seed", "7") == cli.EXIT_OK
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_override_lambda_adv_zero_equals_no_adv(tmp_path, config):
    train(config, tmp_path / "zero", "--override", "lambda_adv=0")
    train(config, tmp_path / "ablated", "--override", "no_adv=true")
    assert (tmp_path / "zero" / "metrics.jsonl").read_bytes() == (tmp_path / "ablated" / "metrics.jsonl").read_bytes()


def test_config_error_exit_code(tmp_path, config):
    assert train(config, tmp_path / "x", "--override", "unknown=1") == cli.EXIT_CONFIG
    missing = tmp_path / "no_manifest.json"
    missing.write_text('{"architecture": "mlp"}')
    assert train(str(missing), tmp_path / "y") == cli.EXIT_CONFIG
    assert train(config, tmp_path / "z", "--override", "architecture=lenet-small") == cli.EXIT_CONFIG


def test_eval_reproduces_training_numbers(tmp_path, config):
    train(config, tmp_path / "run")
    records = [json.loads(line) for line in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    manifest = args_utils.load_config(config).manifest

    code = cli.main(["eval", "--checkpoint", str(tmp_path / "run"), str(tmp_path / "run" / "model_2"),
                     "--manifest", manifest, "--output_dir", str(tmp_path / "eval")])
    assert code == cli.EXIT_OK
    table = pd.read_csv(tmp_path / "eval" / "eval.csv", dtype={"seed": str})
    per_checkpoint = table[~table["seed"].isin(["mean", "std"])]
    assert len(per_checkpoint) == 4
    source = per_checkpoint[per_checkpoint["domain"] == "source"]["accuracy"]
    assert source.iloc[0] == pytest.approx(records[-1]["eval"]["source"], abs=1e-12)

    mean_row = table[(table["seed"] == "mean") & (table["domain"] == "rotated")]["accuracy"].item()
    rotated = per_checkpoint[per_checkpoint["domain"] == "rotated"]["accuracy"]
    assert mean_row == pytest.approx(rotated.mean())
    std_row = table[(table["seed"] == "std") & (table["domain"] == "rotated")]["accuracy"].item()
    assert std_row == pytest.approx(0.0)


def test_eval_refuses_architecture_mismatch(tmp_path, config):
    train(config, tmp_path / "run")
    manifest = args_utils.load_config(config).manifest
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "run"), "--manifest", manifest,
                     "--architecture", "lenet-small", "--output_dir", str(tmp_path / "eval")])
    assert code == cli.EXIT_MISMATCH


def test_sweep_reports_one_row_per_value_and_seed(tmp_path, config):
    code = cli.main(["sweep", "--config", config, "--param", "N_b", "--values", "1", "3",
                     "--seeds", "0", "1", "--output_dir", str(tmp_path / "sweep"), "--domain", "rotated"])
    assert code == cli.EXIT_OK
    table = pd.read_csv(tmp_path / "sweep" / "sweep.csv")
    assert list(table.columns) == ["param", "value", "seed", "accuracy"]
    assert len(table) == 4 and set(table["value"]) == {1, 3}
    assert table["accuracy"].between(0, 1).all()


def test_sweep_rejects_unknown_domain(tmp_path, config):
    code = cli.main(["sweep", "--config", config, "--param", "T", "--values", "1",
                     "--output_dir", str(tmp_path / "sweep"), "--domain", "usps"])
    assert code == cli.EXIT_CONFIG


def test_ablate_runs_every_variant(tmp_path, config):
    code = cli.main(["ablate", "--config", config, "--seeds", "0", "--output_dir", str(tmp_path / "ablation")])
    assert code == cli.EXIT_OK
    table = pd.read_csv(tmp_path / "ablation" / "ablation.csv")
    assert set(table["variant"]) == set(cli.ABLATIONS)
    summary = pd.read_csv(tmp_path / "ablation" / "ablation_summary.csv")
    assert set(summary.columns) == {"variant", "domain", "mean", "std"}
    assert "target-mean" in set(summary["domain"])


def test_manifest_errors_exit_with_config_code(tmp_path, config):
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"num_classes": 3, "source": {"images": "train-images.idx", "labels": "train-labels.idx"}}))
    assert train(config, tmp_path / "a", "--override", f"manifest={broken}") == cli.EXIT_CONFIG

    (tmp_path / "train-images.idx").write_bytes(b"\x01\x02\x03\x04")
    (tmp_path / "train-labels.idx").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x01\x00")
    assert train(config, tmp_path / "b", "--override", f"manifest={broken}") == cli.EXIT_CONFIG

    broken.write_text(json.dumps({
        "source": {"synthetic": "blobs", "num_classes": 3, "n_per_class": 15, "separation": 3.0},
        "targets": {"rotated": {"base": "unknown"}},
    }))
    assert train(config, tmp_path / "c", "--override", f"manifest={broken}") == cli.EXIT_CONFIG

    broken.write_text(json.dumps({
        "source": {"synthetic": "blobs", "num_classes": 3, "n_per_class": 15, "separation": 3.0},
        "checksums": {"train-labels.idx": "0" * 64},
    }))
    assert train(config, tmp_path / "d", "--override", f"manifest={broken}") == cli.EXIT_CONFIG


def test_eval_checkpoint_errors_exit_with_config_code(tmp_path, manifest):
    def evaluate(checkpoint):
        return cli.main(["eval", "--checkpoint", str(checkpoint), "--manifest", manifest, "--output_dir", str(tmp_path / "eval")])

    assert evaluate(tmp_path / "missing") == cli.EXIT_CONFIG
    (tmp_path / "empty").mkdir()
    assert evaluate(tmp_path / "empty") == cli.EXIT_CONFIG

    bare = tmp_path / "bare.safetensors"
    save_file({"weight": torch.zeros(2, dtype=torch.float64)}, str(bare))
    assert evaluate(bare) == cli.EXIT_CONFIG
    (tmp_path / "garbage.safetensors").write_bytes(b"not a checkpoint")
    assert evaluate(tmp_path / "garbage.safetensors") == cli.EXIT_CONFIG
