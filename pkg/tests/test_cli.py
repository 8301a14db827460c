"""CLI dispatch, exit codes, determinism of outputs."""

import json

import pytest

from reinlab.cli import main


def test_audit_params_reference_value(capsys):
    code = main(["audit-params", "--c", "1024", "--layers", "24", "--m", "100",
                 "--r", "16", "--c-prime", "256", "--variant", "rein-lora"])
    out = capsys.readouterr().out
    assert code == 0
    assert "2,990,080" in out


def test_audit_params_csv_output(tmp_path, capsys):
    csv_path = tmp_path / "report.csv"
    code = main(["audit-params", "--c", "64", "--layers", "4", "--m", "16",
                 "--r", "4", "--c-prime", "16", "--csv", str(csv_path)])
    assert code == 0
    assert csv_path.read_text().startswith("name,shape,count,component")


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_rejected(capsys):
    assert main(["audit-params", "--c", "8", "--layers", "1", "--wat"]) == 1


def test_gradcheck_passes(capsys):
    code = main(["gradcheck", "--seed", "7"])
    out = capsys.readouterr().out
    assert code == 0
    assert "PASS" in out and "max relative error" in out


def test_gen_data_deterministic(tmp_path, capsys):
    import hashlib

    def digest(p):
        h = hashlib.sha256()
        for f in sorted(p.rglob("*")):
            if f.is_file():
                h.update(f.relative_to(p).as_posix().encode())
                h.update(f.read_bytes())
        return h.hexdigest()

    args = ["gen-data", "--k", "6", "--size", "32", "--train", "3", "--val",
            "1", "--test", "1", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert (tmp_path / "a" / "resolved_config.json").exists()


def test_train_eval_swap_cycle(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--k", "6", "--size", "32",
                 "--train", "4", "--val", "2", "--test", "2", "--seed", "1"]) == 0

    cfg = {
        "vit": {"image_size": 32, "patch_size": 8, "depth": 2, "dim": 32,
                "heads": 4, "mlp_ratio": 4.0, "tap_layers": [1, 2]},
        "rein": {"c": 32, "depth": 2, "m": 6, "r": 2, "c_prime": 8,
                 "use_link": True, "use_share": True, "use_lora": True},
        "head": {"num_classes": 6, "embed_dim": 16, "num_queries": 6,
                 "use_query_head": True},
        "mode": "rein", "iterations": 4, "batch_size": 2, "eval_interval": 4,
        "loss_window": 4, "seed": 0, "data_root": "",
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))

    run_a = tmp_path / "runA"
    run_b = tmp_path / "runB"
    base_args = ["train", "--data", str(data), "--config", str(cfg_path)]
    assert main(base_args + ["--out", str(run_a)]) == 0
    assert main(base_args + ["--out", str(run_b), "--seed", "5"]) == 0
    assert (run_a / "checkpoint.ckpt").exists()
    assert (run_a / "metrics.csv").exists()
    assert json.loads((run_a / "resolved_config.json").read_text())[
        "config"]["mode"] == "rein"

    assert main(["eval", "--ckpt", str(run_a / "checkpoint.ckpt"), "--data",
                 str(data), "--split", "test"]) == 0
    out = capsys.readouterr().out
    assert "mIoU" in out

    swapped = tmp_path / "swapped.ckpt"
    assert main(["swap-adapter", "--base", str(run_a / "checkpoint.ckpt"),
                 "--donor", str(run_b / "checkpoint.ckpt"), "--out",
                 str(swapped)]) == 0
    assert swapped.exists()


def test_eval_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    code = main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--data",
                 str(tmp_path)])
    assert code == 2
