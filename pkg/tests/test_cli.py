import json

import numpy as np
import pytest

from celldino.cli import main
from celldino.data import load_manifest
from celldino.dino import load_dino
from celldino.embed import load_embeddings
from celldino.evaluate import load_report

VIT_CFG = {
    "image_size": 32,
    "patch_size": 8,
    "in_channels": 2,
    "embed_dim": 32,
    "depth": 1,
    "num_heads": 2,
    "seed": 0,
}
DINO_CFG = {
    "out_dim": 64,
    "head_hidden": 64,
    "head_bottleneck": 32,
    "global_crop_px": 32,
    "local_crop_px": 16,
    "n_local_views": 4,
    "epochs": 2,
    "batch_size": 8,
    "seed": 0,
}


def run(*argv) -> int:
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(
        "gen-data", "--n", "12", "--classes", "2", "--seed", "5",
        "--height", "64", "--width", "64", "--out", str(root / "data"),
    ) == 0
    cfg = {"vit": VIT_CFG, "dino": DINO_CFG, "split_seed": 1,
           "dataset": str(root / "data" / "manifest.json")}
    (root / "pretrain.json").write_text(json.dumps(cfg))
    assert run(
        "pretrain", "--config", str(root / "pretrain.json"), "--out", str(root / "run")
    ) == 0
    return root


def test_gen_data_outputs(workspace):
    manifest = load_manifest(workspace / "data" / "manifest.json")
    assert len(manifest) == 12
    assert (workspace / "data" / "runconfig.json").exists()
    runconfig = json.loads((workspace / "data" / "runconfig.json").read_text())
    assert runconfig["tool"] == "celldino"
    assert "version" in runconfig


def test_gen_data_refuses_existing_dir(workspace, capsys):
    code = run("gen-data", "--n", "4", "--classes", "2", "--out", str(workspace / "data"))
    assert code == 1
    assert "--force" in capsys.readouterr().err


def test_gen_data_invalid_classes_no_partial_dir(tmp_path, capsys):
    out = tmp_path / "bad"
    code = run("gen-data", "--n", "4", "--classes", "1", "--out", str(out))
    assert code == 1
    assert not out.exists()


def test_pretrain_outputs(workspace):
    ckpt = load_dino(workspace / "run" / "dino.ckpt")
    assert ckpt.epoch == 2
    log_lines = (workspace / "run" / "train_log.jsonl").read_text().strip().splitlines()
    assert len(log_lines) == 2
    record = json.loads(log_lines[0])
    assert set(record) == {"epoch", "mean_loss", "teacher_entropy", "lambda", "lr"}


def test_pretrain_missing_dataset_fails_before_training(tmp_path, capsys):
    cfg = {"vit": VIT_CFG, "dino": DINO_CFG, "dataset": str(tmp_path / "nope.json")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    code = run("pretrain", "--config", str(path), "--out", str(tmp_path / "out"))
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_pretrain_resume_continues_schedule(workspace, tmp_path):
    out = tmp_path / "resumed"
    code = run(
        "pretrain", "--config", str(workspace / "pretrain.json"),
        "--epochs", "4", "--resume", str(workspace / "run" / "dino.ckpt"),
        "--out", str(out),
    )
    assert code == 0
    resumed = load_dino(out / "dino.ckpt")
    assert resumed.epoch == 4
    lines = [json.loads(s) for s in (out / "train_log.jsonl").read_text().strip().splitlines()]
    assert [r["epoch"] for r in lines] == [2, 3]


def test_embed_mapping_identity(workspace):
    out = workspace / "emb-map"
    code = run(
        "embed", "--backbone", str(workspace / "run" / "dino.ckpt"),
        "--dataset", str(workspace / "data" / "manifest.json"),
        "--adapter", "map", "--out", str(out),
    )
    assert code == 0
    emb = load_embeddings(out / "embeddings.emb")
    assert emb.matrix.shape == (12, 32)
    assert emb.provenance["weights"] == "dino-pretrained"
    assert emb.provenance["dino_epochs"] == 2


def test_embed_replication_doubles_dim(workspace):
    out = workspace / "emb-rep"
    code = run(
        "embed", "--backbone", str(workspace / "run" / "dino.ckpt"),
        "--dataset", str(workspace / "data" / "manifest.json"),
        "--adapter", "replicate", "--out", str(out),
    )
    assert code == 0
    emb = load_embeddings(out / "embeddings.emb")
    assert emb.matrix.shape == (12, 64)


def test_embed_channel_mismatch_is_actionable(workspace, tmp_path, capsys):
    from celldino.vit import ViTConfig, init_vit, save_vit

    wide = init_vit(ViTConfig(image_size=32, patch_size=8, in_channels=4, embed_dim=32, depth=1, num_heads=2))
    save_vit(tmp_path / "wide.vitw", wide)
    code = run(
        "embed", "--backbone", str(tmp_path / "wide.vitw"),
        "--dataset", str(workspace / "data" / "manifest.json"),
        "--adapter", "map", "--out", str(tmp_path / "emb"),
    )
    assert code == 1
    err = capsys.readouterr().err
    assert "--map" in err


def test_embed_explicit_map_to_wider_backbone(workspace, tmp_path):
    from celldino.vit import ViTConfig, init_vit, save_vit

    wide = init_vit(ViTConfig(image_size=32, patch_size=8, in_channels=4, embed_dim=32, depth=1, num_heads=2))
    save_vit(tmp_path / "wide.vitw", wide)
    out = tmp_path / "emb"
    code = run(
        "embed", "--backbone", str(tmp_path / "wide.vitw"),
        "--dataset", str(workspace / "data" / "manifest.json"),
        "--adapter", "map", "--map", "protein:0", "--map", "nucleus:2",
        "--dst-channels", "4", "--out", str(out),
    )
    assert code == 0
    emb = load_embeddings(out / "embeddings.emb")
    assert emb.matrix.shape == (12, 32)
    assert emb.provenance["weights"] == "random-init"


def test_train_head_outputs(workspace):
    out = workspace / "head"
    code = run(
        "train-head", "--embeddings", str(workspace / "emb-map" / "embeddings.emb"),
        "--dataset", str(workspace / "data" / "manifest.json"),
        "--epochs", "3", "--split-seed", "1", "--out", str(out),
    )
    assert code == 0
    assert (out / "head.bin").exists()
    lines = (out / "train_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 3


def test_crossval_outputs_and_determinism(workspace):
    args = (
        "crossval", "--embeddings", str(workspace / "emb-map" / "embeddings.emb"),
        "--dataset", str(workspace / "data" / "manifest.json"),
        "--epochs", "3", "--k", "3", "--split-seed", "1",
    )
    out1, out2 = workspace / "cv1", workspace / "cv2"
    assert run(*args, "--out", str(out1)) == 0
    assert run(*args, "--out", str(out2)) == 0
    report = load_report(out1 / "report.json")
    assert len(report.fold_test_f1) == 3
    assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
    assert (out1 / "table.txt").read_bytes() == (out2 / "table.txt").read_bytes()
    assert (out1 / "chart.svg").read_bytes() == (out2 / "chart.svg").read_bytes()
    # holdout ids in the report match the pretraining holdout
    ckpt = load_dino(workspace / "run" / "dino.ckpt")
    assert sorted(report.provenance["test_ids"]) == sorted(ckpt.holdout_ids)


def test_report_merges_multiple_runs(workspace, capsys):
    out = workspace / "combined"
    code = run(
        "report", "--reports", str(workspace / "cv1" / "report.json"),
        str(workspace / "cv2" / "report.json"), "--out", str(out),
    )
    assert code == 0
    table = (out / "table.txt").read_text()
    assert table.count("channel mapping") == 2
    assert (out / "chart.svg").read_text().startswith("<svg")
    assert "Mean Macro F1" in capsys.readouterr().out


def test_unknown_config_key_is_user_error(workspace, tmp_path, capsys):
    cfg = {"vit": {**VIT_CFG, "bogus": 1}, "dino": DINO_CFG,
           "dataset": str(workspace / "data" / "manifest.json")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    code = run("pretrain", "--config", str(path), "--out", str(tmp_path / "o"))
    assert code == 1
    assert "bad vit config" in capsys.readouterr().err
