import json

import pytest
import yaml

from hshield.cli import main
from hshield.experiment.dataset import generate_demo_dataset


@pytest.fixture()
def data_dir(tmp_path):
    d = tmp_path / "data"
    generate_demo_dataset(d, subjects=1, images_per_subject=2, size=16)
    return d


def test_demo_data(tmp_path, capsys):
    rc = main(["demo-data", str(tmp_path / "d"), "--subjects", "1",
               "--images", "2", "--size", "16"])
    assert rc == 0
    assert len(list((tmp_path / "d" / "subject00").glob("*.png"))) == 2


def test_protect_writes_sidecars(data_dir, tmp_path, capsys):
    rc = main(["protect", str(data_dir), "--size", "16", "--steps", "2",
               "--out", str(tmp_path / "out")])
    assert rc == 0
    pngs = list((tmp_path / "out" / "protected").glob("**/*.png"))
    assert len(pngs) == 2
    sidecar = json.loads((pngs[0].parent / (pngs[0].name + ".json")).read_text())
    assert sidecar["mask"] == "hspace_kv"
    assert sidecar["achieved_max_delta"] <= 4 / 255 + 2 ** -20


def test_finetune_generate_roundtrip(data_dir, tmp_path):
    out = tmp_path / "out"
    rc = main(["finetune", str(data_dir), "--size", "16", "--steps", "2",
               "--mode", "attn_only", "--out", str(out),
               "--checkpoint", str(tmp_path / "base.pt")])
    assert rc == 0
    ckpt = out / "personalized" / "model.pt"
    assert ckpt.exists()
    rc = main(["generate", str(ckpt), "--n", "2", "--sample-steps", "2",
               "--out", str(out)])
    assert rc == 0
    assert len(list((out / "generated").glob("*.png"))) == 2


def test_purify_emits_manifest(data_dir, tmp_path):
    out = tmp_path / "out"
    rc = main(["purify", str(data_dir), "--spec", "jpeg_q70", "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "purified" / "manifest.json").read_text())
    assert manifest["spec"] == "jpeg_q70"
    assert len(manifest["files"]) == 2


def test_evaluate_two_sets(data_dir, tmp_path, capsys):
    subject = data_dir / "subject00"
    rc = main(["evaluate", str(subject), str(subject), "--proxy-steps", "5",
               "--out", str(tmp_path / "out")])
    assert rc == 0
    text = capsys.readouterr().out
    assert "proxy_sim" in text
    assert (tmp_path / "out" / "evaluation.csv").exists()


def test_sweep_and_report(data_dir, tmp_path, capsys):
    spec = {
        "dataset": str(data_dir),
        "output_root": str(tmp_path / "runs"),
        "attack": {"methods": ["none", "hspace_kv"], "budgets": [4 / 255], "steps": 1},
        "personalization": {"mode": "lowrank", "steps": 2, "lr": 1e-3},
        "models": [{"name": "base", "image_size": 16, "base_channels": 8,
                    "pretrain_steps": 2}],
        "generate_per_cell": 1,
        "sample_steps": 2,
        "proxy_train_steps": 4,
    }
    spec_path = tmp_path / "spec.yaml"
    spec_path.write_text(yaml.safe_dump(spec))
    rc = main(["sweep", str(spec_path)])
    assert rc == 0
    run_dirs = list((tmp_path / "runs").iterdir())
    assert len(run_dirs) == 1
    metrics_csv = run_dirs[0] / "report" / "metrics.csv"
    assert metrics_csv.exists()

    rc = main(["report", str(metrics_csv), "--out", str(tmp_path / "rep")])
    assert rc == 0
    assert (tmp_path / "rep" / "report" / "method_table.csv").exists()


def test_sweep_failure_exit_code(tmp_path, data_dir):
    spec = {
        "dataset": str(data_dir),
        "output_root": str(tmp_path / "runs"),
        "train_prompt": "a photo of zebra person",  # not in vocabulary
        "attack": {"methods": ["hspace_kv"], "budgets": [4 / 255], "steps": 1},
        "personalization": {"mode": "lowrank", "steps": 1, "lr": 1e-3},
        "models": [{"name": "base", "image_size": 16, "base_channels": 8,
                    "pretrain_steps": 1}],
        "generate_per_cell": 1,
        "sample_steps": 1,
        "proxy_train_steps": 2,
    }
    spec_path = tmp_path / "spec.yaml"
    spec_path.write_text(yaml.safe_dump(spec))
    assert main(["sweep", str(spec_path)]) == 1
