import json

import pytest

from conftest import TOY_COUNTS, make_scene, read_json
from scopeagent.core.imagecore import load_image, load_manifest, save_image
from scopeagent.core.prior import load_prior
from scopeagent_cli import main


@pytest.fixture
def workspace(tmp_path):
    clean = tmp_path / "clean"
    for i in range(12):
        save_image(make_scene(seed=i), clean / f"frame{i:02d}.png")
    (tmp_path / "bench.json").write_text(json.dumps({
        "source_manifest": "sources.json",
        "seed": 1,
        "counts": TOY_COUNTS,
        "test_fraction": 0.5,
        "reuse_sources": True,
    }), encoding="utf-8")
    (tmp_path / "run.json").write_text(json.dumps({
        "manifest": "bench/manifest.json",
        "output": "runs/gt",
        "prior": "prior.json",
        "context": {"k": 2, "single": 1, "composite": 1},
    }), encoding="utf-8")
    return tmp_path


def test_end_to_end_commands(workspace, capsys):
    assert main(["--no-progress", "index", "--dir", str(workspace / "clean"),
                 "--out", str(workspace / "sources.json")]) == 0
    assert len(load_manifest(workspace / "sources.json")) == 12

    assert main(["synth", "--config", str(workspace / "bench.json"), "--out", str(workspace / "bench")]) == 0
    manifest = load_manifest(workspace / "bench" / "manifest.json")
    assert len(manifest) == 22

    assert main(["train-prior", "--manifest", str(workspace / "bench" / "manifest.json"),
                 "--out", str(workspace / "prior.json"), "--epochs", "100", "--temperature", "1.5"]) == 0
    assert read_json(workspace / "prior.json")["temperature"] == 1.5

    assert main(["run", "--config", str(workspace / "run.json")]) == 0
    run_dir = workspace / "runs" / "gt"
    assert (run_dir / "reports" / "accuracy.md").is_file()
    assert (run_dir / "reports" / "quality.csv").is_file()
    assert "Run complete: 11 records" in capsys.readouterr().out

    assert main(["report", "--run", str(run_dir)]) == 0
    assert str(run_dir / "reports" / "accuracy.csv") in capsys.readouterr().out

    entry = next(e for e in manifest if len(e.label) == 2)
    image = manifest.distorted_file(entry)
    out = workspace / "enhanced" / f"{entry.id}.png"
    assert main(["enhance", "--image", str(image), "--label", str(entry.label), "--out", str(out),
                 "--use-sidecar"]) == 0
    assert load_image(out).shape == load_image(image).shape
    assert capsys.readouterr().out.count("->") == 2

    csv_path = workspace / "eval.csv"
    assert main(["evaluate", "--manifest", str(workspace / "bench" / "manifest.json"),
                 "--out", str(csv_path), "--enhanced", str(workspace / "enhanced")]) == 0
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "id,variant,psnr,ssim,niqe,brisque"
    assert any(line.startswith(f"{entry.id},enhanced,") for line in lines)


def test_ablate_command(workspace):
    main(["index", "--dir", str(workspace / "clean"), "--out", str(workspace / "sources.json")])
    main(["synth", "--config", str(workspace / "bench.json"), "--out", str(workspace / "bench")])
    main(["train-prior", "--manifest", str(workspace / "bench" / "manifest.json"),
          "--out", str(workspace / "prior.json"), "--epochs", "50"])
    contexts = workspace / "contexts.json"
    contexts.write_text('[{"k": 0}, {"k": 2, "single": 1, "composite": 1}]', encoding="utf-8")

    assert main(["ablate", "--config", str(workspace / "run.json"), "--contexts", str(contexts)]) == 0
    grid = (workspace / "runs" / "gt" / "reports" / "ablation.csv").read_text(encoding="utf-8").splitlines()
    assert grid[0] == "Setting,#1,#2"
    assert grid[1] == "k,0,2"


def distorted_bytes(manifest_path):
    manifest = load_manifest(manifest_path)
    return [manifest.distorted_file(e).read_bytes() for e in manifest]


def test_synth_source_and_seed_flags(workspace):
    elsewhere = workspace / "elsewhere" / "sources.json"
    assert main(["index", "--dir", str(workspace / "clean"), "--out", str(elsewhere)]) == 0

    assert main(["synth", "--config", str(workspace / "bench.json"), "--out", str(workspace / "a"),
                 "--source", str(elsewhere)]) == 0
    assert main(["synth", "--config", str(workspace / "bench.json"), "--out", str(workspace / "b"),
                 "--source", str(elsewhere), "--seed", "5"]) == 0

    config = read_json(workspace / "bench.json")
    config.update(source_manifest=str(elsewhere), seed=5)
    (workspace / "bench5.json").write_text(json.dumps(config), encoding="utf-8")
    assert main(["synth", "--config", str(workspace / "bench5.json"), "--out", str(workspace / "c")]) == 0

    assert distorted_bytes(workspace / "b" / "manifest.json") == distorted_bytes(workspace / "c" / "manifest.json")
    assert distorted_bytes(workspace / "a" / "manifest.json") != distorted_bytes(workspace / "b" / "manifest.json")

    # without --source the config's sources.json does not exist
    assert main(["synth", "--config", str(workspace / "bench.json"), "--out", str(workspace / "d")]) == 1


def test_train_prior_flags(workspace, capsys):
    main(["index", "--dir", str(workspace / "clean"), "--out", str(workspace / "sources.json")])
    main(["synth", "--config", str(workspace / "bench.json"), "--out", str(workspace / "bench")])
    manifest = str(workspace / "bench" / "manifest.json")
    capsys.readouterr()

    assert main(["train-prior", "--manifest", manifest, "--out", str(workspace / "zero.json"), "--epochs", "0"]) == 0
    assert "untrained" in capsys.readouterr().out
    zero = load_prior(workspace / "zero.json")
    assert all(not head.weights.any() for head in zero.presence.values())

    assert main(["train-prior", "--manifest", manifest, "--out", str(workspace / "lr.json"),
                 "--epochs", "5", "--lr", "0.05", "--seed", "2"]) == 0
    assert "final loss" in capsys.readouterr().out
    assert main(["train-prior", "--manifest", manifest, "--out", str(workspace / "lr2.json"),
                 "--epochs", "5", "--learning-rate", "0.05"]) == 0
    assert read_json(workspace / "lr.json") == read_json(workspace / "lr2.json")


def test_failures_return_nonzero(workspace, capsys):
    assert main(["run", "--config", str(workspace / "missing.json")]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["type"] == "ConfigError"

    assert main(["run", "--config", str(workspace / "run.json")]) == 1
    assert main(["enhance", "--image", str(workspace / "clean" / "frame00.png"), "--label", "smoke:mild",
                 "--out", str(workspace / "x.png")]) == 1
    (workspace / "contexts.json").write_text('{"k": 0}', encoding="utf-8")
    assert main(["ablate", "--config", str(workspace / "run.json"),
                 "--contexts", str(workspace / "contexts.json")]) == 1


def test_usage_errors_exit():
    with pytest.raises(SystemExit):
        main([])
    with pytest.raises(SystemExit):
        main(["enhance", "--image", "a.png"])
