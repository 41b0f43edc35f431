import json
import shutil
import time

import pytest

from ecgcine.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_OK, main
from ecgcine.config import load_config
from ecgcine.pipeline import OUT_ENV, Run, artifact_digest

SMALL = ["--set", "phantom.n_subjects=20", "-q"]


def cli(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """Full smoke pipeline, timed."""
    out = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    code = cli("all", "--profile", "smoke", "--out", out, "--run", "s", "-q")
    return out / "s", code, time.perf_counter() - t0


@pytest.fixture
def upstream_copy(smoke_run, tmp_path):
    """Copy of the smoke run holding only the data and the first two training stages."""
    root, code, _ = smoke_run
    assert code == EXIT_OK
    dst = tmp_path / "copy"
    dst.mkdir()
    for name in ("config.json", "data", "pa_mae.npz", "pa_mae.json", "vae.npz", "vae.json", "template.npz"):
        src = root / name
        (shutil.copytree if src.is_dir() else shutil.copy2)(src, dst / name)
    return dst


def test_show_config(capsys):
    assert cli("show-config", "--profile", "smoke", "--set", "amdf.alpha=0.5") == EXIT_OK
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["profile"] == "smoke" and cfg["amdf"]["alpha"] == 0.5


def test_malformed_override_names_field(capsys, tmp_path):
    assert cli("data", "--profile", "smoke", "--out", tmp_path, "--set", "amdf.alpha=-1") == EXIT_CONFIG
    assert "amdf.alpha" in capsys.readouterr().err
    assert cli("data", "--out", tmp_path, "--set", "vae.epochs=two") == EXIT_CONFIG
    assert "vae.epochs" in capsys.readouterr().err
    assert not (tmp_path / "toy").exists()


def test_malformed_config_file(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"downstream": {"folds": "five"}}))
    assert cli("data", "--config", bad, "--out", tmp_path) == EXIT_CONFIG
    assert "downstream.folds" in capsys.readouterr().err
    bad.write_text("{")
    assert cli("data", "--config", bad, "--out", tmp_path) == EXIT_CONFIG
    assert str(bad) in capsys.readouterr().err


def test_bad_arguments_exit_config():
    with pytest.raises(SystemExit) as info:
        cli("train-everything")
    assert info.value.code == EXIT_CONFIG


def test_train_amdf_before_vae(capsys, tmp_path):
    args = ("--profile", "smoke", "--out", tmp_path, "--run", "r", *SMALL)
    assert cli("data", *args) == EXIT_OK
    assert cli("train-pamae", *args) == EXIT_OK
    capsys.readouterr()
    assert cli("train-amdf", *args) == EXIT_DEPENDENCY
    err = capsys.readouterr().err
    assert str(tmp_path / "r" / "vae.npz") in err
    assert not (tmp_path / "r" / "amdf.npz").exists()


def test_output_root_from_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert cli("data", "--profile", "smoke", *SMALL) == EXIT_OK
    assert (tmp_path / "smoke" / "data" / "metadata.json").exists()


def test_reproducible_manifests(tmp_path):
    for name in ("a", "b"):
        for stage in ("data", "train-pamae"):
            assert cli(stage, "--profile", "smoke", "--out", tmp_path, "--run", name, *SMALL) == EXIT_OK
    for stage in ("data", "train-pamae"):
        a = (tmp_path / "a" / "manifests" / f"{stage}.json").read_text()
        assert a == (tmp_path / "b" / "manifests" / f"{stage}.json").read_text()
    manifest = json.loads((tmp_path / "a" / "manifests" / "train-pamae.json").read_text())
    assert set(manifest) >= {"config_hash", "stage_config", "inputs", "outputs", "metrics", "seed"}
    assert manifest["inputs"]["data"] == artifact_digest(tmp_path / "a" / "data")


@pytest.mark.slow
def test_smoke_pipeline_end_to_end(smoke_run):
    root, code, seconds = smoke_run
    assert code == EXIT_OK
    assert seconds < 600, f"smoke pipeline took {seconds:.0f} s"
    for stage in ("data", "train-pamae", "train-vae", "train-amdf", "generate", "eval"):
        assert (root / "manifests" / f"{stage}.json").exists()
    gen = json.loads((root / "generate" / "report.json").read_text())
    assert gen["summary"]["n"] == 6 and len(gen["records"]) == 6
    ev = json.loads((root / "eval" / "report.json").read_text())
    assert "regression" in ev["results"]


@pytest.mark.slow
def test_alpha_override_in_manifest(upstream_copy):
    out, run = upstream_copy.parent, upstream_copy.name
    assert cli("train-amdf", "--profile", "smoke", "--out", out, "--run", run, "-q",
               "--set", "amdf.alpha=0.0") == EXIT_OK
    manifest = json.loads((upstream_copy / "manifests" / "train-amdf.json").read_text())
    assert manifest["stage_config"]["alpha"] == 0.0
    assert json.loads((upstream_copy / "config.json").read_text())["amdf"]["alpha"] == 0.0


@pytest.mark.slow
def test_stage_isolation(smoke_run, upstream_copy, capsys):
    root = smoke_run[0]
    # later-stage artifacts are absent; earlier checkpoints are untouched and still load
    for name in ("pa_mae.npz", "vae.npz", "template.npz"):
        assert artifact_digest(upstream_copy / name) == artifact_digest(root / name)
    capsys.readouterr()
    code = cli("generate", "--profile", "smoke", "--out", upstream_copy.parent, "--run", upstream_copy.name, "-q")
    assert code == EXIT_DEPENDENCY
    assert str(upstream_copy / "amdf.npz") in capsys.readouterr().err
    manifest = json.loads((root / "manifests" / "train-vae.json").read_text())
    assert manifest["outputs"]["vae.npz"] == artifact_digest(upstream_copy / "vae.npz")
    # removing generation output leaves every checkpoint loadable
    shutil.rmtree(root / "generate")
    Run(root, load_config(profile="smoke")).load_models()


@pytest.mark.slow
def test_smoke_ablation_report(smoke_run, capsys):
    root, code, _ = smoke_run
    assert code == EXIT_OK
    capsys.readouterr()
    assert cli("ablate", "--profile", "smoke", "--out", root.parent, "--run", root.name, "-q") == EXIT_OK
    report = json.loads((root / "ablate" / "report.json").read_text())
    assert set(report["table"]) == {"baseline", "no_phase_head", "no_template", "no_condition"}
    rows = [r for r in report["rows"] if r["sweep"] == "ablation"]
    assert sorted(r["variant"] for r in rows) == sorted(report["table"])  # one seed in the smoke profile
    assert "1" in report["alpha_sweep"] and set(report["alpha_sweep"]) == {"0", "0.5", "1", "2"}
    assert (root / "manifests" / "ablate.json").exists()
