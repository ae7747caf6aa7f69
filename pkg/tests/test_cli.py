import json

import numpy as np
import pytest

from conftest import make_tiny_model_cfg
from uvmapid.cli import main
from uvmapid.datakit import load_manifest
from uvmapid.images import load_image
from uvmapid.metrics import validate_report
from uvmapid.synthetic import write_faces

STEPS = 3


def dir_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("conf") / "run.json"
    conf = {"model": make_tiny_model_cfg().to_dict(), "train": {"sample_steps": 2}, "sample": {"steps": 2}}
    path.write_text(json.dumps(conf), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_dir, tiny_config):
    out = tmp_path_factory.mktemp("train")
    argv = ["train", "--manifest", str(dataset_dir / "manifest.jsonl"), "--steps", str(STEPS),
            "--config", str(tiny_config), "--seed", "5", "--output-dir", str(out)]
    assert main(argv) == 0
    return out, argv


def test_train_outputs(trained):
    out, _ = trained
    rows = (out / "loss.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "step,loss" and len(rows) == STEPS + 1
    assert all(np.isfinite(float(r.split(",")[1])) for r in rows[1:])
    run = json.loads((out / "run.json").read_text(encoding="utf-8"))
    assert run["seed"] == 5 and run["train_config"]["seed"] == 5
    assert (out / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_rerun_is_identical(trained, tmp_path):
    out, argv = trained
    argv = argv[:-1] + [str(tmp_path)]
    assert main(argv) == 0
    assert dir_bytes(out) == dir_bytes(tmp_path)


def test_missing_manifest_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["train", "--manifest", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_arguments_are_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["train"]) == 2
    assert main(["train", "--manifest", "x", "--steps", "many"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["render", "--texture", "t.png", "--config", str(bad)]) == 2
    assert main(["--device", "cuda", "render", "--texture", "t.png"]) == 2


def test_sample_is_byte_identical(trained, dataset_dir, tiny_config, tmp_path):
    ckpt = trained[0] / "checkpoint.uvid"
    face = dataset_dir / "faces" / "id000.png"
    outs = []
    for name in ("a", "b"):
        argv = ["sample", "--checkpoint", str(ckpt), "--face-image", str(face), "--prompt", "an asian man",
                "--attributes", "--count", "2", "--seed", "11", "--config", str(tiny_config),
                "--output-dir", str(tmp_path / name)]
        assert main(argv) == 0
        outs.append(dir_bytes(tmp_path / name))
    assert outs[0] == outs[1]
    assert sorted(outs[0]) == ["sample.json", "sample_000.png", "sample_001.png"]
    meta = json.loads(outs[0]["sample.json"])
    assert meta["seed"] == 11 and meta["prompt"] == "a sks texturemap of an asian man"
    assert outs[0]["sample_000.png"] != outs[0]["sample_001.png"]


def test_sample_count_zero_is_usage_error(trained, dataset_dir, tmp_path):
    argv = ["sample", "--checkpoint", str(trained[0] / "checkpoint.uvid"),
            "--face-image", str(dataset_dir / "faces" / "id000.png"), "--prompt", "x", "--count", "0",
            "--output-dir", str(tmp_path)]
    assert main(argv) == 2


def test_sample_corrupt_checkpoint_is_usage_error(dataset_dir, tmp_path, capsys):
    bad = tmp_path / "bad.uvid"
    bad.write_bytes(b"UVID\x01\x00")
    argv = ["sample", "--checkpoint", str(bad), "--face-image", str(dataset_dir / "faces" / "id000.png"),
            "--prompt", "x", "--output-dir", str(tmp_path / "o")]
    assert main(argv) == 2
    assert "truncated" in capsys.readouterr().err


def test_render_is_deterministic(dataset_dir, tmp_path):
    tex = dataset_dir / "textures" / "id000_0.png"
    for name in ("a", "b"):
        assert main(["render", "--texture", str(tex), "--seed", "3", "--output-dir", str(tmp_path / name)]) == 0
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")
    img = load_image(tmp_path / "a" / "render.png")
    assert img.shape[2] == 3 and img.max() > 0
    assert json.loads((tmp_path / "a" / "render.json").read_text(encoding="utf-8"))["seed"] == 3


def test_render_missing_mesh_is_usage_error(dataset_dir, tmp_path, capsys):
    tex = dataset_dir / "textures" / "id000_0.png"
    assert main(["render", "--texture", str(tex), "--mesh", str(tmp_path / "no.obj")]) == 2
    assert "no.obj" in capsys.readouterr().err


def test_eval_report_validates(dataset_dir, tmp_path):
    argv = ["eval", "--manifest", str(dataset_dir / "manifest.jsonl"), "--splits", "2", "--output-dir", str(tmp_path)]
    assert main(argv) == 0
    data = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    validate_report(data)
    assert (tmp_path / "report.txt").read_text(encoding="utf-8").strip()


def test_eval_texture_dir(dataset_dir, tmp_path):
    argv = ["eval", "--texture-dir", str(dataset_dir / "textures"), "--splits", "2", "--output-dir", str(tmp_path)]
    assert main(argv) == 0
    validate_report(json.loads((tmp_path / "report.json").read_text(encoding="utf-8")))


def test_eval_strict_with_broken_embedder(dataset_dir, tmp_path, capsys):
    (tmp_path / "emb" / "face").mkdir(parents=True)
    base = ["eval", "--manifest", str(dataset_dir / "manifest.jsonl"), "--splits", "2",
            "--embeddings-dir", str(tmp_path / "emb")]
    assert main(base + ["--output-dir", str(tmp_path / "lenient")]) == 0
    assert "failed" in capsys.readouterr().err
    assert main(base + ["--strict", "--output-dir", str(tmp_path / "strict")]) == 1
    validate_report(json.loads((tmp_path / "strict" / "report.json").read_text(encoding="utf-8")))


def test_dataset_validate_lists_violations(dataset_dir, tmp_path, capsys):
    lines = (dataset_dir / "manifest.jsonl").read_text(encoding="utf-8").splitlines()
    rec = json.loads(lines[1])
    rec["texture_path"] = "textures/missing.png"
    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join([lines[0], lines[1], lines[1], json.dumps(rec)]) + "\n", encoding="utf-8")
    # relative paths resolve against the manifest directory, so point at the real files
    text = broken.read_text(encoding="utf-8").replace('"textures/', f'"{dataset_dir.as_posix()}/textures/')
    text = text.replace('"faces/', f'"{dataset_dir.as_posix()}/faces/')
    broken.write_text(text, encoding="utf-8")
    assert main(["dataset", "validate", "--manifest", str(broken)]) == 2
    out = capsys.readouterr().out
    assert "[duplicate-key]" in out and "[missing-file]" in out and "missing.png" in out
    assert main(["dataset", "validate", "--manifest", str(dataset_dir / "manifest.jsonl")]) == 0


def test_dataset_balance(dataset_dir, tmp_path, capsys):
    assert main(["dataset", "balance", "--manifest", str(dataset_dir / "manifest.jsonl"), "--output-dir", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "balance.json").read_text(encoding="utf-8"))
    assert rep["total"] == 8
    # 4 identities cycle through 6 cells, so two cells are empty
    assert rep["balanced"] is False
    assert "total=8" in capsys.readouterr().out


def test_dataset_build_rerun_identical(trained, tmp_path):
    write_faces(tmp_path / "in", 2, seed=2)
    outs = []
    for name in ("a", "b"):
        argv = ["dataset", "build", "--checkpoint", str(trained[0] / "checkpoint.uvid"),
                "--faces", str(tmp_path / "in" / "faces.jsonl"), "--candidates-per-id", "2", "--keep-per-id", "1",
                "--seed", "4", "--output-dir", str(tmp_path / name)]
        assert main(argv) == 0
        outs.append(dir_bytes(tmp_path / name))
    assert outs[0] == outs[1]
    assert json.loads(outs[0]["build.json"])["seed"] == 4
    m = load_manifest(tmp_path / "a" / "manifest.jsonl")
    assert len(m.records) == 2
    assert main(["dataset", "validate", "--manifest", str(tmp_path / "a" / "manifest.jsonl")]) == 0


def test_dataset_build_bad_policy(trained, tmp_path):
    write_faces(tmp_path / "in", 1)
    argv = ["dataset", "build", "--checkpoint", str(trained[0] / "checkpoint.uvid"),
            "--faces", str(tmp_path / "in" / "faces.jsonl"), "--candidates-per-id", "1", "--keep-per-id", "2",
            "--output-dir", str(tmp_path / "o")]
    assert main(argv) == 2


def test_config_seed_and_flag_precedence(dataset_dir, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"seed": 9}), encoding="utf-8")
    tex = dataset_dir / "textures" / "id000_0.png"
    assert main(["render", "--texture", str(tex), "--config", str(conf), "--output-dir", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "render.json").read_text(encoding="utf-8"))["seed"] == 9
    assert main(["render", "--texture", str(tex), "--config", str(conf), "--seed", "1", "--output-dir", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "render.json").read_text(encoding="utf-8"))["seed"] == 1


def test_unreadable_face_image_is_usage_error(trained, tmp_path):
    face = tmp_path / "face.png"
    face.write_bytes(b"garbage")
    argv = ["sample", "--checkpoint", str(trained[0] / "checkpoint.uvid"), "--face-image", str(face),
            "--prompt", "x", "--output-dir", str(tmp_path / "o")]
    assert main(argv) == 2
