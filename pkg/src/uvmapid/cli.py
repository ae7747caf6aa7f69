"""``uvmapid`` command line: train, sample, render, eval, dataset {build,validate,balance}.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

Option precedence: explicit command-line flags override values from the
``--config`` JSON file, which override built-in defaults. The config file may
hold ``train``, ``model``, ``render``, ``selection`` and ``eval`` sections.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .datakit import balance_report, load_manifest, save_manifest, validate_manifest
from .encoders import EncoderSuite
from .errors import CheckpointError, UVMapIDError, ValidationError
from .images import file_sha256, load_image, save_image, save_png
from .metrics import CorpusItem, EvalConfig, evaluate_corpus, validate_report
from .render import RenderConfig, load_layout, load_obj, load_template_mesh, rasterize
from .trainer import ModelConfig, TrainConfig, finetune

log = logging.getLogger("uvmapid")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="single source of randomness (default 0)")
    p.add_argument("--config", default=S, help="JSON run configuration")
    p.add_argument("--output-dir", default=S, help="where artifacts are written (default .)")
    p.add_argument("--embeddings-dir", default=S, help="precomputed encoder outputs")
    p.add_argument("--jobs", type=int, default=S, help="worker cap; results do not depend on it")
    p.add_argument("--strict", action="store_true", default=S, help="any metric failure is an error")
    p.add_argument("--device", default=S, help="torch device passthrough (cpu only at desk scale)")
    p.add_argument("-v", "--verbose", action="count", default=S)
    return p


GLOBAL_DEFAULTS = {
    "seed": 0,
    "config": None,
    "output_dir": ".",
    "embeddings_dir": None,
    "jobs": 1,
    "strict": False,
    "device": "cpu",
    "verbose": 0,
}


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    ap = argparse.ArgumentParser(prog="uvmapid", parents=[g], description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"uvmapid {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[g], help="fine-tune on a dataset manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--no-race-gender-labels", action="store_true", default=None)
    t.add_argument("--uv-maps-per-id", type=int)
    t.add_argument("--prior-set-size", type=int)

    s = sub.add_parser("sample", parents=[g], help="generate textures for one face")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--face-image", required=True)
    s.add_argument("--prompt", required=True, help="full prompt, or [P] text when --attributes is set")
    s.add_argument("--attributes", action="store_true", help="treat --prompt as the [P] slot of the template")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg-scale", type=float)

    r = sub.add_parser("render", parents=[g], help="rasterize a texture onto a mesh")
    r.add_argument("--texture", required=True)
    r.add_argument("--mesh", help="OBJ with UVs (default: bundled template)")
    r.add_argument("--render-config", help="JSON RenderConfig")
    r.add_argument("--out-name", default="render.png")

    e = sub.add_parser("eval", parents=[g], help="compute the four texture metrics")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--texture-dir")
    e.add_argument("--mesh")
    e.add_argument("--layout")
    e.add_argument("--splits", type=int)
    e.add_argument("--dfr-threshold", type=float)

    d = sub.add_parser("dataset", parents=[g], help="dataset operations")
    dsub = d.add_subparsers(dest="dataset_command", required=True)
    b = dsub.add_parser("build", parents=[g], help="generate-and-select a texture dataset")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--faces", required=True, help="faces.jsonl listing")
    b.add_argument("--candidates-per-id", type=int)
    b.add_argument("--keep-per-id", type=int)
    b.add_argument("--mesh")
    b.add_argument("--layout")
    v = dsub.add_parser("validate", parents=[g], help="list manifest violations")
    v.add_argument("--manifest", required=True)
    bal = dsub.add_parser("balance", parents=[g], help="race x gender counts")
    bal.add_argument("--manifest", required=True)
    return ap


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    return data


def _require_file(path: str | None, what: str) -> Path:
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _encoders(args, model_cfg: ModelConfig | None = None, layout=None) -> EncoderSuite:
    model_cfg = model_cfg or ModelConfig()
    suite = EncoderSuite.reference(layout or load_layout(), model_cfg.denoiser.d_text, model_cfg.max_text_tokens, model_cfg.d_face)
    if args.embeddings_dir:
        suite = suite.with_embeddings_dir(args.embeddings_dir)
    return suite


def _sha(path: Path) -> str:
    return file_sha256(path)


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _model_config(conf: dict) -> ModelConfig:
    m = conf.get("model")
    return ModelConfig.from_dict({**ModelConfig().to_dict(), **m}) if m else ModelConfig()


def cmd_train(args, conf: dict) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    manifest = load_manifest(manifest_path)
    train = dict(conf.get("train", {}))
    train["seed"] = args.seed
    for flag, key in (
        ("steps", "steps"),
        ("learning_rate", "learning_rate"),
        ("batch_size", "batch_size"),
        ("uv_maps_per_id", "uv_maps_per_id"),
        ("prior_set_size", "prior_set_size"),
    ):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    if args.no_race_gender_labels:
        train["use_race_gender_labels"] = False
    config = TrainConfig.from_dict(train)
    model_cfg = _model_config(conf)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    ckpt = finetune(manifest, config, model_cfg=model_cfg, encoders=_encoders(args, model_cfg))
    save_checkpoint(ckpt, out / "checkpoint.uvid")
    history = ckpt.metadata["loss_history"]
    with open(out / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(history):
            w.writerow([i, repr(float(loss))])
    _plot_loss(history, out / "loss.png")
    _write_json(
        out / "run.json",
        {
            "command": "train",
            "version": __version__,
            "seed": args.seed,
            "manifest": str(manifest_path),
            "manifest_sha256": _sha(manifest_path),
            "checkpoint_sha256": _sha(out / "checkpoint.uvid"),
            "train_config": config.to_dict(),
            "model_config": model_cfg.to_dict(),
            "final_loss": history[-1],
        },
    )
    print(f"trained {config.steps} steps, final loss {history[-1]:.5f}; checkpoint at {out / 'checkpoint.uvid'}")
    return EXIT_OK


def _plot_loss(history: list[float], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
    ax.plot(np.arange(len(history)), history, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_sample(args, conf: dict) -> int:
    from .sampling import TextureSampler

    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    face_path = _require_file(args.face_image, "face image")
    ckpt = load_checkpoint(ckpt_path)
    model_cfg = ModelConfig.from_dict(ckpt.metadata["model_config"])
    sample_conf = conf.get("sample", {})
    sampler = TextureSampler(
        ckpt,
        _encoders(args, model_cfg),
        steps=args.steps or sample_conf.get("steps"),
        cfg_scale=args.cfg_scale if args.cfg_scale is not None else sample_conf.get("cfg_scale"),
    )
    prompt = sampler.prompt_for(args.prompt) if args.attributes else args.prompt
    try:
        face = load_image(face_path)
    except OSError as exc:
        raise UsageError(f"cannot read face image {face_path}: {exc}") from exc
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .trainer import sub_seed

    files = []
    for i in range(args.count):
        tex = sampler.sample(face, prompt, sub_seed(args.seed, i), face_key=str(face_path))
        name = f"sample_{i:03d}.png"
        save_png(tex, out / name)
        files.append(name)
    _write_json(
        out / "sample.json",
        {
            "command": "sample",
            "version": __version__,
            "prompt": prompt,
            "seed": args.seed,
            "count": args.count,
            "steps": sampler.steps,
            "cfg_scale": sampler.cfg_scale,
            "face_image": str(face_path),
            "face_image_sha256": _sha(face_path),
            "checkpoint_sha256": _sha(ckpt_path),
            "outputs": files,
        },
    )
    print(f"wrote {args.count} texture(s) to {out}")
    return EXIT_OK


def _render_config(path: str | None, conf: dict) -> RenderConfig:
    data = dict(conf.get("render", {}))
    if path is not None:
        data.update(json.loads(_require_file(path, "render config").read_text(encoding="utf-8")))
    return RenderConfig.from_dict(data)


def _mesh(path: str | None):
    if path is None:
        return load_template_mesh()
    return load_obj(_require_file(path, "mesh"))


def cmd_render(args, conf: dict) -> int:
    tex_path = _require_file(args.texture, "texture")
    mesh = _mesh(args.mesh)
    cfg = _render_config(args.render_config, conf)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = rasterize(mesh, load_image(tex_path), cfg)
    save_image(image, out / args.out_name)
    _write_json(
        out / (Path(args.out_name).stem + ".json"),
        {
            "command": "render",
            "version": __version__,
            "seed": args.seed,
            "texture": str(tex_path),
            "texture_sha256": _sha(tex_path),
            "mesh": args.mesh or "<bundled template>",
            "render_config": asdict(cfg),
        },
    )
    print(f"wrote {out / args.out_name}")
    return EXIT_OK


def _corpus_from_manifest(path: Path, conf: dict) -> list[CorpusItem]:
    from .trainer import PromptTemplate

    manifest = load_manifest(path)
    template = PromptTemplate(manifest.identifier_token)
    use_labels = conf.get("train", {}).get("use_race_gender_labels", True)
    faces: dict[str, np.ndarray] = {}
    items = []
    for rec in manifest.records:
        tex_path = manifest.resolve(rec.texture_path)
        face_path = manifest.resolve(rec.face_image_path)
        if str(face_path) not in faces:
            faces[str(face_path)] = load_image(face_path)
        items.append(
            CorpusItem(
                texture=load_image(tex_path),
                texture_key=str(tex_path),
                identity_id=rec.identity_id,
                prompt=template.render(rec.prompt_attributes, use_labels),
                face_image=faces[str(face_path)],
                face_key=str(face_path),
            )
        )
    return items


def cmd_eval(args, conf: dict) -> int:
    if args.manifest:
        items = _corpus_from_manifest(_require_file(args.manifest, "manifest"), conf)
    else:
        d = Path(args.texture_dir)
        if not d.is_dir():
            raise UsageError(f"texture directory not found: {d}")
        paths = sorted(d.glob("*.png")) + sorted(d.glob("*.ppm"))
        items = [CorpusItem(texture=load_image(p), texture_key=str(p)) for p in paths]
    if not items:
        raise UsageError("nothing to evaluate")
    layout = load_layout(args.layout) if args.layout else load_layout()
    mesh = _mesh(args.mesh)
    ec = dict(conf.get("eval", {}))
    render = RenderConfig.from_dict({"width": 64, "height": 64, **conf.get("render", {})})
    config = EvalConfig(
        splits=args.splits or ec.get("splits", 10),
        dfr_threshold=args.dfr_threshold if args.dfr_threshold is not None else ec.get("dfr_threshold", 0.4),
        render=render,
        seed=args.seed,
        jobs=args.jobs,
    )
    report = evaluate_corpus(items, _encoders(args, layout=layout), mesh, layout, config)
    data = report.to_dict()
    validate_report(data)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    table = report.table_row()
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    for name, msg in sorted(report.failures.items()):
        print(f"metric {name} failed: {msg}", file=sys.stderr)
    if report.failures and args.strict:
        return EXIT_RUNTIME
    if not report.computed():
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_dataset(args, conf: dict) -> int:
    if args.dataset_command == "validate":
        manifest = load_manifest(_require_file(args.manifest, "manifest"))
        violations = validate_manifest(manifest)
        for v in violations:
            print(v)
        print(f"{len(violations)} violation(s) in {len(manifest.records)} record(s)")
        return EXIT_USAGE if violations else EXIT_OK

    if args.dataset_command == "balance":
        manifest = load_manifest(_require_file(args.manifest, "manifest"))
        report = balance_report(manifest)
        print(report.format_table())
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "balance.json", report.to_dict())
        return EXIT_OK

    from .datakit.select import SelectionPolicy, generate_and_select, load_faces

    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    faces_path = _require_file(args.faces, "faces listing")
    ckpt = load_checkpoint(ckpt_path)
    model_cfg = ModelConfig.from_dict(ckpt.metadata["model_config"])
    sel = dict(conf.get("selection", {}))
    if args.candidates_per_id is not None:
        sel["candidates_per_id"] = args.candidates_per_id
    if args.keep_per_id is not None:
        sel["keep_per_id"] = args.keep_per_id
    policy = SelectionPolicy(**sel)
    layout = load_layout(args.layout) if args.layout else load_layout()
    render = RenderConfig.from_dict({"width": 64, "height": 64, **conf.get("render", {})})
    out = Path(args.output_dir)
    manifest = generate_and_select(
        ckpt, load_faces(faces_path), None, policy, _encoders(args, model_cfg, layout),
        _mesh(args.mesh), layout, args.seed, out, render_cfg=render,
    )
    save_manifest(manifest, out / "manifest.jsonl")
    _write_json(
        out / "build.json",
        {
            "command": "dataset build",
            "version": __version__,
            "seed": args.seed,
            "policy": asdict(policy),
            "checkpoint_sha256": _sha(ckpt_path),
            "faces_sha256": _sha(faces_path),
            "records": len(manifest.records),
        },
    )
    print(f"wrote {len(manifest.records)} record(s) to {out / 'manifest.jsonl'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "render": cmd_render, "eval": cmd_eval, "dataset": cmd_dataset}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        conf = _load_config(args.config)
        raw = argv if argv is not None else sys.argv[1:]
        if "seed" in conf and not any(a == "--seed" or a.startswith("--seed=") for a in raw):
            args.seed = int(conf["seed"])
        if args.device != "cpu":
            raise UsageError(f"device {args.device!r} unsupported at desk scale; use cpu")
        return COMMANDS[args.command](args, conf)
    except (UsageError, ValidationError, CheckpointError, FileNotFoundError) as exc:
        print(f"uvmapid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UVMapIDError as exc:
        print(f"uvmapid: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # last-resort guard so scripts always see a stable exit code
        log.debug("unhandled error", exc_info=True)
        print(f"uvmapid: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
