"""Synthetic portraits, UV textures and manifests for hermetic desk-scale runs.

Run ``python -m uvmapid.synthetic OUT_DIR`` to write a small attributed
training set (faces, textures, ``manifest.jsonl``) and a ``faces.jsonl``
listing for ``uvmapid dataset build``.
"""

from __future__ import annotations

import argparse
import json
from itertools import cycle
from pathlib import Path

import numpy as np

from .datakit.manifest import GENDERS, RACES, DatasetManifest, DatasetRecord, save_manifest
from .images import load_image, resample_area, resize_nearest, save_png
from .render import UVLayoutSpec, load_layout

SKIN = {
    "AfricanAmerican": (0.36, 0.24, 0.17),
    "Asian": (0.87, 0.72, 0.58),
    "White": (0.94, 0.80, 0.72),
}
HAIR = {"male": (0.10, 0.08, 0.06), "female": (0.45, 0.28, 0.12)}
WORDS = {
    "AfricanAmerican": "African American",
    "Asian": "Asian",
    "White": "White",
    "male": "man",
    "female": "woman",
}


def attribute_text(race: str, gender: str) -> str:
    return f"{WORDS[race]} {WORDS[gender]}"


def synthetic_face(seed: int, race: str, gender: str, size: int = 64) -> np.ndarray:
    """A smooth, identity-specific portrait: skin tone, hair band, eyes and mouth."""
    rng = np.random.default_rng(seed)
    img = np.empty((size, size, 3))
    img[:] = SKIN[race]
    field = resize_nearest(rng.uniform(-0.12, 0.12, (4, 4, 3)), size, size)
    img += field
    hair_rows = size // 5 if gender == "male" else size // 3
    img[:hair_rows] = np.asarray(HAIR[gender]) + rng.uniform(-0.05, 0.05, 3)
    if gender == "female":
        img[:, : size // 8] = img[0, 0]
        img[:, -size // 8 :] = img[0, 0]
    eye_y = size * 2 // 5 + rng.integers(-2, 3)
    for eye_x in (size // 3 + rng.integers(-2, 3), 2 * size // 3 + rng.integers(-2, 3)):
        r = max(size // 16, 1)
        img[eye_y - r : eye_y + r, eye_x - r : eye_x + r] = rng.uniform(0.0, 0.3, 3)
    mouth_y = size * 3 // 4 + rng.integers(-2, 3)
    half = size // 6 + rng.integers(-2, 3)
    img[mouth_y : mouth_y + max(size // 20, 1), size // 2 - half : size // 2 + half] = (0.6, 0.15, 0.2)
    return np.clip(img, 0.0, 1.0)


def synthetic_texture(face: np.ndarray, layout: UVLayoutSpec, seed: int, size: int = 64, jitter: float = 0.08) -> np.ndarray:
    """Layout template with per-variant clothing tint and the portrait pasted into the face rectangle."""
    rng = np.random.default_rng(seed)
    seg = layout.ground_truth(size, size)
    tex = layout.template_texture(size, size)
    for lbl in layout.label_set:
        if lbl == layout.background_label:
            continue
        mask = seg.labels == lbl
        tex[mask] = np.clip(tex[mask] + rng.uniform(-jitter, jitter, 3), 0.0, 1.0)
    r0, r1, c0, c1 = layout.face_pixel_box(size, size)
    tex[r0:r1, c0:c1] = resample_area(face, r1 - r0, c1 - c0)
    return tex


def default_cells(n_ids: int) -> list[tuple[str, str]]:
    cells = cycle([(r, g) for r in RACES for g in GENDERS])
    return [next(cells) for _ in range(n_ids)]


def write_faces(out_dir: str | Path, n_ids: int, seed: int = 0, size: int = 64, prefix: str = "id") -> list[dict]:
    """Write portraits plus ``faces.jsonl``; returns the face entries."""
    out = Path(out_dir)
    (out / "faces").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (race, gender) in enumerate(default_cells(n_ids)):
        identity = f"{prefix}{k:03d}"
        face = synthetic_face(seed * 1000 + k, race, gender, size)
        path = Path("faces") / f"{identity}.png"
        save_png(face, out / path)
        entries.append(
            {
                "identity_id": identity,
                "face_image_path": str(path),
                "race": race,
                "gender": gender,
                "prompt_attributes": attribute_text(race, gender),
            }
        )
    (out / "faces.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries), encoding="utf-8")
    return entries


def write_training_set(
    out_dir: str | Path,
    n_ids: int = 4,
    maps_per_id: int = 2,
    seed: int = 0,
    size: int = 64,
    layout: UVLayoutSpec | None = None,
    identifier_token: str = "sks",
) -> DatasetManifest:
    """Attributed training manifest of ``n_ids * maps_per_id`` textures at ``out_dir/manifest.jsonl``."""
    out = Path(out_dir)
    layout = layout or load_layout()
    entries = write_faces(out, n_ids, seed, size)
    (out / "textures").mkdir(parents=True, exist_ok=True)
    records = []
    for k, e in enumerate(entries):
        face = load_image(out / e["face_image_path"])
        for m in range(maps_per_id):
            tex = synthetic_texture(face, layout, seed * 100003 + k * 101 + m, size)
            rel = Path("textures") / f"{e['identity_id']}_{m}.png"
            save_png(tex, out / rel)
            records.append(
                DatasetRecord(
                    texture_path=str(rel),
                    face_image_path=e["face_image_path"],
                    identity_id=e["identity_id"],
                    race=e["race"],
                    gender=e["gender"],
                    prompt_attributes=e["prompt_attributes"],
                    source="training",
                )
            )
    manifest = DatasetManifest(records, identifier_token=identifier_token, root=out)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="Write a synthetic desk-scale training set.")
    ap.add_argument("out_dir")
    ap.add_argument("--ids", type=int, default=4)
    ap.add_argument("--maps-per-id", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)
    manifest = write_training_set(args.out_dir, args.ids, args.maps_per_id, args.seed, args.size)
    print(f"wrote {len(manifest.records)} records to {Path(args.out_dir) / 'manifest.jsonl'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
