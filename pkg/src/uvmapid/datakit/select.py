"""Generate-then-select dataset construction from a fine-tuned checkpoint."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..checkpoint import Checkpoint
from ..encoders import EncoderSuite
from ..errors import ValidationError
from ..images import load_image, save_png
from ..metrics import cosine, ssp_score
from ..render import Mesh, RenderConfig, UVLayoutSpec, extract_face_region, rasterize
from ..sampling import TextureSampler
from ..trainer import sub_seed
from .manifest import DatasetManifest, DatasetRecord

log = logging.getLogger(__name__)


@dataclass
class SelectionPolicy:
    candidates_per_id: int = 10
    keep_per_id: int = 2
    face_weight: float = 0.5
    structure_weight: float = 0.3
    fidelity_weight: float = 0.2

    def __post_init__(self):
        if self.candidates_per_id < 1 or self.keep_per_id < 1:
            raise ValidationError("candidates_per_id and keep_per_id must be >= 1")
        if self.keep_per_id > self.candidates_per_id:
            raise ValidationError(
                f"keep_per_id ({self.keep_per_id}) exceeds candidates_per_id ({self.candidates_per_id})"
            )


@dataclass
class FaceSpec:
    identity_id: str
    face_image_path: str
    race: str | None = None
    gender: str | None = None
    prompt_attributes: str = ""


def load_faces(path: str | Path) -> list[FaceSpec]:
    """Read a ``faces.jsonl`` listing; relative image paths resolve against its directory."""
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            spec = FaceSpec(**json.loads(line))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: bad face entry ({exc})") from exc
        if not Path(spec.face_image_path).is_absolute():
            spec.face_image_path = str(path.parent / spec.face_image_path)
        out.append(spec)
    return out


@dataclass(frozen=True)
class Candidate:
    sub_seed: int
    index: int
    face: float
    structure: float
    fidelity: float
    score: float


def fidelity_proxy(probs: np.ndarray) -> float:
    """``1 - H(p) / log C``: confident classifier outputs score high."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return 1.0 - float(-(nz * np.log(nz)).sum()) / math.log(p.size)


def score_candidate(
    texture: np.ndarray,
    ref_embedding: np.ndarray,
    encoders: EncoderSuite,
    layout: UVLayoutSpec,
    policy: SelectionPolicy,
    mesh: Mesh | None = None,
    render_cfg: RenderConfig | None = None,
) -> tuple[float, float, float, float]:
    face = cosine(encoders.face.embed(extract_face_region(texture, layout)), ref_embedding)
    h, w = texture.shape[:2]
    structure = 1.0 - ssp_score([encoders.parser.parse(texture)], layout.ground_truth(h, w)) / 100.0
    image = rasterize(mesh, texture, render_cfg) if mesh is not None else texture
    fidelity = fidelity_proxy(encoders.classifier.classify(image))
    score = policy.face_weight * face + policy.structure_weight * structure + policy.fidelity_weight * fidelity
    return face, structure, fidelity, score


def select_top(candidates: Sequence[Candidate], keep: int) -> list[Candidate]:
    """Highest score first; equal scores fall back to the lower sub-seed."""
    return sorted(candidates, key=lambda c: (-c.score, c.sub_seed))[:keep]


def generate_and_select(
    checkpoint: Checkpoint,
    faces: Sequence[FaceSpec],
    prompts: Sequence[str] | None,
    policy: SelectionPolicy,
    encoders: EncoderSuite,
    mesh: Mesh | None,
    layout: UVLayoutSpec,
    seed: int,
    out_dir: str | Path,
    render_cfg: RenderConfig | None = None,
) -> DatasetManifest:
    """Sample ``candidates_per_id`` textures per face, keep the best ``keep_per_id``.

    Kept textures are written under ``out_dir/textures``; the returned manifest
    is rooted at ``out_dir`` and lists records in face order. A face whose
    generation or scoring fails is logged and skipped.
    """
    out = Path(out_dir)
    (out / "textures").mkdir(parents=True, exist_ok=True)
    sampler = TextureSampler(checkpoint, encoders)
    if prompts is not None and len(prompts) != len(faces):
        raise ValidationError(f"{len(prompts)} prompts for {len(faces)} faces")
    render_cfg = render_cfg or RenderConfig(width=64, height=64)

    records: list[DatasetRecord] = []
    for k, spec in enumerate(faces):
        try:
            face_img = load_image(spec.face_image_path)
            prompt = prompts[k] if prompts is not None else sampler.prompt_for(spec.prompt_attributes)
            ref = encoders.face.embed(face_img, key=str(spec.face_image_path))
            cond = sampler.conditioning(face_img, prompt, face_key=str(spec.face_image_path))
            candidates, textures = [], {}
            for c in range(policy.candidates_per_id):
                s = sub_seed(seed, k, c)
                tex = sampler.codec.decode(sampler.sample_latent(cond, s))
                textures[c] = tex
                candidates.append(Candidate(s, c, *score_candidate(tex, ref, encoders, layout, policy, mesh, render_cfg)))
        except Exception as exc:  # skip this identity, keep the rest of the run alive
            log.error("identity %s skipped: %s", spec.identity_id, exc)
            continue
        for cand in select_top(candidates, policy.keep_per_id):
            rel = Path("textures") / f"{spec.identity_id}_{cand.index:02d}.png"
            save_png(textures[cand.index], out / rel)
            records.append(
                DatasetRecord(
                    texture_path=str(rel),
                    face_image_path=os.path.relpath(Path(spec.face_image_path).resolve(), out.resolve()),
                    identity_id=spec.identity_id,
                    race=spec.race,
                    gender=spec.gender,
                    prompt_attributes=spec.prompt_attributes,
                    source="generated",
                )
            )
    cells = sorted({(f.race, f.gender) for f in faces if f.race is not None and f.gender is not None})
    return DatasetManifest(
        records,
        identifier_token=checkpoint.metadata.get("identifier_token", "sks"),
        declared_cells=cells or None,
        root=out,
    )
