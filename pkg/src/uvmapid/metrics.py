"""Texture-quality metrics: IS on UV maps and renders, SSP, DFR and CLIPT.

All reductions run in ascending sample order, so results do not depend on the
worker count used to compute per-sample quantities.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from .encoders import EncoderSuite, FaceEmbedder, ImageEmbedder, ProbClassifier, TextEncoder
from .errors import ValidationError
from .render import Mesh, RenderConfig, SegmentationMap, UVLayoutSpec, extract_face_region, rasterize

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

__all__ = [
    "SegmentationMap",
    "MetricReport",
    "inception_score",
    "is_uv",
    "is_rendered",
    "ssp_score",
    "dfr_score",
    "clipt_score",
    "evaluate_corpus",
]


def inception_score(probs, splits: int = 10) -> tuple[float, float]:
    """Mean and population std over splits of ``exp(E_x KL(p(y|x) || p(y)))``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValidationError("probabilities must be a non-empty N x C matrix")
    n = p.shape[0]
    if not 1 <= splits <= n:
        raise ValidationError(f"need 1 <= splits <= N, got splits={splits}, N={n}")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ValidationError("every row must lie on the probability simplex")

    scores = []
    for k in range(splits):
        part = p[k * n // splits : (k + 1) * n // splits]
        # shifted mean: identical rows reproduce their marginal exactly, so IS is exactly 1
        marginal = part[:1] + (part - part[:1]).mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        kl = max(float(terms.sum(axis=1).mean()), 0.0)
        scores.append(math.exp(kl))
    return float(np.mean(scores)), float(np.std(scores))


def _map_ordered(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def is_uv(
    textures: Sequence[np.ndarray],
    classifier: ProbClassifier,
    splits: int = 10,
    keys: Sequence[str | None] | None = None,
    jobs: int = 1,
) -> tuple[float, float]:
    if len(textures) == 0:
        raise ValidationError("no textures to score")
    keys = list(keys) if keys is not None else [None] * len(textures)
    probs = _map_ordered(lambda i: classifier.classify(textures[i], key=keys[i]), range(len(textures)), jobs)
    return inception_score(np.stack(probs), splits)


def is_rendered(
    textures: Sequence[np.ndarray],
    mesh: Mesh,
    render_cfg: RenderConfig,
    classifier: ProbClassifier,
    splits: int = 10,
    jobs: int = 1,
) -> tuple[float, float]:
    if len(textures) == 0:
        raise ValidationError("no textures to render")
    renders = _map_ordered(lambda tex: rasterize(mesh, tex, render_cfg), list(textures), jobs)
    return is_uv(renders, classifier, splits)


def ssp_score(predicted: Sequence[SegmentationMap], ground_truth: SegmentationMap) -> float:
    """Mean over images of the percentage of pixels whose label differs from the ground truth."""
    if len(predicted) == 0:
        raise ValidationError("no segmentations to compare")
    total = 0.0
    for seg in predicted:
        if seg.shape != ground_truth.shape:
            raise ValidationError(f"segmentation shape {seg.shape} != ground truth {ground_truth.shape}")
        if seg.label_set != ground_truth.label_set:
            raise ValidationError("segmentation label set differs from the ground truth")
        total += 100.0 * np.count_nonzero(seg.labels != ground_truth.labels) / seg.labels.size
    return total / len(predicted)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cosine similarity of a zero vector is undefined")
    return float(a @ b / (na * nb))


def dfr_similarities(
    gen_textures: Sequence[tuple[str, np.ndarray]],
    ref_images: dict[str, np.ndarray] | Sequence[tuple[str, np.ndarray]],
    embedder: FaceEmbedder,
    layout: UVLayoutSpec,
    texture_keys: Sequence[str | None] | None = None,
    ref_keys: dict[str, str | None] | None = None,
) -> list[float]:
    refs = dict(ref_images)
    ref_keys = ref_keys or {}
    texture_keys = list(texture_keys) if texture_keys is not None else [None] * len(gen_textures)
    ref_emb: dict[str, np.ndarray] = {}
    sims = []
    for (identity, texture), tkey in zip(gen_textures, texture_keys):
        if identity not in refs:
            raise ValidationError(f"no reference image for identity {identity!r}")
        if identity not in ref_emb:
            ref_emb[identity] = embedder.embed(refs[identity], key=ref_keys.get(identity))
        crop = extract_face_region(texture, layout)
        crop_key = f"{tkey}#face" if tkey is not None else None
        sims.append(cosine(embedder.embed(crop, key=crop_key), ref_emb[identity]))
    return sims


def dfr_score(
    gen_textures: Sequence[tuple[str, np.ndarray]],
    ref_images,
    embedder: FaceEmbedder,
    layout: UVLayoutSpec,
    threshold: float = 0.4,
    **keys,
) -> tuple[int, int]:
    """``(matches, total)``: textures whose face crop reaches ``threshold`` cosine to their reference."""
    if not -1.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (-1, 1), got {threshold}")
    sims = dfr_similarities(gen_textures, ref_images, embedder, layout, **keys)
    return sum(1 for s in sims if s >= threshold), len(sims)


def pooled_text_embedding(tokens: np.ndarray) -> np.ndarray:
    v = np.asarray(tokens, dtype=np.float64).mean(axis=0)
    return v / np.linalg.norm(v)


def clipt_score(
    prompts: Sequence[str],
    images: Sequence[np.ndarray],
    text_embedder: TextEncoder,
    image_embedder: ImageEmbedder,
    image_keys: Sequence[str | None] | None = None,
) -> float:
    """Mean of ``100 * cos(pooled text embedding, image embedding)`` over prompt/image pairs."""
    if len(prompts) != len(images):
        raise ValidationError(f"{len(prompts)} prompts but {len(images)} images")
    if len(prompts) == 0:
        raise ValidationError("no prompt/image pairs")
    image_keys = list(image_keys) if image_keys is not None else [None] * len(images)
    total = 0.0
    for prompt, image, key in zip(prompts, images, image_keys):
        t = pooled_text_embedding(text_embedder.encode(prompt))
        total += 100.0 * cosine(t, image_embedder.embed(image, key=key))
    return total / len(prompts)


@dataclass
class MetricReport:
    is_uv: tuple[float, float] | None = None
    is_rendered: tuple[float, float] | None = None
    ssp: float | None = None
    dfr: tuple[int, int] | None = None
    clipt: float | None = None
    num_samples: int = 0
    splits: int = 0
    seed: int = 0
    config_fingerprint: str = ""
    failures: dict[str, str] = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def computed(self) -> list[str]:
        return [m for m in ("is_uv", "is_rendered", "ssp", "dfr", "clipt") if getattr(self, m) is not None]

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("is_uv", "is_rendered"):
            if d[name] is not None:
                d[name] = {"mean": d[name][0], "std": d[name][1]}
        if d["dfr"] is not None:
            d["dfr"] = {"matches": d["dfr"][0], "total": d["dfr"][1]}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        for name in ("is_uv", "is_rendered"):
            if d.get(name) is not None:
                d[name] = (d[name]["mean"], d[name]["std"])
        if d.get("dfr") is not None:
            d["dfr"] = (d["dfr"]["matches"], d["dfr"]["total"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def table_row(self, name: str = "UVMap-ID (desk)") -> str:
        def fmt(v, spec="{:.2f}"):
            return "failed" if v is None else spec.format(v)

        header = f"{'Method':<20} {'IS (R)':>8} {'IS (UV)':>8} {'SSP':>8} {'CLIPT':>8} {'DFR':>9}"
        row = (
            f"{name:<20} {fmt(self.is_rendered and self.is_rendered[0]):>8} "
            f"{fmt(self.is_uv and self.is_uv[0]):>8} {fmt(self.ssp):>8} {fmt(self.clipt):>8} "
            f"{('failed' if self.dfr is None else f'{self.dfr[0]}/{self.dfr[1]}'):>9}"
        )
        return header + "\n" + row


def report_schema() -> dict:
    return json.loads(resources.files("uvmapid").joinpath("data/metric_report.schema.json").read_text("utf-8"))


def validate_report(data: dict) -> None:
    import jsonschema

    jsonschema.validate(data, report_schema())


@dataclass
class CorpusItem:
    texture: np.ndarray
    texture_key: str | None = None
    identity_id: str | None = None
    prompt: str | None = None
    face_image: np.ndarray | None = None
    face_key: str | None = None


@dataclass
class EvalConfig:
    splits: int = 10
    dfr_threshold: float = 0.4
    render: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0
    jobs: int = 1

    def fingerprint(self) -> str:
        blob = json.dumps(
            {
                "splits": self.splits,
                "dfr_threshold": self.dfr_threshold,
                "render": asdict(self.render),
                "seed": self.seed,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def evaluate_corpus(
    items: Sequence[CorpusItem],
    encoders: EncoderSuite,
    mesh: Mesh,
    layout: UVLayoutSpec,
    config: EvalConfig | None = None,
) -> MetricReport:
    """Compute every metric; a failing metric is recorded in ``failures`` and the rest still run."""
    config = config or EvalConfig()
    n = len(items)
    splits = max(1, min(config.splits, n))
    report = MetricReport(num_samples=n, splits=splits, seed=config.seed, config_fingerprint=config.fingerprint())
    textures = [it.texture for it in items]
    keys = [it.texture_key for it in items]

    def attempt(name: str, fn: Callable):
        try:
            setattr(report, name, fn())
        except Exception as exc:  # one broken metric must not sink the others
            log.warning("metric %s failed: %s", name, exc)
            report.failures[name] = f"{type(exc).__name__}: {exc}"

    attempt("is_uv", lambda: is_uv(textures, encoders.classifier, splits, keys=keys, jobs=config.jobs))
    attempt(
        "is_rendered",
        lambda: is_rendered(textures, mesh, config.render, encoders.classifier, splits, jobs=config.jobs),
    )

    def _ssp():
        if n == 0:
            raise ValidationError("no textures")
        h, w = textures[0].shape[:2]
        segs = _map_ordered(encoders.parser.parse, textures, config.jobs)
        return ssp_score(segs, layout.ground_truth(h, w))

    attempt("ssp", _ssp)

    def _dfr():
        refs: dict[str, np.ndarray] = {}
        ref_keys: dict[str, str | None] = {}
        for it in items:
            if it.identity_id is None:
                raise ValidationError("texture without an identity id")
            if it.face_image is not None and it.identity_id not in refs:
                refs[it.identity_id] = it.face_image
                ref_keys[it.identity_id] = it.face_key
        pairs = [(it.identity_id, it.texture) for it in items]
        return dfr_score(
            pairs, refs, encoders.face, layout, config.dfr_threshold, texture_keys=keys, ref_keys=ref_keys
        )

    attempt("dfr", _dfr)

    def _clipt():
        prompts = [it.prompt for it in items]
        if any(p is None for p in prompts):
            raise ValidationError("texture without a prompt")
        return clipt_score(prompts, textures, encoders.text, encoders.image, image_keys=keys)

    attempt("clipt", _clipt)
    return report
