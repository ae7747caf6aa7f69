"""Fine-tuning with the two-term prior-preservation objective.

The data term denoises training textures conditioned on the identifier
prompt and the projected face tokens; the prior term denoises latents that a
frozen snapshot of the starting model generated from a fixed text prompt.
Both terms are plain epsilon MSEs added with weight 1.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint
from .datakit.manifest import DatasetManifest
from .diffusion import LatentCodec, NoiseSchedule, build_schedule, ddim_sample, denoise_loss, forward_diffuse
from .encoders import EncoderSuite, FaceProjector
from .errors import NonFiniteLossError, ValidationError
from .fusion import ConditioningBundle, Denoiser, DenoiserConfig, freeze_copy
from .images import load_image, resample_area
from .render import load_layout

log = logging.getLogger(__name__)

# full-scale fine-tuning settings; desk-scale defaults below are larger lr, fewer steps
FULL_SCALE_LEARNING_RATE = 1e-6
FULL_SCALE_STEPS = 1500


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    steps: int = 300
    batch_size: int = 2
    seed: int = 0
    prior_prompt: str = "a texturemap"
    # None means "same as the number of training examples"; 0 disables the prior term
    prior_set_size: int | None = None
    use_race_gender_labels: bool = True
    uv_maps_per_id: int = 2
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    cfg_scale: float = 7.5
    prior_clip_x0: float | None = 1.0
    uncond_prob: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.uv_maps_per_id < 1:
            raise ValidationError(f"uv_maps_per_id must be >= 1, got {self.uv_maps_per_id}")
        if self.prior_set_size is not None and self.prior_set_size < 0:
            raise ValidationError("prior_set_size must be >= 0")
        if not 0.0 <= self.uncond_prob < 1.0:
            raise ValidationError("uncond_prob must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.num_timesteps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    d_face: int = 512
    num_face_tokens: int = 4
    max_text_tokens: int = 8
    texture_size: int = 64
    latent_size: int = 16

    @property
    def patch(self) -> int:
        return self.texture_size // self.latent_size

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.denoiser.latent_channels, self.latent_size, self.latent_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["denoiser"] = DenoiserConfig(**d["denoiser"])
        return cls(**d)


@dataclass
class PromptTemplate:
    """Renders ``"a [S] texturemap of [P]"``; ``[P]`` and its ``of`` drop out when labels are off."""

    identifier_token: str = "sks"

    def __post_init__(self):
        if not self.identifier_token or len(self.identifier_token.split()) != 1:
            raise ValidationError(f"identifier token must be a single word, got {self.identifier_token!r}")

    def render(self, attributes: str = "", use_labels: bool = True) -> str:
        if use_labels and self.identifier_token in attributes.split():
            raise ValidationError("attribute text must not contain the identifier token")
        prompt = f"a {self.identifier_token} texturemap"
        if use_labels and attributes.strip():
            prompt += f" of {attributes.strip()}"
        return prompt


def build_model(model_cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> nn.ModuleDict:
    dcfg = model_cfg.denoiser
    model = nn.ModuleDict(
        {
            "denoiser": Denoiser(dcfg, seed=seed),
            "projector": FaceProjector(model_cfg.d_face, model_cfg.num_face_tokens, dcfg.d_img, seed=seed + 1),
        }
    )
    return model.to(dtype)


@dataclass
class Example:
    z0: torch.Tensor  # (C, H, W)
    text_tokens: torch.Tensor  # (L, d_text)
    face_embedding: torch.Tensor  # (d_face,)
    prompt: str
    identity_id: str


def training_records(manifest: DatasetManifest, config: TrainConfig):
    """Training-source records, at most ``uv_maps_per_id`` per identity, in manifest order."""
    kept, per_id = [], {}
    for rec in manifest.records:
        if rec.source != "training":
            continue
        if per_id.get(rec.identity_id, 0) >= config.uv_maps_per_id:
            continue
        per_id[rec.identity_id] = per_id.get(rec.identity_id, 0) + 1
        kept.append(rec)
    return kept


def training_prompts(manifest: DatasetManifest, config: TrainConfig) -> list[str]:
    template = PromptTemplate(manifest.identifier_token)
    return [template.render(r.prompt_attributes, config.use_race_gender_labels) for r in training_records(manifest, config)]


def prepare_examples(
    manifest: DatasetManifest,
    config: TrainConfig,
    model_cfg: ModelConfig,
    encoders: EncoderSuite,
    codec: LatentCodec,
) -> list[Example]:
    records = training_records(manifest, config)
    if not records:
        raise ValidationError("dataset has no training records")
    template = PromptTemplate(manifest.identifier_token)
    dtype = config.torch_dtype
    out = []
    for rec in records:
        tex_path = manifest.resolve(rec.texture_path)
        tex = load_image(tex_path)
        if tex.shape[:2] != (model_cfg.texture_size, model_cfg.texture_size):
            tex = resample_area(tex, model_cfg.texture_size, model_cfg.texture_size)
        face_path = manifest.resolve(rec.face_image_path)
        face = encoders.face.embed(load_image(face_path), key=str(face_path))
        prompt = template.render(rec.prompt_attributes, config.use_race_gender_labels)
        out.append(
            Example(
                z0=codec.encode(tex).to(dtype),
                text_tokens=torch.from_numpy(encoders.text.encode(prompt)).to(dtype),
                face_embedding=torch.from_numpy(np.asarray(face)).to(dtype),
                prompt=prompt,
                identity_id=rec.identity_id,
            )
        )
    return out


def sub_seed(seed: int, *index: int) -> int:
    return int(np.random.SeedSequence([int(seed), *index]).generate_state(1)[0])


def generate_prior_set(
    frozen: nn.Module,
    schedule: NoiseSchedule,
    prompt: str,
    n: int,
    seed: int,
    *,
    text_encoder,
    null_face_tokens: torch.Tensor,
    latent_shape: Sequence[int] = (4, 16, 16),
    steps: int = 50,
    cfg_scale: float = 7.5,
    clip_x0: float | None = 1.0,
) -> list[tuple[torch.Tensor, str]]:
    """``n`` DDIM samples of the frozen denoiser under ``prompt`` with null face tokens."""
    if n < 1:
        raise ValidationError(f"prior set size must be >= 1, got {n}")
    dtype = next(frozen.parameters()).dtype
    text = torch.from_numpy(text_encoder.encode(prompt)).to(dtype)
    null_text = torch.from_numpy(text_encoder.encode("")).to(dtype)
    face = null_face_tokens.detach().to(dtype)
    cond = ConditioningBundle(text, face, null_text, face)
    out = []
    for i in range(n):
        z = ddim_sample(
            frozen, schedule, steps, cfg_scale, cond, sub_seed(seed, i),
            shape=(1, *latent_shape), dtype=dtype, clip_x0=clip_x0,
        )
        out.append((z[0], prompt))
    return out


def total_loss(
    model: nn.Module,
    z0_data: torch.Tensor,
    cond_data: tuple[torch.Tensor, torch.Tensor],
    z0_prior: torch.Tensor | None,
    cond_prior: tuple[torch.Tensor, torch.Tensor] | None,
    t_data: torch.Tensor,
    t_prior: torch.Tensor | None,
    eps_data: torch.Tensor,
    eps_prior: torch.Tensor | None,
    schedule: NoiseSchedule,
    return_terms: bool = False,
):
    """Data MSE plus prior MSE. The prior term is skipped when ``z0_prior`` is empty."""
    zt = forward_diffuse(z0_data, t_data, eps_data, schedule)
    data_term = denoise_loss(model(zt, t_data, *cond_data), eps_data)
    if z0_prior is None or z0_prior.shape[0] == 0:
        prior_term = torch.zeros((), dtype=data_term.dtype)
        loss = data_term
    else:
        zp = forward_diffuse(z0_prior, t_prior, eps_prior, schedule)
        prior_term = denoise_loss(model(zp, t_prior, *cond_prior), eps_prior)
        loss = data_term + prior_term
    if return_terms:
        return loss, data_term, prior_term
    return loss


@dataclass
class Batch:
    z0: torch.Tensor
    text_tokens: torch.Tensor
    face_embedding: torch.Tensor | None  # None: use the projector's null tokens
    t: torch.Tensor
    eps: torch.Tensor
    uncond: np.ndarray  # bool per row


def make_batch(
    examples: Sequence[Example], config: TrainConfig, step: int, stream: int, null_text: torch.Tensor
) -> Batch:
    """Batch composition is a pure function of ``(seed, step, stream)``."""
    rng = np.random.default_rng([config.seed, step, stream])
    idx = rng.integers(0, len(examples), size=config.batch_size)
    t = rng.integers(1, config.num_timesteps + 1, size=config.batch_size)
    shape = (config.batch_size, *examples[0].z0.shape)
    eps = torch.from_numpy(rng.standard_normal(shape)).to(config.torch_dtype)
    uncond = rng.random(config.batch_size) < config.uncond_prob
    text = torch.stack([null_text if u else examples[i].text_tokens for i, u in zip(idx, uncond)])
    has_face = examples[0].face_embedding is not None
    face = torch.stack([examples[i].face_embedding for i in idx]) if has_face else None
    return Batch(
        z0=torch.stack([examples[i].z0 for i in idx]),
        text_tokens=text,
        face_embedding=face,
        t=torch.from_numpy(t),
        eps=eps,
        uncond=uncond,
    )


def _face_tokens(projector: FaceProjector, batch: Batch) -> torch.Tensor:
    null = projector.null_tokens()
    if batch.face_embedding is None:
        return null.expand(batch.z0.shape[0], *null.shape)
    tokens = projector(batch.face_embedding)
    if batch.uncond.any():
        mask = torch.from_numpy(batch.uncond)[:, None, None]
        tokens = torch.where(mask, null.expand_as(tokens), tokens)
    return tokens


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (no_decay if name.endswith(".bias") else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=config.learning_rate,
        betas=config.adam_betas,
        eps=config.adam_eps,
        foreach=False,
    )


def train_step(
    model: nn.ModuleDict,
    batch: Batch,
    prior_batch: Batch | None,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    schedule: NoiseSchedule,
) -> float:
    """One AdamW update of every trainable tensor. Returns the loss before the update."""
    denoiser, projector = model["denoiser"], model["projector"]
    optimizer.zero_grad(set_to_none=True)
    cond_data = (batch.text_tokens, _face_tokens(projector, batch))
    if prior_batch is not None:
        cond_prior = (prior_batch.text_tokens, _face_tokens(projector, prior_batch))
        args = (prior_batch.z0, cond_prior, None, prior_batch.t, None, prior_batch.eps)
    else:
        args = (None, None, None, None, None, None)
    z0p, cp, _, tp, _, ep = args
    loss, data_term, prior_term = total_loss(
        denoiser, batch.z0, cond_data, z0p, cp, batch.t, tp, batch.eps, ep, schedule, return_terms=True
    )
    for name, term in (("data loss term", data_term), ("prior loss term", prior_term)):
        if not torch.isfinite(term):
            raise NonFiniteLossError(name)
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteLossError(f"gradient of {name}")
    optimizer.step()
    return float(loss.detach())


def _params_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _prior_cache_path(cache_dir: Path, key_parts: dict) -> Path:
    blob = repr(sorted(key_parts.items())).encode()
    return cache_dir / f"prior-{hashlib.sha256(blob).hexdigest()[:24]}.npy"


def build_prior_latents(
    frozen: nn.ModuleDict,
    config: TrainConfig,
    model_cfg: ModelConfig,
    encoders: EncoderSuite,
    schedule: NoiseSchedule,
    n: int,
    cache_dir: str | Path | None = None,
) -> torch.Tensor:
    dtype = config.torch_dtype
    if n == 0:
        return torch.zeros((0, *model_cfg.latent_shape), dtype=dtype)
    cache_path = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache_path = _prior_cache_path(
            cache_dir,
            {
                "params": _params_digest(frozen),
                "prompt": config.prior_prompt,
                "n": n,
                "seed": config.seed,
                "steps": config.sample_steps,
                "cfg": config.cfg_scale,
                "clip": config.prior_clip_x0,
                "schedule": (config.num_timesteps, config.beta_start, config.beta_end),
                "dtype": config.dtype,
            },
        )
        if cache_path.is_file():
            log.info("loading cached prior set %s", cache_path)
            return torch.from_numpy(np.load(cache_path)).to(dtype)
    samples = generate_prior_set(
        frozen["denoiser"],
        schedule,
        config.prior_prompt,
        n,
        sub_seed(config.seed, 0xBEEF),
        text_encoder=encoders.text,
        null_face_tokens=frozen["projector"].null_tokens(),
        latent_shape=model_cfg.latent_shape,
        steps=config.sample_steps,
        cfg_scale=config.cfg_scale,
        clip_x0=config.prior_clip_x0,
    )
    latents = torch.stack([z for z, _ in samples])
    if cache_path is not None:
        np.save(cache_path, latents.numpy())
    return latents


def prior_examples(latents: torch.Tensor, text_tokens: torch.Tensor) -> list[Example]:
    return [Example(z, text_tokens, None, "", "") for z in latents]


def to_checkpoint(
    model: nn.ModuleDict,
    optimizer: torch.optim.Optimizer | None,
    prior_latents: torch.Tensor | None,
    config: TrainConfig,
    model_cfg: ModelConfig,
    identifier_token: str,
    step: int,
    loss_history: list[float],
) -> Checkpoint:
    tensors = {f"model/{k}": v.detach().cpu().float().numpy().copy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    tensors[f"optim/{key}/{names[id(p)]}"] = state[key].detach().cpu().float().numpy().copy()
    if prior_latents is not None:
        tensors["prior/latents"] = prior_latents.detach().cpu().float().numpy().copy()
    metadata = {
        "format": "uvmapid-checkpoint",
        "step": step,
        "train_config": config.to_dict(),
        "model_config": model_cfg.to_dict(),
        "schedule": config.schedule().to_dict(),
        "identifier_token": identifier_token,
        "loss_history": [float(x) for x in loss_history],
    }
    return Checkpoint(tensors, metadata)


def model_from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype | None = None) -> tuple[nn.ModuleDict, ModelConfig]:
    model_cfg = ModelConfig.from_dict(ckpt.metadata["model_config"])
    if dtype is None:
        dtype = TrainConfig.from_dict(ckpt.metadata["train_config"]).torch_dtype
    model = build_model(model_cfg, seed=0, dtype=dtype)
    state = {}
    for key in model.state_dict():
        name = f"model/{key}"
        if name not in ckpt.tensors:
            raise ValidationError(f"checkpoint lacks tensor {name!r}")
        state[key] = torch.from_numpy(np.array(ckpt.tensors[name])).to(dtype)
    model.load_state_dict(state)
    return model, model_cfg


def _restore_optimizer(optimizer: torch.optim.Optimizer, model: nn.Module, ckpt: Checkpoint) -> None:
    step = ckpt.step
    for name, p in model.named_parameters():
        m = ckpt.tensors.get(f"optim/exp_avg/{name}")
        v = ckpt.tensors.get(f"optim/exp_avg_sq/{name}")
        if m is None or v is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.array(m)).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(v)).to(p.dtype),
        }


def finetune(
    dataset: DatasetManifest,
    config: TrainConfig,
    *,
    model_cfg: ModelConfig | None = None,
    encoders: EncoderSuite | None = None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    cache_dir: str | Path | None = None,
    on_step: Callable[[int, float], None] | None = None,
    return_state: bool = False,
):
    """Fine-tune from scratch (or resume) and return a :class:`Checkpoint`.

    The starting model is snapshotted with :func:`freeze_copy`, the prior set
    is generated once up front, and each step draws one data batch and one
    prior batch. ``max_steps`` stops early (for resumable partial runs).
    """
    model_cfg = model_cfg or ModelConfig()
    encoders = encoders or EncoderSuite.reference(
        load_layout(), model_cfg.denoiser.d_text, model_cfg.max_text_tokens, model_cfg.d_face
    )
    if cache_dir is None and os.environ.get("UVMAPID_CACHE_DIR"):
        cache_dir = os.environ["UVMAPID_CACHE_DIR"]
    dtype = config.torch_dtype
    schedule = config.schedule()
    if model_cfg.denoiser.num_timesteps != config.num_timesteps:
        raise ValidationError("model and training config disagree on the number of timesteps")
    codec = LatentCodec(model_cfg.denoiser.latent_channels, model_cfg.patch)
    examples = prepare_examples(dataset, config, model_cfg, encoders, codec)
    null_text = torch.from_numpy(encoders.text.encode("")).to(dtype)
    prior_text = torch.from_numpy(encoders.text.encode(config.prior_prompt)).to(dtype)

    if resume is None:
        model = build_model(model_cfg, config.seed, dtype)
        frozen = freeze_copy(model)
        n_prior = len(examples) if config.prior_set_size is None else config.prior_set_size
        prior_latents = build_prior_latents(frozen, config, model_cfg, encoders, schedule, n_prior, cache_dir)
        start, history = 0, []
    else:
        model, _ = model_from_checkpoint(resume, dtype)
        frozen = None
        prior_latents = torch.from_numpy(np.array(resume.tensors["prior/latents"])).to(dtype)
        start, history = resume.step, list(resume.metadata.get("loss_history", []))

    optimizer = make_optimizer(model, config)
    if resume is not None:
        _restore_optimizer(optimizer, model, resume)
    priors = prior_examples(prior_latents, prior_text)

    end = config.steps if max_steps is None else min(config.steps, start + max_steps)
    model.train()
    for step in range(start, end):
        batch = make_batch(examples, config, step, 0, null_text)
        prior_batch = make_batch(priors, config, step, 1, null_text) if priors else None
        loss = train_step(model, batch, prior_batch, optimizer, config, schedule)
        history.append(loss)
        if on_step is not None:
            on_step(step, loss)
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, loss)

    ckpt = to_checkpoint(model, optimizer, prior_latents, config, model_cfg, dataset.identifier_token, end, history)
    if return_state:
        return ckpt, {"model": model, "frozen": frozen, "optimizer": optimizer, "examples": examples, "priors": priors}
    return ckpt


def fixed_eval_loss(
    model: nn.ModuleDict,
    examples: Sequence[Example],
    priors: Sequence[Example],
    schedule: NoiseSchedule,
    seed: int = 12345,
    repeats: int = 8,
) -> float:
    """Two-term loss over every example at fixed seeded timesteps and noises."""
    denoiser, projector = model["denoiser"], model["projector"]
    rng = np.random.default_rng(seed)
    dtype = examples[0].z0.dtype
    with torch.no_grad():
        z0 = torch.stack([e.z0 for e in examples]).repeat(repeats, 1, 1, 1)
        text = torch.stack([e.text_tokens for e in examples]).repeat(repeats, 1, 1)
        face = projector(torch.stack([e.face_embedding for e in examples])).repeat(repeats, 1, 1)
        t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=z0.shape[0]))
        eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).to(dtype)
        if priors:
            zp = torch.stack([e.z0 for e in priors]).repeat(repeats, 1, 1, 1)
            tp_text = torch.stack([e.text_tokens for e in priors]).repeat(repeats, 1, 1)
            null = projector.null_tokens()
            tp_face = null.expand(zp.shape[0], *null.shape)
            tp = torch.from_numpy(rng.integers(1, schedule.T + 1, size=zp.shape[0]))
            ep = torch.from_numpy(rng.standard_normal(tuple(zp.shape))).to(dtype)
            return float(total_loss(denoiser, z0, (text, face), zp, (tp_text, tp_face), t, tp, eps, ep, schedule))
        return float(total_loss(denoiser, z0, (text, face), None, None, t, None, eps, None, schedule))
