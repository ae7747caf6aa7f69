"""Texture generation from a fine-tuned checkpoint."""

from __future__ import annotations

import numpy as np
import torch

from .checkpoint import Checkpoint
from .diffusion import LatentCodec, NoiseSchedule, ddim_sample
from .encoders import EncoderSuite, project_face
from .fusion import ConditioningBundle
from .render import load_layout
from .trainer import ModelConfig, PromptTemplate, TrainConfig, model_from_checkpoint


class TextureSampler:
    def __init__(
        self,
        ckpt: Checkpoint,
        encoders: EncoderSuite | None = None,
        steps: int | None = None,
        cfg_scale: float | None = None,
    ):
        self.train_config = TrainConfig.from_dict(ckpt.metadata["train_config"])
        self.model, self.model_cfg = model_from_checkpoint(ckpt)
        self.model.eval()
        self.model_cfg: ModelConfig
        cfg = self.model_cfg
        self.encoders = encoders or EncoderSuite.reference(load_layout(), cfg.denoiser.d_text, cfg.max_text_tokens, cfg.d_face)
        self.schedule = NoiseSchedule.from_dict(ckpt.metadata["schedule"])
        self.codec = LatentCodec(cfg.denoiser.latent_channels, cfg.patch)
        self.steps = steps or self.train_config.sample_steps
        self.cfg_scale = self.train_config.cfg_scale if cfg_scale is None else cfg_scale
        self.template = PromptTemplate(ckpt.metadata.get("identifier_token", "sks"))
        self.dtype = self.train_config.torch_dtype

    def prompt_for(self, attributes: str) -> str:
        return self.template.render(attributes, self.train_config.use_race_gender_labels)

    @torch.no_grad()
    def conditioning(self, face_image: np.ndarray, prompt: str, face_key: str | None = None) -> ConditioningBundle:
        emb = self.encoders.face.embed(face_image, key=face_key)
        projector = self.model["projector"]
        face_tokens = project_face(torch.from_numpy(np.asarray(emb)), projector).to(self.dtype)
        text = torch.from_numpy(self.encoders.text.encode(prompt)).to(self.dtype)
        null_text = torch.from_numpy(self.encoders.text.encode("")).to(self.dtype)
        return ConditioningBundle(text, face_tokens, null_text, projector.null_tokens())

    def sample_latent(self, cond: ConditioningBundle, seed: int) -> torch.Tensor:
        return ddim_sample(
            self.model["denoiser"], self.schedule, self.steps, self.cfg_scale, cond, seed,
            shape=(1, *self.model_cfg.latent_shape), dtype=self.dtype,
        )

    def sample(self, face_image: np.ndarray, prompt: str, seed: int, face_key: str | None = None) -> np.ndarray:
        """One HxWx3 texture in ``[0, 1]``."""
        cond = self.conditioning(face_image, prompt, face_key)
        return self.codec.decode(self.sample_latent(cond, seed))
