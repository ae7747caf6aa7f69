"""Variance schedules, forward noising, the epsilon objective and DDIM sampling.

Timesteps are 1-based: ``t = 1 .. T``. ``alpha_bar(0)`` is defined as 1 so the
terminal DDIM step lands exactly on the predicted clean latent.

Everything here is conditioning-agnostic; the denoiser is passed in as a
callable ``model(z_t, t, text_tokens, face_tokens) -> eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np
import torch

from .errors import ValidationError

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance schedule. Arrays are indexed by ``t - 1``."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")
    kind: str = "linear"

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValidationError(f"timestep t={t} outside [0, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        table = torch.from_numpy(np.concatenate([[1.0], self.alpha_bars])).to(dtype)
        return table[t.long()]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return build_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]), d.get("kind", "linear"))


def build_schedule(
    T: int, beta_start: float, beta_end: float, kind: Literal["linear"] = "linear"
) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValidationError(f"T must be an integer >= 1, got {T!r}")
    if not beta_start > 0:
        raise ValidationError(f"beta_start must be > 0, got {beta_start}")
    if not beta_start <= beta_end:
        raise ValidationError(f"beta_end must be >= beta_start, got beta_end={beta_end}")
    if not beta_end < 1:
        raise ValidationError(f"beta_end must be < 1, got {beta_end}")
    if T == 1 and beta_start != beta_end:
        raise ValidationError(f"T=1 cannot span beta_start={beta_start} and beta_end={beta_end}; pass equal values")
    if kind != "linear":
        raise ValidationError(f"kind must be 'linear', got {kind!r}")

    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    # cumprod multiplies left to right, so alpha_bars[t] == alpha_bars[t-1] * alphas[t] bit for bit
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), betas, alphas, alpha_bars, float(beta_start), float(beta_end), kind)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(z0, t, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form ``q(z_t | z_0)``: ``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps``.

    ``t`` is either an int, or a 1-D tensor with one timestep per batch row.
    """
    z0, eps = _as_tensor(z0), _as_tensor(eps)
    _check_same_shape(z0, eps, "forward_diffuse")
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        if t.shape[0] != z0.shape[0]:
            raise ValidationError("forward_diffuse: need one timestep per batch row")
        if int(t.min()) < 1 or int(t.max()) > schedule.T:
            raise ValidationError(f"timesteps must lie in [1, {schedule.T}]")
        ab = schedule.alpha_bar_tensor(t, z0.dtype).view(-1, *([1] * (z0.dim() - 1)))
        return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise ValidationError(f"timestep t={t} outside [1, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def markov_diffuse(z0, eps_seq: Sequence, schedule: NoiseSchedule, t: int) -> torch.Tensor:
    """Compose ``t`` single-step transitions ``q(z_s | z_{s-1})`` with the given noises."""
    z = _as_tensor(z0)
    for s in range(1, t + 1):
        beta = float(schedule.betas[s - 1])
        z = math.sqrt(1.0 - beta) * z + math.sqrt(beta) * _as_tensor(eps_seq[s - 1])
    return z


def denoise_loss(eps_pred, eps) -> torch.Tensor:
    """Mean squared error over every element (batch included)."""
    eps_pred, eps = _as_tensor(eps_pred), _as_tensor(eps)
    _check_same_shape(eps_pred, eps, "denoise_loss")
    return ((eps - eps_pred) ** 2).mean()


def cfg_combine(eps_uncond, eps_cond, scale: float) -> torch.Tensor:
    eps_uncond, eps_cond = _as_tensor(eps_uncond), _as_tensor(eps_cond)
    _check_same_shape(eps_uncond, eps_cond, "cfg_combine")
    # the two degenerate scales are returned untouched so they hold bit for bit
    if scale == 1:
        return eps_cond
    if scale == 0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step(
    z_t, eps_pred, t: int, t_prev: int, schedule: NoiseSchedule, clip_x0: float | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    Returns ``(z_prev, x0_pred)``. ``clip_x0`` optionally clamps the predicted
    clean latent to ``[-clip_x0, clip_x0]`` before re-noising.
    """
    z_t, eps_pred = _as_tensor(z_t), _as_tensor(eps_pred)
    _check_same_shape(z_t, eps_pred, "ddim_step")
    if not schedule.T >= t > t_prev >= 0:
        raise ValidationError(f"ddim_step needs T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_pred = (z_t - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    if clip_x0 is not None:
        x0_pred = x0_pred.clamp(-clip_x0, clip_x0)
    if t_prev == 0:
        return x0_pred, x0_pred
    z_prev = math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps_pred
    return z_prev, x0_pred


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps ``round(i * T / steps)`` for ``i = steps .. 1``."""
    if not 1 <= steps <= T:
        raise ValidationError(f"steps must lie in [1, T={T}], got {steps}")
    # integer round-half-up; avoids banker's rounding of Python's round()
    return [(2 * i * T + steps) // (2 * steps) for i in range(steps, 0, -1)]


def initial_noise(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.standard_normal(tuple(shape))).to(dtype)


@torch.no_grad()
def ddim_sample(
    model: EpsModel,
    schedule: NoiseSchedule,
    steps: int,
    cfg_scale: float,
    cond,
    seed: int,
    shape: Sequence[int] = (1, 4, 16, 16),
    dtype: torch.dtype = torch.float32,
    clip_x0: float | None = None,
) -> torch.Tensor:
    """Run the DDIM sampler from seeded Gaussian noise.

    ``cond`` is a :class:`~uvmapid.fusion.ConditioningBundle`. At
    ``cfg_scale == 1`` the unconditional branch is skipped entirely.
    """
    timesteps = ddim_timesteps(schedule.T, steps)
    z = initial_noise(shape, seed, dtype)
    batch = z.shape[0]
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        t_vec = torch.full((batch,), t, dtype=torch.long)
        eps_c = model(z, t_vec, cond.text_tokens, cond.face_tokens)
        if cfg_scale == 1:
            eps = eps_c
        else:
            eps_u = model(z, t_vec, cond.null_text_tokens, cond.null_face_tokens)
            eps = cfg_combine(eps_u, eps_c, cfg_scale)
        z, _ = ddim_step(z, eps, t, t_prev, schedule, clip_x0=clip_x0)
    return z


class LatentCodec:
    """Identity-downsample codec between RGB images in ``[0, 1]`` and latents.

    Encoding average-pools ``patch x patch`` blocks and maps ``[0, 1]`` to
    ``[-1, 1]``. The first three latent channels carry RGB; any extra channel
    carries the grey level. Decoding nearest-upsamples the RGB channels, so
    ``decode(encode(x)) == x`` whenever ``x`` is constant on every patch.
    """

    kind = "identity-downsample"

    def __init__(self, latent_channels: int = 4, patch: int = 4):
        if latent_channels < 3:
            raise ValidationError("latent_channels must be >= 3")
        self.latent_channels = latent_channels
        self.patch = patch

    def encode(self, image: np.ndarray) -> torch.Tensor:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValidationError(f"expected an HxWx3 image, got shape {img.shape}")
        h, w, _ = img.shape
        p = self.patch
        if h % p or w % p:
            raise ValidationError(f"image size {h}x{w} is not a multiple of patch {p}")
        pooled = img.reshape(h // p, p, w // p, p, 3).mean(axis=(1, 3))
        rgb = pooled.transpose(2, 0, 1) * 2.0 - 1.0
        extra = [rgb.mean(axis=0, keepdims=True)] * (self.latent_channels - 3)
        return torch.from_numpy(np.concatenate([rgb, *extra], axis=0))

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        lat = latent.detach().cpu().double().numpy()
        if lat.ndim == 4:
            if lat.shape[0] != 1:
                raise ValidationError("decode expects a single latent")
            lat = lat[0]
        rgb = (lat[:3] + 1.0) / 2.0
        rgb = rgb.repeat(self.patch, axis=1).repeat(self.patch, axis=2)
        return np.clip(rgb.transpose(1, 2, 0), 0.0, 1.0)
