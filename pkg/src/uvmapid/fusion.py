"""Desk-scale noise-prediction network with a decoupled text/face cross-attention block."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError


@dataclass
class AttentionParams:
    """Projection matrices of one decoupled cross-attention layer.

    ``W_q`` is shared by both branches; ``W_k``/``W_v`` read text tokens and
    ``W_k_img``/``W_v_img`` read face tokens.
    """

    W_q: torch.Tensor
    W_k: torch.Tensor
    W_v: torch.Tensor
    W_k_img: torch.Tensor
    W_v_img: torch.Tensor

    @property
    def d_k(self) -> int:
        return self.W_q.shape[-1]


def _branch(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, d_k: int) -> torch.Tensor:
    scores = Q @ K.transpose(-1, -2) / math.sqrt(d_k)
    return torch.softmax(scores, dim=-1) @ V


def decoupled_cross_attention(
    Z: torch.Tensor, c_t: torch.Tensor, c_i: torch.Tensor, params: AttentionParams
) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d_k)) V + softmax(Q K'^T / sqrt(d_k)) V'``.

    ``Q = Z W_q``, ``K = c_t W_k``, ``V = c_t W_v``, ``K' = c_i W_k'``,
    ``V' = c_i W_v'``. Leading batch dimensions broadcast.
    """
    d_model, d_k = params.W_q.shape
    if Z.shape[-1] != d_model:
        raise ValidationError(f"query features {Z.shape[-1]} != W_q rows {d_model}")
    if c_t.shape[-1] != params.W_k.shape[0] or c_t.shape[-1] != params.W_v.shape[0]:
        raise ValidationError(f"text features {c_t.shape[-1]} do not match W_k/W_v rows")
    if c_i.shape[-1] != params.W_k_img.shape[0] or c_i.shape[-1] != params.W_v_img.shape[0]:
        raise ValidationError(f"image features {c_i.shape[-1]} do not match W_k'/W_v' rows")
    if params.W_k.shape[1] != d_k or params.W_k_img.shape[1] != d_k:
        raise ValidationError("key projections must map to d_k columns")
    if params.W_v.shape[1] != params.W_v_img.shape[1]:
        raise ValidationError("value projections of both branches must share d_v")

    Q = Z @ params.W_q
    text = _branch(Q, c_t @ params.W_k, c_t @ params.W_v, d_k)
    image = _branch(Q, c_i @ params.W_k_img, c_i @ params.W_v_img, d_k)
    return text + image


@dataclass
class ConditioningBundle:
    text_tokens: torch.Tensor
    face_tokens: torch.Tensor
    null_text_tokens: torch.Tensor
    null_face_tokens: torch.Tensor

    def unconditional(self) -> "ConditioningBundle":
        return ConditioningBundle(
            self.null_text_tokens, self.null_face_tokens, self.null_text_tokens, self.null_face_tokens
        )


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    channels: int = 32
    d_text: int = 32
    d_img: int = 32
    d_k: int = 32
    d_v: int = 32
    d_time: int = 32
    num_timesteps: int = 1000
    zero_init_image_branch: bool = True

    @property
    def d_model(self) -> int:
        return 2 * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(dtype)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def _fan_in_uniform_(weight: torch.Tensor, bias: torch.Tensor | None, fan_in: int, gen: torch.Generator):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=gen)
        if bias is not None:
            bias.uniform_(-bound, bound, generator=gen)


class ResBlock(nn.Module):
    def __init__(self, ch: int, temb_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch)

    def forward(self, x, temb):
        h = self.conv(F.silu(self.norm(x)))
        return x + h + self.temb(temb)[:, :, None, None]


class FusionBlock(nn.Module):
    """Pre-norm decoupled cross-attention over the bottleneck feature map."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.norm = nn.GroupNorm(_groups(d), d)
        self.W_q = nn.Parameter(torch.empty(d, cfg.d_k))
        self.W_k = nn.Parameter(torch.empty(cfg.d_text, cfg.d_k))
        self.W_v = nn.Parameter(torch.empty(cfg.d_text, cfg.d_v))
        self.W_k_img = nn.Parameter(torch.empty(cfg.d_img, cfg.d_k))
        self.W_v_img = nn.Parameter(torch.empty(cfg.d_img, cfg.d_v))
        self.out = nn.Linear(cfg.d_v, d)

    def params(self) -> AttentionParams:
        return AttentionParams(self.W_q, self.W_k, self.W_v, self.W_k_img, self.W_v_img)

    def forward(self, x, text_tokens, face_tokens):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        attn = decoupled_cross_attention(tokens, text_tokens, face_tokens, self.params())
        return x + self.out(attn).transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Two-level conv encoder/decoder with one fusion block at the bottleneck.

    ``forward(z_t, t, text_tokens, face_tokens)`` predicts the noise in ``z_t``.
    Token tensors may be unbatched (shared by every row) or batched.
    """

    def __init__(self, cfg: DenoiserConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        c, d = cfg.channels, cfg.d_model
        self.time_mlp = nn.Sequential(nn.Linear(cfg.d_time, d), nn.SiLU(), nn.Linear(d, d))
        self.conv_in = nn.Conv2d(cfg.latent_channels, c, 3, padding=1)
        self.enc = ResBlock(c, d)
        self.down = nn.Conv2d(c, d, 3, stride=2, padding=1)
        self.mid = ResBlock(d, d)
        self.fusion = FusionBlock(cfg)
        self.up = nn.Conv2d(d, c, 3, padding=1)
        self.merge = nn.Conv2d(2 * c, c, 3, padding=1)
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, cfg.latent_channels, 3, padding=1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                _fan_in_uniform_(module.weight, module.bias, fan_in, gen)
            elif isinstance(module, nn.Linear):
                _fan_in_uniform_(module.weight, module.bias, module.in_features, gen)
            elif isinstance(module, nn.GroupNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        f = self.fusion
        for w in (f.W_q, f.W_k, f.W_v, f.W_k_img, f.W_v_img):
            _fan_in_uniform_(w, None, w.shape[0], gen)
        if self.cfg.zero_init_image_branch:
            with torch.no_grad():
                f.W_k_img.zero_()
                f.W_v_img.zero_()

    def _check_inputs(self, z_t, t, text_tokens, face_tokens) -> torch.Tensor:
        cfg = self.cfg
        if z_t.dim() != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ValidationError(
                f"expected latents shaped (B, {cfg.latent_channels}, H, W), got {tuple(z_t.shape)}"
            )
        if z_t.shape[2] % 2 or z_t.shape[3] % 2:
            raise ValidationError(f"latent height and width must be even, got {tuple(z_t.shape[2:])}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(z_t.shape[0])
        if t.shape != (z_t.shape[0],):
            raise ValidationError("need one timestep per batch row")
        if int(t.min()) < 1 or int(t.max()) > cfg.num_timesteps:
            raise ValidationError(f"timesteps must lie in [1, {cfg.num_timesteps}]")
        if text_tokens.shape[-1] != cfg.d_text:
            raise ValidationError(f"text tokens must have {cfg.d_text} features, got {text_tokens.shape[-1]}")
        if face_tokens.shape[-1] != cfg.d_img:
            raise ValidationError(f"face tokens must have {cfg.d_img} features, got {face_tokens.shape[-1]}")
        return t

    def forward(self, z_t, t, text_tokens, face_tokens):
        t = self._check_inputs(z_t, t, text_tokens, face_tokens)
        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.d_time, z_t.dtype))
        h1 = self.enc(self.conv_in(z_t), temb)
        h2 = self.mid(self.down(F.silu(h1)), temb)
        h2 = self.fusion(h2, text_tokens, face_tokens)
        up = self.up(F.interpolate(F.silu(h2), scale_factor=2, mode="nearest"))
        h = self.merge(F.silu(torch.cat([up, h1], dim=1)))
        return self.conv_out(F.silu(self.out_norm(h)))


def freeze_copy(model: nn.Module) -> nn.Module:
    """Deep, gradient-free snapshot of ``model``; later training of the source leaves it untouched."""
    frozen = copy.deepcopy(model)
    frozen.requires_grad_(False)
    frozen.eval()
    frozen.frozen = True
    return frozen
