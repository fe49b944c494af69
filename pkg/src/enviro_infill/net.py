"""Velocity model: a small DiT whose blocks self-attend over the fused
(noisy mel, speaker mel, text) stream and cross-attend to the environment mel.

Text handling: the extended sequence ``z`` (characters then fill ids) is
embedded and its non-fill tokens are spread uniformly over the valid frames,
so frame ``l`` of an ``L``-frame item reads token ``floor((l + 0.5) * n / L)``.
"""
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .corpus import FILL_ID, NULL_ID, Vocab
from .errors import ConfigError, DomainError, ShapeError


@dataclass
class DitConfig:
    layers: int = 4
    heads: int = 4
    embed_dim: int = 192
    ffn_dim: int = 384
    mel_bins: int = 80
    vocab_size: int = len(Vocab())
    time_embed_dim: int = 192
    text_dim: int = 64
    conv_kernel: int = 31
    mel_offset: float = -5.0
    mel_scale: float = 4.5

    def __post_init__(self):
        for name in ("layers", "heads", "embed_dim", "ffn_dim", "mel_bins", "vocab_size", "time_embed_dim", "text_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if not self.mel_scale > 0:
            raise ConfigError("mel_scale must be positive")

    @classmethod
    def tiny(cls, mel_bins=8):
        return cls(layers=1, heads=2, embed_dim=16, ffn_dim=32, mel_bins=mel_bins,
                   time_embed_dim=16, text_dim=8, conv_kernel=5)

    @classmethod
    def full_scale(cls):
        return cls(layers=22, heads=16, embed_dim=1024, ffn_dim=2048, time_embed_dim=1024, text_dim=512)


def normalize_mel(mel, config):
    """Log-mel to the roughly unit-scale domain the model works in."""
    return (mel - config.mel_offset) / config.mel_scale


def denormalize_mel(x, config):
    return x * config.mel_scale + config.mel_offset


@dataclass
class ConditionSet:
    """``None`` marks a null condition."""

    text: object = None
    speaker_mel: object = None
    env_mel: object = None


def null_out(cond, drop_text_speaker=False, drop_env=False):
    """Text and speaker are only ever dropped together."""
    return ConditionSet(
        text=None if drop_text_speaker else cond.text,
        speaker_mel=None if drop_text_speaker else cond.speaker_mel,
        env_mel=None if drop_env else cond.env_mel,
    )


def embed_timestep(t, dim, scale=1000.0):
    """Sinusoidal embedding of flow steps ``t`` in [0, 1]; returns (B, dim)."""
    t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t[None]
    if torch.any((t < 0) | (t > 1)) or not torch.all(torch.isfinite(t)):
        raise DomainError("flow step must lie in [0, 1]")
    dtype = t.dtype if t.is_floating_point() else torch.float64
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1))
    arg = scale * t.to(dtype)[:, None] * freq[None]
    emb = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, ctx, key_mask=None):
        B, Lq, D = x.shape
        Lk = ctx.shape[1]
        h = self.heads
        q = self.q(x).view(B, Lq, h, D // h).transpose(1, 2)
        k = self.k(ctx).view(B, Lk, h, D // h).transpose(1, 2)
        v = self.v(ctx).view(B, Lk, h, D // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(B, Lq, D))


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class DiTBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        D = c.embed_dim
        self.norm1 = nn.LayerNorm(D, elementwise_affine=False)
        self.self_attn = Attention(D, c.heads)
        self.norm_cross = nn.LayerNorm(D)
        self.cross_attn = Attention(D, c.heads)
        self.norm2 = nn.LayerNorm(D, elementwise_affine=False)
        self.ffn = nn.Sequential(nn.Linear(D, c.ffn_dim), nn.GELU(approximate="tanh"), nn.Linear(c.ffn_dim, D))
        self.ada = nn.Linear(c.time_embed_dim, 6 * D)

    def forward(self, x, temb, env, env_mask, frame_mask):
        s1, sc1, g1, s2, sc2, g2 = self.ada(F.silu(temb)).chunk(6, dim=-1)
        h = modulate(self.norm1(x), s1, sc1)
        x = x + g1[:, None] * self.self_attn(h, h, frame_mask)
        x = x + self.cross_attn(self.norm_cross(x), env, env_mask)
        h = modulate(self.norm2(x), s2, sc2)
        return x + g2[:, None] * self.ffn(h)


class VelocityNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = c = config
        D, M = c.embed_dim, c.mel_bins
        self.text_embed = nn.Embedding(c.vocab_size, c.text_dim)
        self.null_speaker = nn.Parameter(torch.zeros(M))
        self.null_env = nn.Parameter(torch.zeros(M))
        self.input_proj = nn.Linear(2 * M + c.text_dim, D)
        self.pos_conv = nn.Conv1d(D, D, c.conv_kernel, padding=c.conv_kernel // 2, groups=D)
        self.env_proj = nn.Linear(M, D)
        self.time_mlp = nn.Sequential(nn.Linear(c.time_embed_dim, c.time_embed_dim), nn.SiLU(),
                                      nn.Linear(c.time_embed_dim, c.time_embed_dim))
        self.blocks = nn.ModuleList(DiTBlock(c) for _ in range(c.layers))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False)
        self.final_ada = nn.Linear(c.time_embed_dim, 2 * D)
        self.output_proj = nn.Linear(D, M)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.text_embed.weight, std=0.3)
        nn.init.normal_(self.null_speaker, std=0.3)
        nn.init.normal_(self.null_env, std=0.3)
        for block in self.blocks:
            nn.init.zeros_(block.ada.weight)
            nn.init.zeros_(block.ada.bias)
        nn.init.zeros_(self.final_ada.weight)
        nn.init.zeros_(self.final_ada.bias)

    def stretch_text(self, text, frame_mask):
        """Spread each item's non-fill tokens uniformly over its valid frames."""
        B, L = text.shape
        idx = torch.full((B, L), FILL_ID, dtype=torch.long)
        lengths = frame_mask.sum(dim=1)
        for b in range(B):
            tokens = text[b][text[b] != FILL_ID]
            n, Lb = tokens.numel(), int(lengths[b])
            if n and Lb:
                pos = ((torch.arange(Lb, dtype=torch.float64) + 0.5) * n / Lb).floor().long().clamp(max=n - 1)
                idx[b, :Lb] = tokens[pos]
        return self.text_embed(idx)

    def forward(self, x, t, text=None, speaker=None, env=None, frame_mask=None, env_mask=None,
                drop_text_speaker=None, drop_env=None):
        """Batched velocity.

        x, speaker: (B, M, L); text: (B, L) ids; env: (B, M, Le); t: (B,).
        ``None`` conditions and per-item ``drop_*`` flags select the learned
        null embeddings.  Returns (B, M, L).
        """
        c = self.config
        if x.dim() != 3 or x.shape[1] != c.mel_bins:
            raise ShapeError(f"x must be (B, {c.mel_bins}, L), got {tuple(x.shape)}")
        B, M, L = x.shape
        dtype = x.dtype
        if frame_mask is None:
            frame_mask = torch.ones(B, L, dtype=torch.bool)
        drop_ts = torch.zeros(B, dtype=torch.bool) if drop_text_speaker is None else torch.as_tensor(drop_text_speaker, dtype=torch.bool)
        drop_e = torch.zeros(B, dtype=torch.bool) if drop_env is None else torch.as_tensor(drop_env, dtype=torch.bool)

        if text is None:
            text = torch.full((B, L), NULL_ID, dtype=torch.long)
        elif text.shape != (B, L):
            raise ShapeError(f"text must be (B, L) = {(B, L)}, got {tuple(text.shape)}")
        text = torch.where(drop_ts[:, None], torch.full_like(text, NULL_ID), text)
        text_feat = self.stretch_text(text, frame_mask).to(dtype)

        null_spk = self.null_speaker[None, :, None].expand(B, M, L)
        if speaker is None:
            speaker = null_spk
        elif speaker.shape != x.shape:
            raise ShapeError(f"speaker mel must match x shape {tuple(x.shape)}, got {tuple(speaker.shape)}")
        speaker = torch.where(drop_ts[:, None, None], null_spk, speaker)

        if env is None:
            env = self.null_env[None, :, None].expand(B, M, 1)
            env_mask = None
        elif env.dim() != 3 or env.shape[0] != B or env.shape[1] != M or env.shape[2] < 1:
            raise ShapeError(f"env mel must be (B, {M}, Le), got {tuple(env.shape)}")
        if env_mask is None:
            env_mask = torch.ones(B, env.shape[2], dtype=torch.bool)
        if drop_e.any():
            env = env.clone()
            env[drop_e, :, 0] = self.null_env.to(env.dtype)
            env_mask = env_mask.clone()
            env_mask[drop_e] = False
            env_mask[drop_e, 0] = True

        fm = frame_mask[:, :, None].to(dtype)
        h = self.input_proj(torch.cat([x.transpose(1, 2), speaker.transpose(1, 2), text_feat], dim=-1)) * fm
        h = h + F.gelu(self.pos_conv(h.transpose(1, 2)).transpose(1, 2)) * fm
        env_h = self.env_proj(env.transpose(1, 2))
        temb = self.time_mlp(embed_timestep(t.to(dtype) if torch.is_tensor(t) else torch.full((B,), float(t), dtype=dtype),
                                            c.time_embed_dim).to(dtype).expand(B, -1))
        for block in self.blocks:
            h = block(h, temb, env_h, env_mask, frame_mask)
        shift, scale = self.final_ada(F.silu(temb)).chunk(2, dim=-1)
        out = self.output_proj(modulate(self.final_norm(h), shift, scale))
        return (out * fm).transpose(1, 2)


def init_params(config, seed=0):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return VelocityNet(config)


def param_count(config):
    return sum(p.numel() for p in init_params(config).parameters())


def _as_batch(a, dtype):
    if a is None:
        return None
    a = torch.as_tensor(np.asarray(a) if not torch.is_tensor(a) else a)
    return a[None].to(dtype) if a.is_floating_point() else a[None]


def velocity(model, x_t, t, cond):
    """Single-item velocity: ``x_t`` (M, L) -> (M, L)."""
    dtype = next(model.parameters()).dtype
    x = _as_batch(x_t, dtype)
    text = _as_batch(cond.text, dtype)
    if text is not None:
        text = text.long()
    spk = _as_batch(cond.speaker_mel, dtype)
    env = _as_batch(cond.env_mel, dtype)
    with torch.no_grad():
        v = model(x, torch.tensor([float(t)], dtype=dtype), text, spk, env)
    return v[0]


def save_model(path, model, extra=None, arrays=None):
    meta = {"kind": "dit"}
    meta.update({f"config.{k}": v for k, v in asdict(model.config).items()})
    meta.update(extra or {})
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    tensors.update(arrays or {})
    return checkpoint.save(path, meta, tensors)


def load_model(path, dtype=torch.float32):
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "dit":
        raise ConfigError(f"{path} is a {meta.get('kind')!r} checkpoint, not 'dit'")
    model = VelocityNet(DitConfig(**checkpoint.prefixed(meta, "config")))
    state = {k: torch.from_numpy(arrays.pop(k)) for k in list(model.state_dict())}
    model.load_state_dict(state)
    model.to(dtype).eval()
    return model, meta, arrays


def with_config(config, **overrides):
    return replace(config, **overrides)
