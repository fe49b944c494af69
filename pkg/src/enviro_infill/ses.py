"""Speech-environment separation on magnitude spectrograms.

A Transformer masking net reads ``|Y|`` and emits two sigmoid masks named by
the component each one suppresses:

* ``speech_suppressing`` (applied to obtain the environment estimate),
* ``env_suppressing`` (applied to obtain the speech estimate).

So ``speech = |Y| * env_suppressing`` and ``env = |Y| * speech_suppressing``.
"""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import checkpoint, dsp
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

ORACLE_EPS = 1e-10


@dataclass
class SesConfig:
    layers: int = 2
    heads: int = 4
    embed_dim: int = 128
    ffn_dim: int = 256
    n_freqs: int = 513
    kernel_size: int = 3

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("SES needs at least one Transformer layer")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @classmethod
    def full_scale(cls, n_freqs=513):
        return cls(layers=8, heads=16, embed_dim=1024, ffn_dim=2048, n_freqs=n_freqs)


@dataclass
class MaskPair:
    speech_suppressing: np.ndarray
    env_suppressing: np.ndarray


def sinusoidal_positions(length, dim, dtype=torch.float32):
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe.to(dtype)


class MaskingNet(nn.Module):
    """Input conv, ``K`` pre-norm Transformer blocks, two output convs."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config
        pad = c.kernel_size // 2
        self.conv_in = nn.Conv1d(c.n_freqs, c.embed_dim, c.kernel_size, padding=pad)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                c.embed_dim, c.heads, c.ffn_dim, dropout=0.0, activation="gelu",
                batch_first=True, norm_first=True,
            )
            for _ in range(c.layers)
        )
        self.norm = nn.LayerNorm(c.embed_dim)
        self.head_speech_suppressing = nn.Conv1d(c.embed_dim, c.n_freqs, c.kernel_size, padding=pad)
        self.head_env_suppressing = nn.Conv1d(c.embed_dim, c.n_freqs, c.kernel_size, padding=pad)

    @staticmethod
    def features(mag):
        return torch.log(mag + 1e-4) / 4.0

    def forward(self, mag):
        """``mag``: (B, F, L) -> two masks (B, F, L) in [0, 1]."""
        if mag.dim() != 3 or mag.shape[1] != self.config.n_freqs:
            raise ShapeError(f"expected (B, {self.config.n_freqs}, L) magnitudes, got {tuple(mag.shape)}")
        h = self.conv_in(self.features(mag)).transpose(1, 2)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], h.dtype)
        for block in self.blocks:
            h = block(h)
        h = self.norm(h).transpose(1, 2)
        return torch.sigmoid(self.head_speech_suppressing(h)), torch.sigmoid(self.head_env_suppressing(h))


def init_ses(config, seed=0):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return MaskingNet(config)


def masking_net_forward(mag, model):
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[0] != model.config.n_freqs:
        raise ShapeError(f"masking net expects {model.config.n_freqs} bins, got {mag.shape}")
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        ms, me = model(torch.as_tensor(mag, dtype=dtype)[None])
    return MaskPair(ms[0].double().numpy(), me[0].double().numpy())


def apply_masks(mag, masks):
    """Return ``(speech_mag, env_mag)``."""
    mag = np.asarray(mag, dtype=np.float64)
    if masks.speech_suppressing.shape != mag.shape or masks.env_suppressing.shape != mag.shape:
        raise ShapeError("mask and magnitude shapes differ")
    return mag * masks.env_suppressing, mag * masks.speech_suppressing


def oracle_masks(clean_mag, env_mag, eps=ORACLE_EPS):
    """Ideal ratio masks from known component magnitudes."""
    clean_mag = np.asarray(clean_mag, dtype=np.float64)
    env_mag = np.asarray(env_mag, dtype=np.float64)
    if clean_mag.shape != env_mag.shape:
        raise ShapeError("component magnitudes differ in shape")
    den = clean_mag + env_mag + eps
    return MaskPair(speech_suppressing=env_mag / den, env_suppressing=clean_mag / den)


def separate_magnitudes(wave, model=None, config=dsp.StftConfig(), masks=None):
    """STFT, mask and split; ``masks`` (e.g. oracle masks) bypasses the net."""
    mag = dsp.magnitude(dsp.stft(wave, config))
    if masks is None:
        if model is None:
            raise ConfigError("need a masking net or explicit masks")
        masks = masking_net_forward(mag, model)
    speech, env = apply_masks(mag, masks)
    return mag, speech, env


def separate_to_mel(wave, model, fb, config=dsp.StftConfig(), masks=None):
    """Speaker and environment condition mels ``(c_spk, c_env)``, each (M, L)."""
    _, speech, env = separate_magnitudes(wave, model, config, masks)
    return dsp.mag_to_mel(speech, fb), dsp.mag_to_mel(env, fb)


def ses_loss(model, mag, clean_mag, env_mag):
    """Mean squared error of both masked magnitudes against their targets."""
    m_s, m_e = model(mag)
    return torch.mean((mag * m_e - clean_mag) ** 2) + torch.mean((mag * m_s - env_mag) ** 2)


@dataclass
class SesTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    crop_frames: int = 40
    lr: float = 1e-3
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0


def crop_batch(triples, config, crop_frames, rng):
    """Stack magnitude crops of ``(mixture, clean, env)`` waveform triples."""
    mags = [[], [], []]
    for triple in triples:
        spec = [dsp.magnitude(dsp.stft(x, config)) for x in triple]
        L = spec[0].shape[1]
        n = min(crop_frames, L)
        start = int(rng.integers(0, L - n + 1))
        for k in range(3):
            mags[k].append(spec[k][:, start:start + n])
    n = min(m.shape[1] for m in mags[0])
    return [torch.as_tensor(np.stack([m[:, :n] for m in group]), dtype=torch.float32) for group in mags]


def lr_schedule(step, total, peak, warmup_frac):
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return peak * (step + 1) / warm
    return peak * max(0.0, (total - step) / max(1, total - warm))


def train_ses(source, config=None, opt=None, model=None, stft_config=dsp.StftConfig(), on_step=None,
              optimizer=None, start=0, rng=None):
    """Train the masking net.

    ``source`` is either a list of ``(mixture, clean, env)`` waveform triples
    or a callable ``source(batch_size, rng)`` returning such a list (dynamic
    mixing).  ``optimizer``, ``start`` and ``rng`` continue an interrupted
    run.  Returns ``(model, losses)``.
    """
    config = config or SesConfig(n_freqs=stft_config.n_freqs)
    opt = opt or SesTrainConfig()
    if not callable(source) and len(source) == 0:
        raise ConfigError("SES training corpus is empty")
    rng = rng if rng is not None else np.random.default_rng(opt.seed)
    if model is None:
        model = init_ses(config, opt.seed)
    optim = optimizer or make_optimizer(model, opt.lr)
    model.train()
    losses = []
    for step in range(start, opt.steps):
        if callable(source):
            triples = source(opt.batch_size, rng)
        else:
            triples = [source[int(i)] for i in rng.integers(0, len(source), opt.batch_size)]
        mix, clean, env = crop_batch(triples, stft_config, opt.crop_frames, rng)
        for g in optim.param_groups:
            g["lr"] = lr_schedule(step, opt.steps, opt.lr, opt.warmup_frac)
        loss = ses_loss(model, mix, clean, env)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"SES loss became {loss.item()} at step {step}")
        optim.zero_grad()
        loss.backward()
        if opt.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        optim.step()
        losses.append(float(loss.item()))
        if on_step is not None:
            on_step(step, losses[-1], model, optim)
    model.eval()
    return model, losses


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr)


def save_ses(path, model, extra=None, arrays=None):
    meta = {"kind": "ses"}
    meta.update({f"config.{k}": v for k, v in asdict(model.config).items()})
    meta.update(extra or {})
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    tensors.update(arrays or {})
    return checkpoint.save(path, meta, tensors)


def load_ses(path):
    meta, arrays = checkpoint.load(path)
    if meta.get("kind") != "ses":
        raise ConfigError(f"{path} is a {meta.get('kind')!r} checkpoint, not 'ses'")
    model = MaskingNet(SesConfig(**checkpoint.prefixed(meta, "config")))
    model.load_state_dict({k: torch.from_numpy(arrays.pop(k)) for k in list(model.state_dict())})
    model.eval()
    return model, meta, arrays
