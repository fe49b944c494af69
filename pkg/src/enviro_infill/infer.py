"""Inference: prompt separation, SNR adaptation, guided Euler sampling and
waveform reconstruction.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import corpus, dsp, net, ses
from .errors import ConfigError, DivergenceError, UndefinedSnrError

log = logging.getLogger(__name__)

# Relative perturbation of the Euler step, used only by the self-check's fault injection.
EULER_STEP_PERTURBATION = 0.0
SILENCE_MARGIN = 1.0
MU_ITERATIONS = 100


@dataclass
class GuidanceConfig:
    alpha_speech: float = 2.0
    alpha_env: float = 2.0
    ode_steps: int = 32

    def __post_init__(self):
        for name in ("alpha_speech", "alpha_env"):
            a = getattr(self, name)
            if not (math.isfinite(a) and a >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {a}")
        if int(self.ode_steps) != self.ode_steps or self.ode_steps < 1:
            raise ConfigError(f"ode_steps must be an integer >= 1, got {self.ode_steps}")


@dataclass
class SynthesisRequest:
    speaker_prompt: np.ndarray
    env_prompt: np.ndarray
    ref_text: str
    gen_text: str
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    snr_adapt: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.gen_text:
            raise ConfigError("gen_text is empty")
        if not self.ref_text:
            raise ConfigError("ref_text is empty")
        if dsp.energy(self.speaker_prompt) == 0:
            raise ConfigError("speaker prompt is silent")


def snr_scale_factor(spk_speech_mag, env_speech_mag, env_bg_mag):
    """Gain for the separated environment so the rebuilt mixture keeps the env prompt's SNR.

    Solves ``E(spk_speech) / (s^2 E(env_bg)) = E(env_speech) / E(env_bg)`` for ``s``.
    """
    e_spk, e_env_speech, e_bg = (dsp.energy(m) for m in (spk_speech_mag, env_speech_mag, env_bg_mag))
    if not (e_spk > 0 and e_env_speech > 0 and e_bg > 0):
        raise UndefinedSnrError(
            f"scale undefined: energies spk_speech={e_spk}, env_speech={e_env_speech}, env_bg={e_bg}")
    return math.sqrt(e_spk / e_env_speech)


def dcfg_velocity(model, x_t, t, cond, guidance, record=None):
    """Dual classifier-free guidance from four separate forward passes.

    ``cond`` normally carries all three conditions; null components simply
    stay null in every pattern.

    ``record``, if a list, receives the four velocities in the order
    full, (text+speaker only), (env only), null.
    """
    v_full = net.velocity(model, x_t, t, cond)
    v_speech = net.velocity(model, x_t, t, net.null_out(cond, drop_env=True))
    v_env = net.velocity(model, x_t, t, net.null_out(cond, drop_text_speaker=True))
    v_null = net.velocity(model, x_t, t, net.null_out(cond, True, True))
    if record is not None:
        record.extend([v_full, v_speech, v_env, v_null])
    return v_full + guidance.alpha_speech * (v_speech - v_null) + guidance.alpha_env * (v_env - v_null)


def ode_solve(x0, velocity_fn, steps):
    """Explicit Euler on uniform steps from t=0 to t=1.

    The displacement from ``x0`` is accumulated with compensated summation,
    which keeps constant fields exact for power-of-two step counts.
    """
    if int(steps) != steps or steps < 1:
        raise ConfigError(f"steps must be an integer >= 1, got {steps}")
    steps = int(steps)
    dt = (1.0 + EULER_STEP_PERTURBATION) / steps
    x0 = np.asarray(x0, dtype=np.float64)
    disp = np.zeros_like(x0)
    comp = np.zeros_like(x0)
    x = x0.copy()
    for k in range(steps):
        v = np.asarray(velocity_fn(x, k / steps), dtype=np.float64)
        with np.errstate(invalid="ignore", over="ignore"):
            inc = dt * v
            s = disp + inc
            bp = s - disp
            comp += (disp - (s - bp)) + (inc - bp)
            disp = s
            x = x0 + (disp + comp)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"ODE state became non-finite at step {k}")
    return x


def mel_to_linear(mel, fb, iterations=MU_ITERATIONS, eps=dsp.MEL_EPS):
    """Nonnegative magnitude whose mel projection matches ``mel``.

    Multiplicative updates on a relative (1/target^2 weighted) least-squares
    objective, so quiet mel bands are fitted as closely as loud ones.
    """
    W = fb.weights
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] != W.shape[0]:
        raise ConfigError(f"mel must be ({W.shape[0]}, L), got {mel.shape}")
    m = np.maximum(np.exp(mel) - eps, 0.0)
    wt = 1.0 / (m + eps) ** 2
    colsum = W.sum(axis=0)[:, None]
    live = colsum > 0
    x = np.where(live, np.maximum(W.T @ m / np.where(live, colsum, 1.0), 1e-12), 0.0)
    num = W.T @ (m * wt)
    for _ in range(iterations):
        x *= num / (W.T @ ((W @ x) * wt) + 1e-30)
    return x


def duration_frames(ref_frames, ref_text, gen_text, lo=0.3, hi=10.0):
    ratio = len(gen_text) / len(ref_text)
    return int(np.clip(round(ref_frames * ratio), math.ceil(lo * ref_frames), math.floor(hi * ref_frames)))


def is_silent_mel(mel, margin=SILENCE_MARGIN, eps=dsp.MEL_EPS):
    return float(np.mean(mel)) <= math.log(eps) + margin


def floor_silent(mel, margin=SILENCE_MARGIN, eps=dsp.MEL_EPS):
    """Snap a near-floor environment branch to the exact floor."""
    if is_silent_mel(mel, margin, eps):
        return np.full_like(mel, math.log(eps))
    return mel


@dataclass
class SynthesisResult:
    waveform: np.ndarray
    mel: np.ndarray
    ref_frames: int
    gen_frames: int
    scale: float
    env_silent: bool
    c_spk: np.ndarray
    c_env: np.ndarray


def prompt_branches(wave, ses_model, stft_config, masks=None):
    """``(speech_mag, env_mag)`` of a prompt; ``masks`` may be a callable ``mag -> MaskPair``."""
    mag = dsp.magnitude(dsp.stft(wave, stft_config))
    if callable(masks):
        pair = masks(mag)
    elif masks is not None:
        pair = masks
    else:
        pair = ses.masking_net_forward(mag, ses_model)
    return ses.apply_masks(mag, pair)


def synthesize(req, ses_model, model, fb=None, stft_config=None, gl_iterations=60,
               spk_masks=None, env_masks=None):
    """Generate ``gen_text`` in the speaker prompt's voice and the env prompt's environment."""
    cfg = stft_config or dsp.StftConfig()
    dit = model.config
    fb = fb or dsp.build_mel_filterbank(dit.mel_bins, cfg, (0.0, cfg.sample_rate / 2))
    spk_speech, _ = prompt_branches(req.speaker_prompt, ses_model, cfg, spk_masks)
    env_speech, env_bg = prompt_branches(req.env_prompt, ses_model, cfg, env_masks)

    scale = 1.0
    if req.snr_adapt:
        try:
            scale = snr_scale_factor(spk_speech, env_speech, env_bg)
        except UndefinedSnrError as exc:
            log.info("SNR adaptation skipped: %s", exc)
        env_bg = env_bg * scale

    spk_mel = dsp.mag_to_mel(spk_speech, fb)
    env_mel = floor_silent(dsp.mag_to_mel(env_bg, fb))
    env_silent = is_silent_mel(env_mel)
    L_ref = spk_mel.shape[1]
    L_gen = duration_frames(L_ref, req.ref_text, req.gen_text)
    L = L_ref + L_gen
    c_spk = np.zeros((dit.mel_bins, L))
    c_spk[:, :L_ref] = net.normalize_mel(spk_mel, dit)
    c_env = net.normalize_mel(env_mel, dit)
    cond = net.ConditionSet(corpus.extend_text(req.ref_text + req.gen_text, L), c_spk, c_env)

    x0 = np.random.default_rng(req.seed).standard_normal((dit.mel_bins, L))
    model.eval()

    def field_(x, t):
        with torch.no_grad():
            return dcfg_velocity(model, x, t, cond, req.guidance).double().numpy()

    x1 = ode_solve(x0, field_, req.guidance.ode_steps)
    mel = net.denormalize_mel(x1[:, L_ref:], dit)
    mag = mel_to_linear(mel, fb)
    wave = dsp.griffin_lim(mag, cfg, iterations=gl_iterations, seed=req.seed)
    return SynthesisResult(wave, mel, L_ref, L_gen, scale, env_silent, c_spk, c_env)
