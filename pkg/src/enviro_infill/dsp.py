"""STFT analysis/synthesis, mel projection, Griffin-Lim and energy arithmetic.

Spectrograms are plain numpy arrays laid out ``(F, L)`` (frequency by frame);
the :class:`StftConfig` that produced them travels alongside as an argument.
Frame ``l`` is centred on sample ``l * hop``: the signal is zero-padded by
``fft_size // 2`` on the left and by ``fft_size // 2`` plus enough to reach a
hop boundary on the right, so ``L = ceil(len(x) / hop) + 1`` and the last
frame is centred at or past the final sample.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.signal import get_window

from . import kernels
from .errors import ConfigError, InputTooShortError, ShapeError, UndefinedSnrError

MEL_EPS = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise ShapeError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    window_size: int = 1024
    hop_size: int = 256
    window: str = "hann"
    sample_rate: int = 24000
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if not 0 < self.hop_size <= self.window_size <= self.fft_size:
            raise ConfigError(
                "need 0 < hop_size <= window_size <= fft_size, got "
                f"{self.hop_size}, {self.window_size}, {self.fft_size}"
            )
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")

    @property
    def n_freqs(self):
        return self.fft_size // 2 + 1

    @property
    def pad(self):
        return self.fft_size // 2

    @property
    def window_array(self):
        """Analysis window zero-padded (centred) to ``fft_size``."""
        if "window" not in self._cache:
            w = get_window(self.window, self.window_size, fftbins=True).astype(np.float64)
            left = (self.fft_size - self.window_size) // 2
            full = np.zeros(self.fft_size)
            full[left:left + self.window_size] = w
            self._cache["window"] = full
        return self._cache["window"]

    def cola_deviation(self):
        """Relative ripple of the squared-window overlap-add envelope."""
        w2 = self.window_array ** 2
        n = w2.size
        reps = -(-n // self.hop_size) + 1
        padded = np.zeros(reps * self.hop_size)
        padded[:n] = w2
        env = padded.reshape(reps, self.hop_size).sum(axis=0)
        mean = env.mean()
        if mean <= 0:
            return np.inf
        return float((env.max() - env.min()) / mean)

    def is_cola(self, tol=1e-6):
        return self.cola_deviation() <= tol

    def frames_for(self, n_samples, center=True):
        if center:
            return -(-n_samples // self.hop_size) + 1
        return (n_samples - self.fft_size) // self.hop_size + 1

    def energy_constant(self):
        """Expected energy(stft(x)) / energy(x) for long broadband signals.

        Each of the ``n_freqs`` one-sided bins carries ``sum(w**2)`` times the
        per-sample power, and every sample is covered ``sum(w**2) / hop``
        times over; a signal with no energy near DC or Nyquist comes out
        about ``1 / n_freqs`` lower.
        """
        w = self.window_array
        return self.n_freqs * float(np.sum(w ** 2)) / self.hop_size


def _samples(x):
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def stft(wave, config=StftConfig(), center=True):
    """Complex STFT, shape ``(fft_size // 2 + 1, L)``."""
    x = _samples(wave).reshape(-1)
    if x.size < config.window_size:
        raise InputTooShortError(
            f"waveform has {x.size} samples, shorter than one window ({config.window_size})"
        )
    if center:
        tail = -x.size % config.hop_size
        x = np.pad(x, (config.pad, config.pad + tail))
    elif x.size < config.fft_size:
        x = np.pad(x, (0, config.fft_size - x.size))
    n_frames = (x.size - config.fft_size) // config.hop_size + 1
    frames = kernels.frame_signal(x, config.window_array, config.hop_size, n_frames)
    return np.fft.rfft(frames, axis=1).T


def istft(spec, config=StftConfig(), center=True, length=None):
    """Least-squares inverse STFT.

    With ``center=True`` the centring pad is trimmed and the output has
    ``(L - 1) * hop`` samples unless ``length`` is given.  With
    ``center=False`` the full overlap-add extent is returned.
    """
    if not config.is_cola():
        raise ConfigError(
            f"window/hop pair is not COLA (ripple {config.cola_deviation():.3g})"
        )
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != config.n_freqs:
        raise ShapeError(f"expected ({config.n_freqs}, L) spectrogram, got {spec.shape}")
    frames = np.fft.irfft(spec.T, n=config.fft_size, axis=1)
    y, wss = kernels.overlap_add(frames, config.window_array, config.hop_size)
    nz = wss > 1e-10 * max(wss.max(), 1e-300)
    y[nz] /= wss[nz]
    if center:
        y = y[config.pad:]
        n = (spec.shape[1] - 1) * config.hop_size if length is None else length
        y = y[:n]
        if y.size < n:
            y = np.pad(y, (0, n - y.size))
    elif length is not None:
        y = np.pad(y[:length], (0, max(0, length - y.size)))
    return y


def magnitude(spec):
    return np.abs(spec)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    mel_bins: int
    freq_range: tuple

    @property
    def n_freqs(self):
        return self.weights.shape[1]

    @cached_property
    def gram(self):
        return self.weights.T @ self.weights


def build_mel_filterbank(mel_bins=80, stft_config=StftConfig(), freq_range=(0.0, 12000.0)):
    """Triangular filters uniformly spaced on the HTK mel scale, peak weight 1."""
    lo, hi = float(freq_range[0]), float(freq_range[1])
    nyquist = stft_config.sample_rate / 2.0
    if mel_bins < 1:
        raise ConfigError("mel_bins must be >= 1")
    if not 0.0 <= lo < hi <= nyquist:
        raise ConfigError(f"freq_range {freq_range} must lie within [0, {nyquist}]")
    freqs = np.arange(stft_config.n_freqs) * stft_config.sample_rate / stft_config.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(lo), hz_to_mel(hi), mel_bins + 2))
    weights = np.zeros((mel_bins, freqs.size))
    for m in range(mel_bins):
        left, centre, right = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - left) / (centre - left)
        fall = (right - freqs) / (right - centre)
        row = np.maximum(0.0, np.minimum(rise, fall))
        if not row.any():
            # filter narrower than one bin
            row[np.argmin(np.abs(freqs - centre))] = 1.0
        weights[m] = row / row.max()
    return MelFilterbank(weights=weights, mel_bins=mel_bins, freq_range=(lo, hi))


def mag_to_mel(mag, fb, eps=MEL_EPS):
    """Log-compressed mel spectrogram ``log(fb @ mag + eps)``, shape ``(M, L)``."""
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2 or mag.shape[0] != fb.n_freqs:
        raise ShapeError(f"filterbank expects {fb.n_freqs} bins, magnitude has shape {mag.shape}")
    return np.log(fb.weights @ mag + eps)


def spectral_convergence(target, estimate):
    num = np.linalg.norm(np.abs(estimate) - target)
    den = np.linalg.norm(target)
    return float(num / den) if den > 0 else float(num)


def griffin_lim(mag, config=StftConfig(), iterations=60, momentum=0.99, seed=0,
                length=None, return_errors=False):
    """Phase reconstruction by accelerated Griffin-Lim with a monotone safeguard.

    Each iteration first tries the momentum-extrapolated projection; if that
    raises the spectral convergence error it falls back to the plain
    projection, and if that does too the previous iterate is kept.  The
    recorded error sequence is therefore non-increasing.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    n_out = (mag.shape[1] - 1) * config.hop_size if length is None else length

    def project(ph):
        y = istft(mag * ph, config, length=n_out)
        return y, stft(y, config)

    def unit(z):
        a = np.abs(z)
        out = np.ones_like(z)
        nz = a > 0
        out[nz] = z[nz] / a[nz]
        return out

    x, rebuilt = project(phase)
    err = spectral_convergence(mag, rebuilt)
    errors = [err]
    accel = rebuilt
    for _ in range(iterations - 1):
        cand_x, cand = project(unit(accel))
        cand_err = spectral_convergence(mag, cand)
        if cand_err > err:
            cand_x, cand = project(unit(rebuilt))
            cand_err = spectral_convergence(mag, cand)
            if cand_err > err:
                errors.append(err)
                accel = rebuilt
                continue
        x, err = cand_x, cand_err
        accel = cand + momentum * (cand - rebuilt)
        rebuilt = cand
        errors.append(err)
    if return_errors:
        return x, errors
    return x


def energy(x):
    """Squared 2-norm of a waveform or a (magnitude) spectrogram."""
    if isinstance(x, Waveform):
        x = x.samples
    a = np.abs(np.asarray(x))
    return float(np.sum(a * a))


def snr_db(signal_energy, noise_energy):
    if not noise_energy > 0:
        raise UndefinedSnrError("noise energy must be positive for an SNR")
    if signal_energy < 0:
        raise ValueError("signal energy must be non-negative")
    if signal_energy == 0:
        return float("-inf")
    return float(10.0 * np.log10(signal_energy / noise_energy))
