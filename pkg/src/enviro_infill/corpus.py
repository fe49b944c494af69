"""Dataset construction: SNR mixing, augmentation, span masks, text extension
and the synthetic tone-coded corpus used for desk-scale experiments.

Desk "speech" is a sequence of harmonic tones, one per character, each lasting
``frames_per_token`` STFT hops; the fundamental is keyed to the character so a
template matcher can read the text back.  Desk "environments" are band-limited
noises above the speech band with slow amplitude modulation.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, TextOverflowError, UndefinedSnrError

FILL_ID = 0
UNK_ID = 1
NULL_ID = 2
UNK_CHAR = "�"
CHARSET = " abcdefghijklmnopqrstuvwxyz'.,?!-"
DESK_ALPHABET = "abcdefghijklmnop"


class Vocab:
    """Character vocabulary with reserved fill, unknown and null ids."""

    def __init__(self, chars=CHARSET):
        self.chars = chars
        self._to_id = {c: i + 3 for i, c in enumerate(chars)}
        self._to_id[UNK_CHAR] = UNK_ID

    def __len__(self):
        return len(self.chars) + 3

    def id_of(self, ch):
        return self._to_id.get(ch, UNK_ID)

    def lookup(self, idx):
        if idx == UNK_ID:
            return UNK_CHAR
        if idx < 3 or idx >= len(self):
            raise KeyError(f"id {idx} has no character")
        return self.chars[idx - 3]

    def encode(self, text):
        return [self.id_of(c) for c in text]

    def decode(self, ids):
        return "".join(self.lookup(int(i)) for i in ids if int(i) != FILL_ID)


def extend_text(text, length, vocab=None):
    """Character ids followed by ``FILL_ID`` padding to exactly ``length``."""
    vocab = vocab or Vocab()
    ids = vocab.encode(text)
    if len(ids) > length:
        raise TextOverflowError(f"text has {len(ids)} tokens but only {length} frames")
    out = np.full(length, FILL_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def sample_span_mask(length, ratio_range=(0.7, 1.0), rng=None):
    """One contiguous masked span (1 = to generate) of ``round(r * length)`` frames."""
    lo, hi = ratio_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"ratio_range {ratio_range} must satisfy 0 <= lo <= hi <= 1")
    if length < 1:
        raise ConfigError("span mask length must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    r = rng.uniform(lo, hi) if hi > lo else lo
    span = int(round(r * length))
    start = int(rng.integers(0, length - span + 1))
    mask = np.zeros(length, dtype=np.int8)
    mask[start:start + span] = 1
    return mask


@dataclass
class MixSpec:
    train_snr_range: tuple = (-5.0, 15.0)
    eval_snr_range: tuple = (0.0, 20.0)
    augment_prob: float = 0.5
    crossfade_s: float = 0.01

    def __post_init__(self):
        for name in ("train_snr_range", "eval_snr_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must be ordered, got {(lo, hi)}")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("augment_prob must lie in [0, 1]")


def fit_length(env, n, rng, sample_rate=24000, crossfade_s=0.01):
    """Random crop of ``env`` to ``n`` samples, looping with a crossfade if short."""
    env = np.asarray(env, dtype=np.float64)
    if env.size < n:
        fade = min(int(round(crossfade_s * sample_rate)), env.size // 2)
        out = env.copy()
        ramp = np.linspace(0.0, 1.0, fade + 2)[1:-1]
        while out.size < n + env.size:
            if fade:
                joined = out[-fade:] * ramp[::-1] + env[:fade] * ramp
                out = np.concatenate([out[:-fade], joined, env[fade:]])
            else:
                out = np.concatenate([out, env])
        env = out
    start = int(rng.integers(0, env.size - n + 1))
    return env[start:start + n].copy()


def mix_at_snr(clean, env, snr, rng, sample_rate=24000, crossfade_s=0.01):
    """Scale ``env`` so that ``clean`` sits ``snr`` dB above it and add them.

    Returns ``(mixture, scaled_env)`` with both matching ``len(clean)``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    crop = fit_length(env, clean.size, rng, sample_rate, crossfade_s)
    e_clean = dsp.energy(clean)
    e_env = dsp.energy(crop)
    if e_clean <= 0 or e_env <= 0:
        raise UndefinedSnrError("cannot set an SNR with a silent clean or environment signal")
    gain = np.sqrt(e_clean / (e_env * 10.0 ** (snr / 10.0)))
    scaled = gain * crop
    return clean + scaled, scaled


def augment(clean, env_pool, spec, rng, sample_rate=24000, snr_range=None):
    """Probabilistic augmentation: mix with a random pool clip or pair with silence.

    Returns ``(mixture, env_used, snr_db)``; ``snr_db`` is ``None`` for silence.
    """
    if len(env_pool) == 0:
        raise ConfigError("environment pool is empty")
    lo, hi = snr_range or spec.train_snr_range
    clean = np.asarray(clean, dtype=np.float64)
    if rng.random() < spec.augment_prob:
        env = env_pool[int(rng.integers(len(env_pool)))]
        snr = float(rng.uniform(lo, hi))
        mixture, used = mix_at_snr(clean, env, snr, rng, sample_rate, spec.crossfade_s)
        return mixture, used, snr
    return clean.copy(), np.zeros_like(clean), None


@dataclass
class ToneCode:
    """Character-to-fundamental mapping for synthetic speech."""

    alphabet: str = DESK_ALPHABET
    f0_range: tuple = (200.0, 1600.0)
    frames_per_token: int = 8
    hop_size: int = 256
    sample_rate: int = 24000
    fade_s: float = 0.005

    def __post_init__(self):
        mels = np.linspace(dsp.hz_to_mel(self.f0_range[0]), dsp.hz_to_mel(self.f0_range[1]), len(self.alphabet))
        self.f0 = {c: float(f) for c, f in zip(self.alphabet, dsp.mel_to_hz(mels))}

    @property
    def token_samples(self):
        return self.frames_per_token * self.hop_size

    def synthesize(self, text, timbre=(1.0, 0.5, 0.25), level=0.1, rng=None):
        """Concatenated harmonic tones, phase-continuous within each token."""
        n = self.token_samples
        t = np.arange(n) / self.sample_rate
        fade = int(round(self.fade_s * self.sample_rate))
        env = np.ones(n)
        if fade:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
            env[:fade] = ramp
            env[-fade:] = ramp[::-1]
        out = np.zeros(n * len(text))
        for k, ch in enumerate(text):
            f0 = self.f0[ch]
            ph = 0.0 if rng is None else rng.uniform(0, 2 * np.pi)
            seg = sum(a * np.sin(2 * np.pi * (h + 1) * f0 * t + (h + 1) * ph) for h, a in enumerate(timbre))
            out[k * n:(k + 1) * n] = level * env * seg
        return out


def band_noise(n, rng, band=(6000.0, 8000.0), am_rate=1.0, am_depth=0.4, sample_rate=24000, level=0.05):
    """Band-limited noise with raised-cosine band edges and slow AM."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    lo, hi = band
    skirt = 0.1 * (hi - lo)
    gain = np.clip(np.minimum(freqs - (lo - skirt), (hi + skirt) - freqs) / skirt, 0.0, 1.0)
    gain = 0.5 - 0.5 * np.cos(np.pi * gain)
    x = np.fft.irfft(spec * gain, n)
    t = np.arange(n) / sample_rate
    x *= 1.0 + am_depth * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    rms = np.sqrt(np.mean(x ** 2))
    return level * x / rms if rms > 0 else x


@dataclass
class DeskCorpusSpec:
    n_items: int = 500
    n_speakers: int = 8
    text_len: tuple = (6, 12)
    band_center: tuple = (6500.0, 10000.0)
    band_width: tuple = (800.0, 2500.0)
    env_seconds: tuple = (0.4, 3.0)
    tone: ToneCode = field(default_factory=ToneCode)
    mix: MixSpec = field(default_factory=MixSpec)

    @property
    def sample_rate(self):
        return self.tone.sample_rate


@dataclass
class CorpusItem:
    id: str
    text: str
    speaker: int
    clean: np.ndarray
    env: np.ndarray
    mixture: np.ndarray
    snr_db: float | None

    def to_record(self, root):
        return {
            "id": self.id,
            "clean_path": f"{self.id}_clean.wav",
            "env_path": f"{self.id}_env.wav",
            "mixture_path": f"{self.id}_mix.wav",
            "snr_db": self.snr_db,
            "text": self.text,
        }


def speaker_timbre(speaker, seed=0):
    rng = np.random.default_rng([seed, 10_000 + speaker])
    return (1.0, float(rng.uniform(0.25, 0.8)), float(rng.uniform(0.05, 0.45))), float(rng.uniform(0.06, 0.14))


def random_environment(rng, spec, n=None):
    sr = spec.sample_rate
    if n is None:
        n = int(rng.uniform(*spec.env_seconds) * sr)
    centre = rng.uniform(*spec.band_center)
    width = rng.uniform(*spec.band_width)
    band = (centre - width / 2, min(centre + width / 2, 0.95 * sr / 2))
    return band_noise(n, rng, band, rng.uniform(0.5, 3.0), rng.uniform(0.2, 0.6), sr)


def random_text(rng, spec):
    n = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1))
    alpha = spec.tone.alphabet
    return "".join(alpha[i] for i in rng.integers(0, len(alpha), n))


def make_item(index, seed, spec):
    """One corpus item from its own ``(seed, index)`` random stream."""
    rng = np.random.default_rng([seed, index])
    text = random_text(rng, spec)
    speaker = int(rng.integers(spec.n_speakers))
    timbre, level = speaker_timbre(speaker, seed)
    clean = spec.tone.synthesize(text, timbre, level, rng)
    env_src = random_environment(rng, spec)
    mixture, env, snr = augment(clean, [env_src], spec.mix, rng, spec.sample_rate)
    return CorpusItem(f"item{index:05d}", text, speaker, clean, env, mixture, snr)


def build_desk_corpus(spec=None, seed=0):
    spec = spec or DeskCorpusSpec()
    return [make_item(i, seed, spec) for i in range(spec.n_items)]


def decode_tones(wave, n_tokens, code=None, config=None, fb=None):
    """Read back a tone-coded string by template matching in the log-mel domain.

    The waveform is cut into ``n_tokens`` equal spans; the central half of each
    span is averaged and compared (cosine similarity on log-mel above the
    floor) against a clean rendering of every alphabet character.
    """
    code = code or ToneCode()
    config = config or dsp.StftConfig(sample_rate=code.sample_rate)
    fb = fb or dsp.build_mel_filterbank(80, config, (0.0, code.sample_rate / 2))
    mel = dsp.mag_to_mel(np.abs(dsp.stft(np.asarray(wave, dtype=np.float64), config)), fb)
    return decode_mel_tones(mel, n_tokens, code, config, fb)


def _templates(code, config, fb):
    key = (code.alphabet, code.f0_range, code.frames_per_token, config, fb.weights.shape)
    cache = _templates.__dict__.setdefault("cache", {})
    if key not in cache:
        rows = []
        for ch in code.alphabet:
            x = code.synthesize(ch * 3)
            mel = dsp.mag_to_mel(np.abs(dsp.stft(x, config)), fb)
            s = code.frames_per_token
            rows.append(mel[:, s + 2:2 * s - 2].mean(axis=1))
        cache[key] = np.stack(rows)
    return cache[key]


def decode_mel_tones(mel, n_tokens, code=None, config=None, fb=None, speech_hz=5000.0):
    code = code or ToneCode()
    config = config or dsp.StftConfig(sample_rate=code.sample_rate)
    fb = fb or dsp.build_mel_filterbank(80, config, (0.0, code.sample_rate / 2))
    tmpl = _templates(code, config, fb)
    centres = dsp.mel_to_hz(np.linspace(dsp.hz_to_mel(fb.freq_range[0]), dsp.hz_to_mel(fb.freq_range[1]), fb.mel_bins + 2))[1:-1]
    band = centres < speech_hz
    floor = np.log(dsp.MEL_EPS)

    def prep(v):
        v = np.maximum(v[band] - floor, 0.0)
        v = v - v.mean()
        return v / (np.linalg.norm(v) + 1e-12)

    t = np.stack([prep(r) for r in tmpl])
    edges = np.linspace(0, mel.shape[1], n_tokens + 1)
    out = []
    for k in range(n_tokens):
        a, b = edges[k], edges[k + 1]
        q = (b - a) / 4
        lo, hi = int(np.ceil(a + q)), int(np.floor(b - q))
        hi = max(hi, lo + 1)
        out.append(code.alphabet[int(np.argmax(t @ prep(mel[:, lo:hi].mean(axis=1))))])
    return "".join(out)


def write_corpus(items, out_dir, spec, fmt="float32"):
    """WAV payloads plus ``manifest.jsonl`` (one JSON record per line)."""
    from .wavio import write_wav

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sr = spec.sample_rate
    lines = []
    for item in items:
        rec = item.to_record(out_dir)
        write_wav(out_dir / rec["clean_path"], dsp.Waveform(item.clean, sr), fmt)
        write_wav(out_dir / rec["env_path"], dsp.Waveform(item.env, sr), fmt)
        write_wav(out_dir / rec["mixture_path"], dsp.Waveform(item.mixture, sr), fmt)
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path, load_audio=True, expected_rate=None):
    """Parse a manifest; audio paths are resolved relative to its directory."""
    from .wavio import read_wav

    path = Path(path)
    root = path.parent
    items = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if load_audio:
            rec["clean"] = read_wav(root / rec["clean_path"], expected_rate).samples
            rec["env"] = read_wav(root / rec["env_path"], expected_rate).samples
            rec["mixture"] = read_wav(root / rec["mixture_path"], expected_rate).samples
        items.append(rec)
    return items


def spec_to_dict(spec):
    return asdict(spec)


class DynamicMixer:
    """On-the-fly remixing of clean utterances with a pool of environments.

    Every draw picks fresh pairings and SNRs from ``rng``, so successive
    epochs see different mixtures while a seeded mixer reproduces exactly.
    """

    def __init__(self, cleans, texts, env_pool, spec, rng, sample_rate=24000):
        if not cleans:
            raise ConfigError("no clean utterances to mix")
        self.cleans = [np.asarray(c, dtype=np.float64) for c in cleans]
        self.texts = list(texts)
        self.env_pool = [np.asarray(e, dtype=np.float64) for e in env_pool if dsp.energy(e) > 0]
        if not self.env_pool:
            raise ConfigError("environment pool has no non-silent clip")
        self.spec = spec
        self.rng = rng
        self.sample_rate = sample_rate

    @classmethod
    def from_records(cls, records, spec, rng, sample_rate=24000):
        envs = [r["env"] for r in records if r.get("snr_db") is not None]
        return cls([r["clean"] for r in records], [r["text"] for r in records], envs, spec, rng, sample_rate)

    def draw(self, batch_size, augment_prob=None):
        """List of ``(clean, env, mixture, text, snr_db)`` tuples."""
        spec = self.spec
        if augment_prob is not None:
            spec = MixSpec(spec.train_snr_range, spec.eval_snr_range, augment_prob, spec.crossfade_s)
        out = []
        for _ in range(batch_size):
            i = int(self.rng.integers(len(self.cleans)))
            clean = self.cleans[i]
            mixture, env, snr = augment(clean, self.env_pool, spec, self.rng, self.sample_rate)
            out.append((clean, env, mixture, self.texts[i], snr))
        return out

    def draw_paired(self, batch_size, remix_prob):
        """Like :meth:`draw`, plus a speaker view per item.

        With probability ``remix_prob`` the view is an independent
        re-augmentation ``(mixture, env)`` of the same clean utterance,
        otherwise ``None`` (the view is the target mixture itself).
        """
        out = []
        for clean, env, mixture, text, snr in self.draw(batch_size):
            view = None
            if self.rng.random() < remix_prob:
                view = augment(clean, self.env_pool, self.spec, self.rng, self.sample_rate)[:2]
            out.append((clean, env, mixture, text, snr, view))
        return out
