"""Mono WAV reading and writing (16-bit PCM or 32-bit float)."""
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform
from .errors import SampleRateError, ShapeError

FORMATS = ("pcm16", "float32")


def read_wav(path, expected_rate=None):
    """Load a mono WAV as a float64 :class:`Waveform` in ``[-1, 1]``.

    A mismatch with ``expected_rate`` is an error; nothing is resampled.
    """
    path = Path(path)
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ShapeError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != int(expected_rate):
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, wave, fmt="float32"):
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    x = wave.samples
    if fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, wave.sample_rate, data)
    return path


def write_mel_dump(path, mel):
    """Flat binary grid: int32 M, int32 L, then M*L little-endian float32 (row-major)."""
    mel = np.asarray(mel, dtype="<f4")
    if mel.ndim != 2:
        raise ShapeError("mel dump expects a 2-D (M, L) array")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(np.array(mel.shape, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(mel).tobytes())
    return path


def read_mel_dump(path):
    raw = Path(path).read_bytes()
    m, l = np.frombuffer(raw[:8], dtype="<i4")
    body = np.frombuffer(raw[8:], dtype="<f4")
    if body.size != m * l:
        raise ShapeError(f"{path}: header says {m}x{l}, payload has {body.size} values")
    return body.reshape(int(m), int(l)).astype(np.float64)
