"""Framing and overlap-add kernels behind the STFT.

Each kernel has a numba loop implementation and a numpy implementation with
identical semantics.  The public names dispatch on ``_accel.USE_NUMBA``.
"""
import numpy as np

from . import _accel


@_accel.njit
def _frame_loop(x, window, hop, n_frames):
    n = window.shape[0]
    out = np.empty((n_frames, n), dtype=np.float64)
    for i in range(n_frames):
        start = i * hop
        for j in range(n):
            out[i, j] = x[start + j] * window[j]
    return out


def _frame_numpy(x, window, hop, n_frames):
    n = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(x, n)[::hop][:n_frames]
    return view * window


@_accel.njit
def _ola_loop(frames, window, hop):
    n_frames, n = frames.shape
    length = n + hop * (n_frames - 1)
    y = np.zeros(length, dtype=np.float64)
    wss = np.zeros(length, dtype=np.float64)
    for i in range(n_frames):
        start = i * hop
        for j in range(n):
            y[start + j] += frames[i, j] * window[j]
            wss[start + j] += window[j] * window[j]
    return y, wss


def _ola_numpy(frames, window, hop):
    n_frames, n = frames.shape
    length = n + hop * (n_frames - 1)
    y = np.zeros(length)
    wss = np.zeros(length)
    weighted = frames * window
    w2 = window * window
    # frames overlapping by more than half are accumulated in strided groups
    # so each group is a single vectorised add with no index collisions
    step = -(-n // hop)
    for g in range(step):
        idx = np.arange(g, n_frames, step)
        if idx.size == 0:
            continue
        starts = idx * hop
        pos = (starts[:, None] + np.arange(n)[None, :]).ravel()
        y[pos] += weighted[idx].ravel()
        wss[pos] += np.tile(w2, idx.size)
    return y, wss


def frame_signal(x, window, hop, n_frames):
    """Windowed frames ``(n_frames, len(window))`` of a padded 1-D signal."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    window = np.ascontiguousarray(window, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _frame_loop(x, window, int(hop), int(n_frames))
    return _frame_numpy(x, window, int(hop), int(n_frames))


def overlap_add(frames, window, hop):
    """Overlap-add of synthesis-windowed frames.

    Returns the summed signal and the squared-window envelope used for
    least-squares normalisation.
    """
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    window = np.ascontiguousarray(window, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _ola_loop(frames, window, int(hop))
    return _ola_numpy(frames, window, int(hop))
