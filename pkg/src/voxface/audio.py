"""64-bin log-mel spectrograms with per-utterance, per-bin normalization."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from voxface.errors import DataError

N_MELS = 64
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise DataError("waveform is empty")
        if self.sample_rate <= 0:
            raise DataError("sample rate must be positive")
        object.__setattr__(self, "samples", s)


@dataclass(frozen=True)
class MelSpectrogram:
    """``values`` is ``(frames, 64)``. ``degenerate_bins`` lists bins whose
    variance fell below the floor during normalization."""

    values: np.ndarray
    frame_hop: float
    normalized: bool = False
    degenerate_bins: tuple[int, ...] = ()

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if v.shape[1] != N_MELS:
            raise DataError(f"mel spectrogram must have {N_MELS} bins, got {v.shape[1]}")
        if not np.all(np.isfinite(v)):
            raise DataError("mel spectrogram values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(sample_rate: float, n_mels: int = N_MELS) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    edges = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(sample_rate: float, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """``(n_mels, n_fft // 2 + 1)`` unit-peak triangular filters spanning 0 Hz to Nyquist.

    Filter ``k`` rises linearly (in Hz) from edge ``k`` to edge ``k + 1`` and
    falls to edge ``k + 2``; the edges are equally spaced on the mel scale.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lo) / (mid - lo)
    fall = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


def melspectrogram(
    w: Waveform,
    window: float = 0.025,
    hop: float = 0.010,
    n_fft: Optional[int] = None,
    n_mels: int = N_MELS,
) -> MelSpectrogram:
    """Log mel energies of Hann-windowed power spectra.

    ``window`` and ``hop`` are in seconds. ``n_fft`` defaults to the next power
    of two at or above the window length (frames are zero-padded). Frames are
    taken without padding the signal, so there are
    ``(len - win) // hop + 1`` of them.
    """
    sr = w.sample_rate
    win = int(round(window * sr))
    step = int(round(hop * sr))
    if win < 1 or step < 1:
        raise DataError("window and hop must cover at least one sample")
    if w.samples.size < win:
        raise DataError(f"waveform of {w.samples.size} samples is shorter than one window ({win})")
    if n_fft is None:
        n_fft = 1 << (win - 1).bit_length()
    if n_fft < win:
        raise DataError("n_fft must be at least the window length")
    n = frame_count(w.samples.size, win, step)
    idx = np.arange(win)[None, :] + step * np.arange(n)[:, None]
    frames = w.samples[idx] * np.hanning(win + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(sr, n_fft, n_mels).T
    return MelSpectrogram(np.log(np.maximum(energies, LOG_FLOOR)), step / sr)


def normalize_per_bin(m: MelSpectrogram) -> MelSpectrogram:
    """Zero mean, unit (biased) variance per bin across frames.

    Bins whose variance is below ``VAR_FLOOR`` become all zeros and are
    reported in ``degenerate_bins``.
    """
    if m.n_frames < 2:
        raise DataError("normalization needs at least 2 frames")
    v = m.values
    mean = v.mean(axis=0)
    var = v.var(axis=0)
    flat = var < VAR_FLOOR
    out = (v - mean) / np.sqrt(np.where(flat, 1.0, var))
    out[:, flat] = 0.0
    return MelSpectrogram(out, m.frame_hop, True, tuple(int(i) for i in np.flatnonzero(flat)))


def load_wav(path: str | os.PathLike) -> Waveform:
    """Single-channel 16-bit PCM or float32 WAV; 16-bit samples are scaled to [-1, 1)."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: cannot read WAV ({exc})") from None
    if data.ndim != 1:
        raise DataError(f"{path}: expected a single channel, got {data.shape[1]}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, float(rate))


def save_matrix(path: str | os.PathLike, m: MelSpectrogram) -> None:
    """Whitespace-delimited text, one frame per row."""
    np.savetxt(path, m.values, fmt="%.10g")
