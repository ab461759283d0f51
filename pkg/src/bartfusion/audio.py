"""Audio front end: WAV I/O, band-limited downsampling and log-mel features.

The pipeline is fixed: downsample to 16 kHz, frame with a 512-point periodic
Hann window every 256 samples (no centre padding), take the power spectrum,
project onto 128 HTK-mel triangles spanning 0-8 kHz and apply ``ln(x + 1e-10)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
FFT_SIZE = 512
HOP = 256
N_MELS = 128
LOG_EPS = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray
    sample_rate: int = SAMPLE_RATE
    hop: int = HOP
    fft_size: int = FFT_SIZE
    n_mels: int = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"mel spectrogram must be 2-d, got shape {self.values.shape}")
        self.n_mels = self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def read_wav(path) -> AudioClip:
    """Load a PCM or float WAV file, averaging channels to mono."""
    rate, data = wavfile.read(Path(path))
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if info.min == 0:  # unsigned 8-bit
            data = (data.astype(np.float64) - 128.0) / 128.0
        else:
            data = data.astype(np.float64) / float(-info.min)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioClip(data, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write ``clip`` as 32-bit float mono WAV."""
    wavfile.write(Path(path), clip.sample_rate, clip.samples.astype(np.float32))


def resample(clip: AudioClip, target_rate: int = SAMPLE_RATE, zero_crossings: int = 16,
             beta: float = 8.6) -> AudioClip:
    """Downsample with a Kaiser-windowed sinc low-pass at the target Nyquist.

    Output sample ``j`` sits at source position ``j * src / tgt``; its taps
    are normalised to unit sum, so constant signals pass through unchanged.
    Samples beyond either end are taken as the nearest edge sample.
    """
    src = clip.sample_rate
    if target_rate > src:
        raise NotImplementedError(f"upsampling {src} Hz -> {target_rate} Hz is not supported")
    if target_rate == src:
        return AudioClip(clip.samples.copy(), src)
    x = clip.samples
    n = len(x)
    n_out = n * target_rate // src
    fc = target_rate / src
    half = zero_crossings / fc
    reach = int(np.ceil(half))
    offsets = np.arange(-reach, reach + 2)
    out = np.empty(n_out, dtype=np.float64)
    chunk = 8192
    for start in range(0, n_out, chunk):
        j = np.arange(start, min(start + chunk, n_out), dtype=np.int64)
        base = (j * src) // target_rate
        frac = ((j * src) % target_rate) / target_rate
        idx = base[:, None] + offsets[None, :]
        dist = frac[:, None] - offsets[None, :]
        inside = np.abs(dist) <= half
        taper = np.i0(beta * np.sqrt(np.clip(1.0 - (dist / half) ** 2, 0.0, 1.0))) / np.i0(beta)
        weights = np.where(inside, fc * np.sinc(fc * dist) * taper, 0.0)
        weights /= weights.sum(axis=1, keepdims=True)
        out[start : start + len(j)] = (weights * x[np.clip(idx, 0, n - 1)]).sum(axis=1)
    return AudioClip(out, target_rate)


def hann_window(size: int = FFT_SIZE) -> np.ndarray:
    """Periodic Hann window ``0.5 * (1 - cos(2 pi k / size))``."""
    k = np.arange(size)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / size))


def n_frames(n_samples: int, size: int = FFT_SIZE, hop: int = HOP) -> int:
    if n_samples < size:
        raise ValueError(f"need at least {size} samples, got {n_samples}")
    return 1 + (n_samples - size) // hop


def stft_power(clip: AudioClip, size: int = FFT_SIZE, hop: int = HOP) -> np.ndarray:
    """Power spectrogram ``|FFT|^2`` with shape ``[size // 2 + 1, n_frames]``."""
    count = n_frames(len(clip.samples), size, hop)
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, size)[::hop][:count]
    spectrum = np.fft.rfft(frames * hann_window(size), axis=1)
    return (spectrum.real ** 2 + spectrum.imag ** 2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_peak_frequencies(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Centre frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return edges[1:-1]


@functools.lru_cache(maxsize=8)
def _filterbank(n_mels, f_min, f_max, n_bins, sample_rate) -> np.ndarray:
    if f_max > sample_rate / 2:
        raise ValueError(f"f_max {f_max} exceeds Nyquist {sample_rate / 2}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_bins) * sample_rate / (2.0 * (n_bins - 1))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # a triangle narrower than the bin spacing can miss every bin
    for row in np.nonzero(weights.sum(axis=1) == 0)[0]:
        weights[row, np.argmin(np.abs(freqs - centre[row, 0]))] = 1.0
    weights.setflags(write=False)
    return weights


def mel_filterbank(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = SAMPLE_RATE / 2,
                   n_bins: int = FFT_SIZE // 2 + 1, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-mel filters, ``[n_mels, n_bins]``.

    Filter peaks are equally spaced on ``2595 * log10(1 + f / 700)``.  A filter
    whose support falls between two FFT bins gets unit weight on the bin
    nearest its centre instead of being empty.
    """
    return _filterbank(n_mels, float(f_min), float(f_max), n_bins, sample_rate)


def log_mel(clip: AudioClip, n_mels: int = N_MELS) -> MelSpectrogram:
    """Log-mel spectrogram of ``clip`` (downsampled to 16 kHz first if needed)."""
    if clip.sample_rate != SAMPLE_RATE:
        clip = resample(clip, SAMPLE_RATE)
    power = stft_power(clip)
    mel = mel_filterbank(n_mels) @ power
    return MelSpectrogram(np.log(mel + LOG_EPS))


def sine(freq: float, seconds: float, sample_rate: int = SAMPLE_RATE, amplitude: float = 0.5,
         phase: float = 0.0) -> AudioClip:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioClip(amplitude * np.sin(2 * np.pi * freq * t + phase), sample_rate)
