"""Signal-processing primitives: windows, FFT/STFT, DCT-II and filterbanks.

Every feature extractor is built from these pieces. Arrays follow the
layout ``[n_frames, n_bins]`` for spectrograms and ``[n_filters, n_bins]``
for filterbank weights, so filtering a spectrogram is ``power @ fb.weights.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioClip
from .errors import FilterbankError, InvalidLength


@dataclass(frozen=True)
class Spectrogram:
    power: np.ndarray  # [n_frames, n_fft // 2 + 1]
    n_fft: int
    hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.power.shape[0]

    @property
    def frequencies(self) -> np.ndarray:
        return bin_frequencies(self.n_fft, self.sample_rate)


@dataclass(frozen=True)
class Filterbank:
    weights: np.ndarray  # [n_filters, n_fft // 2 + 1]
    kind: str
    sample_rate: int
    n_fft: int
    centers: np.ndarray | None = None  # Hz, where meaningful

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]

    def apply(self, power: np.ndarray) -> np.ndarray:
        """Filter energies, shape ``[n_frames, n_filters]``."""
        return power @ self.weights.T


def bin_frequencies(n_fft: int, sample_rate: int) -> np.ndarray:
    return np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)


def hamming_window(n: int) -> np.ndarray:
    """Symmetric Hamming window."""
    if n < 1:
        raise InvalidLength(f"window length must be >= 1, got {n}")
    if n == 1:
        return np.ones(1)
    i = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * i / (n - 1))


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def fft(x: np.ndarray) -> np.ndarray:
    """Full complex DFT along the last axis, iterative radix-2.

    Leading axes are treated as a batch, so one call transforms every
    frame of a spectrogram.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise InvalidLength(f"FFT length must be a power of two, got {n}")
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    a = x[..., rev].astype(np.complex128)
    batch = a.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(*batch, n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(*batch, n)
        size *= 2
    return a


def fft_real(frame: np.ndarray) -> np.ndarray:
    """One-sided spectrum (bins ``0..n/2``) of a real frame or batch of frames."""
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[-1]
    return fft(frame)[..., : n // 2 + 1]


def frame_signal(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Frames ``[t*hop, t*hop + n_fft)``, zero-padded past the end."""
    n_frames = -(-len(samples) // hop)
    if n_frames == 0:
        return np.zeros((0, n_fft))
    padded = np.zeros((n_frames - 1) * hop + n_fft)
    padded[: len(samples)] = samples
    starts = np.arange(n_frames)[:, None] * hop
    return padded[starts + np.arange(n_fft)[None, :]]


def stft(clip: AudioClip, n_fft: int = 1024, hop: int = 512, window: np.ndarray | None = None) -> Spectrogram:
    if not _is_pow2(n_fft):
        raise InvalidLength(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ValueError(f"hop must lie in (0, n_fft], got {hop}")
    if window is None:
        window = hamming_window(n_fft)
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (n_fft,):
        raise InvalidLength(f"window length {window.shape} != n_fft {n_fft}")
    frames = frame_signal(clip.samples, n_fft, hop)
    if frames.shape[0] == 0:
        power = np.zeros((0, n_fft // 2 + 1))
    else:
        power = np.abs(fft_real(frames * window)) ** 2
    return Spectrogram(power, n_fft, hop, clip.sample_rate)


def dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Unnormalized DCT-II kernel ``cos(pi * n * (m + 0.5) / M)``, shape [n_out, n_in]."""
    n = np.arange(n_out)[:, None]
    m = np.arange(n_in)[None, :]
    return np.cos(np.pi * n * (m + 0.5) / n_in)


def dct_ii(x: np.ndarray, n_out: int | None = None, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[axis]
    if m < 1:
        raise InvalidLength("DCT input must be non-empty")
    n_out = m if n_out is None else n_out
    if not 1 <= n_out <= m:
        raise InvalidLength(f"n_out must lie in [1, {m}], got {n_out}")
    moved = np.moveaxis(x, axis, -1)
    return np.moveaxis(moved @ dct_matrix(m, n_out).T, -1, axis)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _check_band(n: int, sample_rate: int, fmin: float, fmax: float):
    if n < 1:
        raise FilterbankError(f"filter count must be >= 1, got {n}")
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise FilterbankError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got {fmin}, {fmax}")


def _require_nonzero_rows(weights: np.ndarray, kind: str):
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise FilterbankError(
            f"{kind} filters {empty.tolist()} cover no FFT bin; widen the band, "
            "reduce the filter count, or raise n_fft"
        )


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 20.0, fmax: float | None = None) -> Filterbank:
    """HTK-mel triangular filters with unit peak height."""
    fmax = sample_rate / 2 if fmax is None else fmax
    _check_band(n_mels, sample_rate, fmin, fmax)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    if np.any(np.diff(edges) <= 0):
        raise FilterbankError("mel edges are not distinct")
    freqs = bin_frequencies(n_fft, sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    _require_nonzero_rows(weights, "mel")
    return Filterbank(weights, "mel", sample_rate, n_fft, edges[1:-1].copy())


def hz_to_erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def erb_rate_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_bandwidth(fc):
    """Glasberg-Moore ERB in Hz."""
    return 24.7 + 0.108 * np.asarray(fc, dtype=np.float64)


def gammatone_filterbank(n_filters: int, n_fft: int, sample_rate: int, fmin: float = 20.0, fmax: float | None = None) -> Filterbank:
    """4th-order gammatone magnitude responses sampled at the FFT bins.

    Centers are equally spaced on the ERB-rate scale between ``fmin`` and
    ``fmax``; each row is ``|1 / (1 + j (f - fc) / b)|**4`` with
    ``b = 1.019 * ERB(fc)``, scaled so its largest bin equals 1.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    _check_band(n_filters, sample_rate, fmin, fmax)
    centers = erb_rate_to_hz(np.linspace(hz_to_erb_rate(fmin), hz_to_erb_rate(fmax), n_filters))
    if n_filters > 1 and np.any(np.diff(centers) <= 0):
        raise FilterbankError("gammatone centers are not distinct")
    freqs = bin_frequencies(n_fft, sample_rate)
    b = 1.019 * erb_bandwidth(centers)[:, None]
    response = (1.0 + ((freqs[None, :] - centers[:, None]) / b) ** 2) ** -2
    weights = response / response.max(axis=1, keepdims=True)
    _require_nonzero_rows(weights, "gammatone")
    return Filterbank(weights, "gammatone", sample_rate, n_fft, centers)


def pitch_class(freq, tuning_hz: float = 440.0):
    """Nearest equal-tempered pitch class, 0 = A."""
    return np.mod(np.round(12.0 * np.log2(np.asarray(freq, dtype=np.float64) / tuning_hz)), 12).astype(int)


def chroma_map(n_fft: int, sample_rate: int, tuning_hz: float = 440.0) -> Filterbank:
    freqs = bin_frequencies(n_fft, sample_rate)
    weights = np.zeros((12, freqs.size))
    classes = pitch_class(freqs[1:], tuning_hz)
    weights[classes, np.arange(1, freqs.size)] = 1.0
    return Filterbank(weights, "chroma_map", sample_rate, n_fft)


def octave_edges(n_bands: int, fmin: float) -> np.ndarray:
    return fmin * 2.0 ** np.arange(n_bands + 1)


def octave_subbands(n_bands: int, n_fft: int, sample_rate: int, fmin: float = 200.0) -> Filterbank:
    """0/1 rows for octave bands ``[fmin*2**m, fmin*2**(m+1))``.

    Band 0 also takes the non-DC bins below ``fmin`` and the last band
    runs up to and including Nyquist. The DC bin belongs to no band.
    """
    nyquist = sample_rate / 2
    if n_bands < 1:
        raise FilterbankError(f"n_bands must be >= 1, got {n_bands}")
    if not 0 < fmin < nyquist:
        raise FilterbankError(f"fmin must lie in (0, {nyquist}), got {fmin}")
    freqs = bin_frequencies(n_fft, sample_rate)
    edges = octave_edges(n_bands, fmin)
    band = np.searchsorted(edges, freqs, side="right") - 1
    band = np.clip(band, 0, n_bands - 1)
    weights = np.zeros((n_bands, freqs.size))
    weights[band[1:], np.arange(1, freqs.size)] = 1.0
    _require_nonzero_rows(weights, "octave")
    return Filterbank(weights, "octave_bands", sample_rate, n_fft, edges[:-1].copy())
