"""Feature extractors, resizing to the common grid, and channel stacking.

All maps are laid out ``[n_bins, n_frames]``. Six kinds are supported:

====  =====================================================
LM    log-mel spectrogram
MFCC  mel-frequency cepstral coefficients
GTCC  gammatone cepstral coefficients
CH    chroma (12 pitch classes, A = row 0)
SPC   octave-band spectral contrast
TZ    tonal centroid (6 rows)
====  =====================================================
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import dsp
from .audio_io import AudioClip, fix_duration, resample
from .errors import ConfigError, StackError

KINDS = ("LM", "MFCC", "GTCC", "CH", "SPC", "TZ")
KIND_CODES = {kind: code for code, kind in enumerate(KINDS)}

TABLE1_CONFIGS = (
    "LM",
    "LM+TZ",
    "LM+MFCC",
    "MFCC+TZ",
    "LM+SPC+CH",
    "MFCC+GTCC+CH+LM",
)

GRID = 128


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 22050
    duration: float = 3.0
    n_fft: int = 1024
    hop: int = 512
    fmin: float = 20.0
    fmax: float | None = None
    n_mels: int = 128
    n_mfcc: int = 40
    n_gammatone: int = 128
    n_gtcc: int = 40
    n_contrast_bands: int = 6
    contrast_fmin: float = 200.0
    tuning_hz: float = 440.0
    epsilon: float = 1e-10

    def __post_init__(self):
        counts = ("n_fft", "hop", "n_mels", "n_mfcc", "n_gammatone", "n_gtcc", "n_contrast_bands")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.n_mfcc > self.n_mels:
            raise ConfigError("n_mfcc cannot exceed n_mels")
        if self.n_gtcc > self.n_gammatone:
            raise ConfigError("n_gtcc cannot exceed n_gammatone")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FeatureMap:
    values: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class StackedTensor:
    data: np.ndarray  # [128, 128, C]
    channel_kinds: tuple
    normalization: tuple | None = None  # (mean[C], std[C]) once applied

    @property
    def shape(self):
        return self.data.shape

    def normalized(self, mean, std) -> "StackedTensor":
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        return StackedTensor((self.data - mean) / std, self.channel_kinds, (mean, std))


# -- filterbank cache -------------------------------------------------------

@lru_cache(maxsize=64)
def _mel_bank(n_mels, n_fft, sr, fmin, fmax):
    return dsp.mel_filterbank(n_mels, n_fft, sr, fmin, fmax)


@lru_cache(maxsize=64)
def _gammatone_bank(n, n_fft, sr, fmin, fmax):
    return dsp.gammatone_filterbank(n, n_fft, sr, fmin, fmax)


@lru_cache(maxsize=64)
def _chroma_bank(n_fft, sr, tuning):
    return dsp.chroma_map(n_fft, sr, tuning)


@lru_cache(maxsize=64)
def _octave_bank(n_bands, n_fft, sr, fmin):
    return dsp.octave_subbands(n_bands, n_fft, sr, fmin)


def mel_bank(cfg: FeatureConfig, sample_rate: int) -> dsp.Filterbank:
    return _mel_bank(cfg.n_mels, cfg.n_fft, sample_rate, cfg.fmin, cfg.fmax)


def gammatone_bank(cfg: FeatureConfig, sample_rate: int) -> dsp.Filterbank:
    return _gammatone_bank(cfg.n_gammatone, cfg.n_fft, sample_rate, cfg.fmin, cfg.fmax)


def tonnetz_matrix() -> np.ndarray:
    """6x12 tonal-centroid transform (fifths, minor thirds, major thirds)."""
    n = np.arange(12)
    rows = []
    for step, radius in ((7, 1.0), (3, 1.0), (4, 0.5)):
        angle = step * np.pi * n / 6.0
        rows.append(radius * np.sin(angle))
        rows.append(radius * np.cos(angle))
    return np.array(rows)


# -- extractors -------------------------------------------------------------

def _power(clip: AudioClip, cfg: FeatureConfig) -> np.ndarray:
    if len(clip) == 0:
        raise ValueError("cannot extract features from an empty clip")
    return dsp.stft(clip, cfg.n_fft, cfg.hop).power


def _meta(cfg, clip, **extra):
    return {"sample_rate": clip.sample_rate, "n_fft": cfg.n_fft, "hop": cfg.hop, **extra}


def filter_energies(power: np.ndarray, bank: dsp.Filterbank) -> np.ndarray:
    """Band energies ``[n_filters, n_frames]`` from a ``[n_frames, n_bins]`` power spectrogram."""
    return bank.apply(power).T


def cepstral_coefficients(energies: np.ndarray, n_coeffs: int, epsilon: float) -> np.ndarray:
    """DCT-II of log band energies along axis 0."""
    return dsp.dct_ii(np.log(energies + epsilon), n_coeffs, axis=0)


def log_mel(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureMap:
    bank = mel_bank(cfg, clip.sample_rate)
    energies = filter_energies(_power(clip, cfg), bank)
    return FeatureMap(np.log(energies + cfg.epsilon), "LM", _meta(cfg, clip, n_mels=cfg.n_mels))


def cepstrum(clip: AudioClip, cfg: FeatureConfig, bank: dsp.Filterbank, n_coeffs: int, kind: str) -> FeatureMap:
    energies = filter_energies(_power(clip, cfg), bank)
    values = cepstral_coefficients(energies, n_coeffs, cfg.epsilon)
    return FeatureMap(values, kind, _meta(cfg, clip, n_filters=bank.n_filters, n_coeffs=n_coeffs))


def mfcc(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureMap:
    return cepstrum(clip, cfg, mel_bank(cfg, clip.sample_rate), cfg.n_mfcc, "MFCC")


def gtcc(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureMap:
    return cepstrum(clip, cfg, gammatone_bank(cfg, clip.sample_rate), cfg.n_gtcc, "GTCC")


def chroma_from_power(power: np.ndarray, bank: dsp.Filterbank, epsilon: float) -> np.ndarray:
    total = power.sum(axis=1)
    return (bank.apply(power) / (total[:, None] + epsilon)).T


def chroma(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureMap:
    bank = _chroma_bank(cfg.n_fft, clip.sample_rate, cfg.tuning_hz)
    values = chroma_from_power(_power(clip, cfg), bank, cfg.epsilon)
    return FeatureMap(values, "CH", _meta(cfg, clip, tuning_hz=cfg.tuning_hz))


def contrast_from_magnitude(magnitude: np.ndarray, bank: dsp.Filterbank, epsilon: float) -> np.ndarray:
    """Peak-to-valley ratio per band, ``[n_bands, n_frames]``."""
    out = np.empty((bank.n_filters, magnitude.shape[0]))
    for m, row in enumerate(bank.weights):
        band = magnitude[:, row > 0]
        hi = band.max(axis=1)
        lo = band.min(axis=1)
        out[m] = (hi - lo) / (hi + lo + epsilon)
    return out


def spectral_contrast(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureMap:
    bank = _octave_bank(cfg.n_contrast_bands, cfg.n_fft, clip.sample_rate, cfg.contrast_fmin)
    magnitude = np.sqrt(_power(clip, cfg))
    values = contrast_from_magnitude(magnitude, bank, cfg.epsilon)
    return FeatureMap(values, "SPC", _meta(cfg, clip, fmin=cfg.contrast_fmin))


def tonnetz(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> FeatureMap:
    ch = chroma(clip, cfg).values
    return FeatureMap(tonnetz_matrix() @ ch, "TZ", _meta(cfg, clip))


EXTRACTORS = {
    "LM": log_mel,
    "MFCC": mfcc,
    "GTCC": gtcc,
    "CH": chroma,
    "SPC": spectral_contrast,
    "TZ": tonnetz,
}


def extract(clip: AudioClip, kind: str, cfg: FeatureConfig = FeatureConfig()) -> FeatureMap:
    try:
        fn = EXTRACTORS[kind]
    except KeyError:
        raise ConfigError(f"unknown feature token {kind}") from None
    return fn(clip, cfg)


# -- stacking ---------------------------------------------------------------

def _fit_axis(values: np.ndarray, target: int, axis: int) -> np.ndarray:
    size = values.shape[axis]
    if size == target:
        return values
    if size < target:
        pad = [(0, 0)] * values.ndim
        pad[axis] = (0, target - size)
        return np.pad(values, pad)
    src = np.arange(size)
    dst = np.linspace(0.0, size - 1, target)
    moved = np.moveaxis(values, axis, -1)
    out = np.empty(moved.shape[:-1] + (target,))
    for idx in np.ndindex(moved.shape[:-1]):
        out[idx] = np.interp(dst, src, moved[idx])
    return np.moveaxis(out, -1, axis)


def resize_map(fmap: FeatureMap, h: int = GRID, w: int = GRID) -> FeatureMap:
    """Zero-pad axes at or below the target size, linearly interpolate larger ones."""
    if fmap.values.size == 0:
        raise ValueError("cannot resize an empty feature map")
    values = _fit_axis(_fit_axis(np.asarray(fmap.values, dtype=np.float64), h, 0), w, 1)
    return FeatureMap(values, fmap.kind, {**fmap.meta, "source_shape": tuple(fmap.values.shape)})


def stack(maps) -> StackedTensor:
    maps = list(maps)
    if not maps:
        raise StackError("nothing to stack")
    shape = maps[0].values.shape
    for fm in maps:
        if fm.values.shape != shape:
            raise StackError(f"{fm.kind} map has shape {fm.values.shape}, expected {shape}")
    return StackedTensor(np.stack([fm.values for fm in maps], axis=-1), tuple(fm.kind for fm in maps))


def config_from_name(name: str) -> list[str]:
    """Parse a '+'-separated configuration name like ``"LM+SPC+CH"``."""
    tokens = [t.strip().upper() for t in name.split("+")]
    for tok in tokens:
        if tok not in KINDS:
            raise ConfigError(f"unknown feature token {tok or '<empty>'}")
    if len(set(tokens)) != len(tokens):
        raise ConfigError(f"duplicate feature token in {name!r}")
    return tokens


def canonical_name(name: str) -> str:
    return "+".join(config_from_name(name))


def prepare_clip(clip: AudioClip, cfg: FeatureConfig) -> AudioClip:
    """Resample to the configured rate and fix the duration."""
    return fix_duration(resample(clip, cfg.sample_rate), cfg.duration)


def extract_stack(clip: AudioClip, name: str, cfg: FeatureConfig = FeatureConfig(), prepare: bool = True) -> StackedTensor:
    if prepare:
        clip = prepare_clip(clip, cfg)
    return stack(resize_map(extract(clip, kind, cfg)) for kind in config_from_name(name))


def channel_statistics(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over a ``[N, H, W, C]`` batch; zero std maps to 1."""
    mean = batch.mean(axis=(0, 1, 2))
    std = batch.std(axis=(0, 1, 2))
    std = np.where(std > 0, std, 1.0)
    return mean, std


# -- FMAP dump format -------------------------------------------------------

_FMAP_MAGIC = b"FMAP"
_FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sIIIB")


def dump_fmap(fmap: FeatureMap) -> bytes:
    values = np.ascontiguousarray(fmap.values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError("FMAP records hold 2-D maps")
    rows, cols = values.shape
    return _FMAP_HEADER.pack(_FMAP_MAGIC, _FMAP_VERSION, rows, cols, KIND_CODES[fmap.kind]) + values.tobytes()


def dump_fmaps(maps) -> bytes:
    return b"".join(dump_fmap(m) for m in maps)


def load_fmaps(data: bytes) -> list[FeatureMap]:
    """Parse one or more concatenated FMAP records."""
    out = []
    stream = io.BytesIO(data)
    while True:
        head = stream.read(_FMAP_HEADER.size)
        if not head:
            return out
        if len(head) < _FMAP_HEADER.size:
            raise ValueError("truncated FMAP header")
        magic, version, rows, cols, code = _FMAP_HEADER.unpack(head)
        if magic != _FMAP_MAGIC or version != _FMAP_VERSION:
            raise ValueError(f"bad FMAP header {magic!r} v{version}")
        if code >= len(KINDS):
            raise ValueError(f"unknown FMAP kind code {code}")
        body = stream.read(rows * cols * 8)
        if len(body) != rows * cols * 8:
            raise ValueError("truncated FMAP payload")
        values = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
        out.append(FeatureMap(values, KINDS[code]))
