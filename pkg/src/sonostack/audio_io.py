"""WAV decoding, resampling and duration normalization."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DecodeError, UnsupportedFormat

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioClip:
    """Mono audio buffer.

    ``samples`` is a float64 array with amplitudes nominally in [-1, 1].
    """

    samples: np.ndarray
    sample_rate: int
    source_id: str = field(default="", compare=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"AudioClip expects mono samples, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body_start = pos + 8
        if body_start + size > len(data):
            raise DecodeError(
                f"chunk {cid!r} declares {size} bytes but only "
                f"{len(data) - body_start} remain"
            )
        yield cid, data[body_start : body_start + size]
        pos = body_start + size + (size & 1)


def decode_wav(data: bytes, source_id: str = "") -> AudioClip:
    """Decode a RIFF/WAVE byte string (16-bit PCM or 32-bit float, 1-2 channels)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE container")
    riff_size = struct.unpack_from("<I", data, 4)[0]
    if riff_size + 8 > len(data):
        raise DecodeError(f"RIFF size {riff_size} exceeds byte count {len(data) - 8}")

    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("fmt chunk too short")
            fmt = body
        elif cid == b"data":
            payload = body
    if fmt is None:
        raise DecodeError("missing fmt chunk")
    if payload is None:
        raise DecodeError("missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _EXTENSIBLE:
        if len(fmt) < 26:
            raise DecodeError("extensible fmt chunk too short")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise UnsupportedFormat(f"{channels} channels")
    if rate == 0:
        raise DecodeError("sample rate is zero")

    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormat(f"format tag {tag} with {bits} bits per sample")
    if block_align != channels * dtype.itemsize:
        raise DecodeError(f"block_align {block_align} inconsistent with format")

    n_frames = len(payload) // block_align
    frames = np.frombuffer(payload[: n_frames * block_align], dtype=dtype)
    samples = frames.astype(np.float64).reshape(n_frames, channels).mean(axis=1) * scale
    return AudioClip(samples, rate, source_id)


def encode_wav(clip: AudioClip, sample_format: str = "pcm16", channels: int = 1) -> bytes:
    """Serialize a clip to WAV bytes; ``channels=2`` duplicates the mono signal."""
    x = np.repeat(clip.samples[:, None], channels, axis=1)
    if sample_format == "pcm16":
        tag, bits = _PCM, 16
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    elif sample_format == "float32":
        tag, bits = _IEEE_FLOAT, 32
        payload = x.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    block_align = channels * bits // 8
    fmt = struct.pack(
        "<HHIIHH", tag, channels, clip.sample_rate, clip.sample_rate * block_align, block_align, bits
    )
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def read_wav(path) -> AudioClip:
    path = Path(path)
    return decode_wav(path.read_bytes(), source_id=str(path))


def write_wav(clip: AudioClip, path, sample_format: str = "pcm16") -> None:
    Path(path).write_bytes(encode_wav(clip, sample_format))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampler.

    Output sample ``i`` is read at source time ``i / target_rate``. A
    windowed-sinc kernel could replace the interpolation without changing
    the length contract.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))
    if len(clip) == 0 or n_out == 0:
        return AudioClip(np.zeros(n_out), target_rate, clip.source_id)
    positions = np.arange(n_out) * (clip.sample_rate / target_rate)
    out = np.interp(positions, np.arange(len(clip)), clip.samples)
    return AudioClip(out, target_rate, clip.source_id)


def fix_duration(clip: AudioClip, seconds: float) -> AudioClip:
    """Keep the head of the clip, zero-padding or truncating to ``seconds``."""
    if seconds <= 0:
        raise ValueError(f"seconds must be positive, got {seconds}")
    n = int(round(seconds * clip.sample_rate))
    if n == len(clip):
        return clip
    out = np.zeros(n)
    m = min(n, len(clip))
    out[:m] = clip.samples[:m]
    return AudioClip(out, clip.sample_rate, clip.source_id)
