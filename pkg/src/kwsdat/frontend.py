"""WAV decoding and 40-dimensional log-Mel filterbank features.

Frames are 25 ms (400 samples) long every 10 ms (160 samples) at 16 kHz, so a
one-second clip gives 100 frames. Framing pads the tail so that a clip of N
samples always yields ceil(N / 160) frames.
"""

from __future__ import annotations

import io
import math
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, IntegrityError, VersionError

SAMPLE_RATE = 16000
FRAME_LENGTH = 400
FRAME_SHIFT = 160
NUM_MEL = 40
N_FFT = 512
F_MIN = 20.0
F_MAX = 7600.0
PRE_EMPHASIS = 0.97
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FrontendConfig:
    """Feature extraction constants; frame length and shift are fixed at 25/10 ms."""

    num_mel: int = NUM_MEL
    n_fft: int = N_FFT
    f_min: float = F_MIN
    f_max: float = F_MAX
    pre_emphasis: float = PRE_EMPHASIS
    log_floor: float = LOG_FLOOR


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(f"sample rate {self.sample_rate} Hz, expected {SAMPLE_RATE}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FormatError("audio must be mono")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def decode_wav(data: bytes) -> AudioClip:
    """Decode a 16-bit PCM mono 16 kHz RIFF/WAVE byte string."""
    try:
        with wave.open(io.BytesIO(data)) as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise FormatError(f"not a PCM WAV file: {exc}") from exc
    if channels != 1:
        raise FormatError(f"expected mono audio, got {channels} channels")
    if width != 2:
        raise FormatError(f"expected 16-bit PCM, got {8 * width}-bit samples")
    if rate != SAMPLE_RATE:
        raise FormatError(f"expected {SAMPLE_RATE} Hz, got {rate} Hz (no resampling)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0)


def read_wav(path) -> AudioClip:
    return decode_wav(Path(path).read_bytes())


def encode_wav(clip: AudioClip | np.ndarray) -> bytes:
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, clip) -> None:
    Path(path).write_bytes(encode_wav(clip))


def mel_scale(f_hz):
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ContractError("frequency must be non-negative")
    mel = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(mel) if mel.ndim == 0 else mel


def inverse_mel_scale(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(num_mel: int = NUM_MEL, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """num_mel + 2 frequencies (Hz): filter m spans edges[m]..edges[m+2], peaking at edges[m+1]."""
    return inverse_mel_scale(np.linspace(mel_scale(f_min), mel_scale(f_max), num_mel + 2))


@lru_cache(maxsize=4)
def mel_filterbank(num_mel: int = NUM_MEL, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Triangular filters (num_mel x n_fft//2+1) evaluated at each FFT bin frequency."""
    edges = mel_edges(num_mel, f_min, f_max)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def num_frames(num_samples: int) -> int:
    return math.ceil(num_samples / FRAME_SHIFT)


def frame_signal(x: np.ndarray) -> np.ndarray:
    """Split into ceil(N/160) overlapping 400-sample frames.

    The tail is reflect-padded by at most window - hop samples; anything
    further (short clips, N not a multiple of the hop) is zero-filled.
    """
    n = len(x)
    frames = num_frames(n)
    need = (frames - 1) * FRAME_SHIFT + FRAME_LENGTH - n
    reflect = min(need, FRAME_LENGTH - FRAME_SHIFT, n - 1)
    tail = x[-2 : -2 - reflect : -1] if reflect > 0 else x[:0]
    padded = np.concatenate([x, tail, np.zeros(need - reflect, dtype=x.dtype)])
    idx = np.arange(FRAME_LENGTH)[None, :] + FRAME_SHIFT * np.arange(frames)[:, None]
    return padded[idx]


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    return np.hanning(FRAME_LENGTH + 1)[:-1]  # periodic


def logmel(clip: AudioClip | np.ndarray, cfg: FrontendConfig | None = None, dtype=np.float32) -> np.ndarray:
    """T x 40 log-Mel energies of a 16 kHz clip, T = ceil(N / 160).

    Defaults: pre-emphasis 0.97, Hann window, 512-point power spectrum, 40
    triangular filters over 20-7600 Hz, natural log floored at 1e-10.
    """
    cfg = cfg or FrontendConfig()
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if len(x) < 1:
        raise ContractError("cannot compute features of an empty clip")
    emphasized = np.concatenate([x[:1], x[1:] - cfg.pre_emphasis * x[:-1]])
    frames = frame_signal(emphasized) * _hann()
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.num_mel, cfg.n_fft, SAMPLE_RATE, cfg.f_min, cfg.f_max)
    energy = power @ fb.T
    return np.log(np.maximum(energy, cfg.log_floor)).astype(dtype)


# -- feature dump ----------------------------------------------------------------

FEATURE_MAGIC = b"KWSF"
FEATURE_VERSION = 1


def dump_features(features: np.ndarray) -> bytes:
    """Serialize a T x F matrix: magic, u32 version, u32 T, u32 F, float32 LE data."""
    f = np.asarray(features)
    if f.ndim != 2:
        raise ContractError("feature dump expects a T x F matrix")
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, f.shape[0], f.shape[1])
    return header + np.ascontiguousarray(f, dtype="<f4").tobytes()


def load_features(data: bytes) -> np.ndarray:
    if data[:4] != FEATURE_MAGIC:
        raise FormatError("not a KWSF feature dump")
    if len(data) < 16:
        raise IntegrityError("feature dump header truncated")
    version, t, f = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise VersionError(f"feature dump version {version} unsupported")
    body = data[16:]
    if len(body) != 4 * t * f:
        raise IntegrityError(f"feature dump holds {len(body)} bytes, expected {4 * t * f}")
    return np.frombuffer(body, dtype="<f4").reshape(t, f).astype(np.float32)
