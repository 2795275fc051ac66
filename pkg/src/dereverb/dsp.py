"""Audio I/O, resampling, convolution, STFT analysis/synthesis and alignment.

Everything here is a pure function of its inputs: no global state, safe to
call concurrently. Waveforms travel as float64 arrays in [-1, 1] inside
:class:`AudioClip`; spectrograms are [frames x bins] arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import upfirdn

from .errors import (
    AllZeroRir,
    CorruptHeader,
    EmptyAudio,
    IoFailure,
    NonColaParams,
    UnsupportedFormat,
)

FRAME_LEN = 512  # 32 ms at 16 kHz
HOP = 256        # 16 ms at 16 kHz
SAMPLE_RATE = 16000
LOG_FLOOR = 1e-5

_RESAMPLE_TAPS = 32      # filter taps per polyphase branch
_KAISER_BETA = 8.6


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"clip must be mono 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("clip contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Complex STFT, [frames x bins], with the framing that produced it."""

    re: np.ndarray
    im: np.ndarray
    frame_len: int
    hop: int

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError("re/im shapes differ")
        if self.re.shape[1] != self.frame_len // 2 + 1:
            raise ValueError("bin count must be frame_len/2 + 1")
        if self.re.shape[0] < 1:
            raise ValueError("need at least one frame")

    @property
    def shape(self):
        return self.re.shape


@dataclass(frozen=True)
class MagSpectrogram:
    """Non-negative magnitude spectrogram; `scale` is the max divided out
    (0 while unnormalized)."""

    mag: np.ndarray
    scale: float = 0.0

    def __post_init__(self):
        if np.any(self.mag < 0):
            raise ValueError("magnitudes must be non-negative")

    @property
    def shape(self):
        return self.mag.shape


# ---------------------------------------------------------------------------
# WAV files (RIFF, PCM16 or IEEE float32)
# ---------------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file; channels are averaged to mono."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt " and len(body) >= 16:
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise CorruptHeader(f"{path}: missing fmt/data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format == 0xFFFE and len(data) > 0:
        raise UnsupportedFormat(f"{path}: extensible WAV not supported")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: format code {audio_format}, {bits}-bit")
    if channels < 1 or sample_rate <= 0:
        raise CorruptHeader(f"{path}: bad fmt chunk")
    if samples.size == 0:
        raise EmptyAudio(f"{path}: no samples")
    if channels > 1:
        samples = samples[: (samples.size // channels) * channels]
        samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, sample_rate)


def write_wav(path, clip: AudioClip, format: str = "pcm16") -> None:
    """Write `clip` as RIFF/WAVE. `format` is "pcm16" or "float32";
    pcm16 clamps to [-1, 1] and rounds to the nearest code."""
    if format == "pcm16":
        scaled = np.rint(np.clip(clip.samples, -1.0, 1.0) * 32768.0)
        payload = np.clip(scaled, -32768, 32767).astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif format == "float32":
        payload = clip.samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ValueError(f"unknown format {format!r}")

    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, audio_format, 1, clip.sample_rate,
        clip.sample_rate * block, block, bits,
        b"data", len(payload),
    )
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited rate conversion (windowed-sinc polyphase, Kaiser window).

    Output length is round(len * target/source). A clip already at the
    target rate is returned unchanged.
    """
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return clip
    g = gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    n_out = int(round(len(clip) * target_rate / clip.sample_rate))

    n = _RESAMPLE_TAPS * up + 1  # odd length -> integer group delay
    center = (n - 1) // 2
    cutoff = 0.5 / max(up, down)
    t = np.arange(n) - center
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * t) * np.kaiser(n, _KAISER_BETA)
    h *= up / h.sum()

    # Prepend zeros so the group delay lands on the decimated output grid.
    lead = (-(_RESAMPLE_TAPS // 2)) % down
    first = (center + lead * up) // down
    x = np.concatenate([np.zeros(lead), clip.samples, np.zeros(_RESAMPLE_TAPS)])
    y = upfirdn(h, x, up, down)
    return AudioClip(y[first:first + n_out], target_rate)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def convolve_direct(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Full linear convolution by direct summation, length len(x)+len(h)-1."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.size == 0 or h.size == 0:
        raise ValueError("convolution operands must be non-empty")
    return np.convolve(x, h)


def convolve_fft(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Full linear convolution via a zero-padded FFT (next power of two)."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.size == 0 or h.size == 0:
        raise ValueError("convolution operands must be non-empty")
    out_len = x.size + h.size - 1
    n = 1 << (out_len - 1).bit_length()
    y = np.fft.irfft(np.fft.rfft(x, n) * np.fft.rfft(h, n), n)
    return y[:out_len]


# ---------------------------------------------------------------------------
# STFT / ISTFT
# ---------------------------------------------------------------------------

def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(clip: AudioClip, frame_len: int = FRAME_LEN, hop: int = HOP) -> ComplexSpectrogram:
    """Hann-windowed STFT with reflect center padding.

    Frame count is 1 + floor(len/hop); bins are frame_len/2 + 1.
    """
    x = clip.samples
    if x.size < 1:
        raise ValueError("cannot transform an empty clip")
    frames = 1 + x.size // hop
    padded = np.pad(x, frame_len // 2, mode="reflect")
    window = _hann_periodic(frame_len)
    strided = np.lib.stride_tricks.sliding_window_view(padded, frame_len)[::hop]
    spec = np.fft.rfft(strided[:frames] * window, axis=1)
    return ComplexSpectrogram(spec.real.copy(), spec.imag.copy(), frame_len, hop)


def istft(spec: ComplexSpectrogram, hop: int | None = None,
          length: int | None = None, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """Invert an STFT by windowed overlap-add with exact normalization.

    `length` trims the result to the original sample count; the default is
    (frames - 1) * hop, exact whenever the source length was a hop multiple.
    """
    hop = spec.hop if hop is None else hop
    frame_len = spec.frame_len
    if hop * 2 != frame_len:
        raise NonColaParams(f"hop {hop} is not half of frame {frame_len}")
    frames = spec.re.shape[0]
    window = _hann_periodic(frame_len)
    pieces = np.fft.irfft(spec.re + 1j * spec.im, n=frame_len, axis=1) * window

    total = frame_len + (frames - 1) * hop
    buf = np.zeros(total)
    wsum = np.zeros(total)
    wsq = window * window
    for t in range(frames):
        buf[t * hop:t * hop + frame_len] += pieces[t]
        wsum[t * hop:t * hop + frame_len] += wsq
    out = buf / np.where(wsum > 1e-12, wsum, 1.0)

    pad = frame_len // 2
    n = (frames - 1) * hop if length is None else length
    if n > frames * hop:
        raise ValueError(f"cannot recover {n} samples from {frames} frames")
    return AudioClip(out[pad:pad + n], sample_rate)


# ---------------------------------------------------------------------------
# Magnitudes
# ---------------------------------------------------------------------------

def magnitude(spec: ComplexSpectrogram) -> MagSpectrogram:
    """Pointwise magnitude sqrt(re^2 + im^2), unnormalized (scale 0)."""
    return MagSpectrogram(np.hypot(spec.re, spec.im), scale=0.0)


def log_magnitude(mag, floor: float = LOG_FLOOR) -> np.ndarray:
    """Natural log of the magnitude, floored so silence stays finite."""
    m = mag.mag if isinstance(mag, MagSpectrogram) else np.asarray(mag, dtype=np.float64)
    return np.log(np.maximum(m, floor))


def normalize_spectrogram(mag: MagSpectrogram) -> MagSpectrogram:
    """Divide by the global max and record it; all-zero input passes through
    with scale 0."""
    peak = float(mag.mag.max()) if mag.mag.size else 0.0
    if peak == 0.0:
        return MagSpectrogram(mag.mag.copy(), scale=0.0)
    return MagSpectrogram(mag.mag / peak, scale=peak)


def denormalize_spectrogram(mag: MagSpectrogram) -> MagSpectrogram:
    """Undo :func:`normalize_spectrogram` exactly when scale > 0."""
    if mag.scale == 0.0:
        return mag
    return MagSpectrogram(mag.mag * mag.scale, scale=0.0)


# ---------------------------------------------------------------------------
# Alignment helpers
# ---------------------------------------------------------------------------

def detect_direct_path_delay(rir: AudioClip) -> int:
    """Index of the first arrival: first |h| within 20 dB of the peak."""
    mags = np.abs(rir.samples)
    peak = mags.max() if mags.size else 0.0
    if peak == 0.0:
        raise AllZeroRir("impulse response has no energy")
    return int(np.argmax(mags >= 0.1 * peak))


def trim_leading_silence(clip: AudioClip, threshold_db: float = -40.0):
    """Drop samples before the first one above `threshold_db` relative to the
    peak. Returns (trimmed clip, offset dropped); an all-silent clip becomes
    empty with offset len."""
    mags = np.abs(clip.samples)
    peak = mags.max() if mags.size else 0.0
    threshold = peak * 10.0 ** (threshold_db / 20.0)
    above = mags > threshold
    if not above.any():
        return AudioClip(np.empty(0), clip.sample_rate), len(clip)
    offset = int(np.argmax(above))
    return AudioClip(clip.samples[offset:], clip.sample_rate), offset


def fix_length(clip: AudioClip, target_len: int) -> AudioClip:
    """Truncate or zero-pad the tail to exactly `target_len` samples."""
    if target_len <= 0:
        raise ValueError(f"target length must be positive, got {target_len}")
    n = len(clip)
    if n == target_len:
        return clip
    if n > target_len:
        return AudioClip(clip.samples[:target_len], clip.sample_rate)
    return AudioClip(np.concatenate([clip.samples, np.zeros(target_len - n)]),
                     clip.sample_rate)


def delay(clip: AudioClip, samples: int) -> AudioClip:
    """Prepend `samples` zeros."""
    if samples < 0:
        raise ValueError("delay must be non-negative")
    if samples == 0:
        return clip
    return AudioClip(np.concatenate([np.zeros(samples), clip.samples]),
                     clip.sample_rate)
