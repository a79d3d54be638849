"""STFT analysis/synthesis with a square-root Hann window, feature packing and WAV I/O.

DFT convention: forward unnormalized, inverse scaled by 1/K. Only the one-sided
half spectrum (K/2+1 bins) is kept.
"""

import wave
from dataclasses import dataclass

import numpy as np

from .profiles import SAMPLE_RATE


def sqrt_hann(frame_length):
    # periodic Hann, so that consecutive squared windows at 50% overlap sum to one
    n = np.arange(frame_length)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_length))


@dataclass
class SpectralSequence:
    """Frames of one-sided complex spectra, shape (T, K/2+1)."""

    frames: np.ndarray
    frame_length: int = 512
    frame_shift: int = 256

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=complex)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a 2-D array (T, bins)")
        if self.frames.shape[1] != self.frame_length // 2 + 1:
            raise ValueError(
                f"expected {self.frame_length // 2 + 1} bins per frame, got {self.frames.shape[1]}")
        if 2 * self.frame_shift != self.frame_length:
            raise ValueError("frame_shift must equal frame_length/2")

    def __len__(self):
        return self.frames.shape[0]

    def with_frames(self, frames):
        return SpectralSequence(frames, self.frame_length, self.frame_shift)


def _as_signal(signal):
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite values")
    return x


def num_frames(length, frame_length=512, frame_shift=256):
    return (length - frame_length) // frame_shift + 1


def stft(signal, frame_length=512, frame_shift=256):
    x = _as_signal(signal)
    if 2 * frame_shift != frame_length:
        raise ValueError("frame_shift must equal frame_length/2")
    if len(x) < frame_length:
        raise ValueError("signal too short")
    T = num_frames(len(x), frame_length, frame_shift)
    idx = np.arange(T)[:, None] * frame_shift + np.arange(frame_length)[None, :]
    frames = x[idx] * sqrt_hann(frame_length)
    return SpectralSequence(np.fft.rfft(frames, axis=1), frame_length, frame_shift)


def istft(spec):
    """Inverse DFT per frame, square-root Hann synthesis window, 50% overlap-add.

    Output length is (T-1)*shift + frame_length. The first and last half frame
    are only covered by one window and are not perfectly reconstructed.
    """
    K, R = spec.frame_length, spec.frame_shift
    T = len(spec)
    out = np.zeros((T - 1) * R + K if T else 0)
    if T == 0:
        return out
    frames = np.fft.irfft(spec.frames, n=K, axis=1) * sqrt_hann(K)
    for ell in range(T):
        out[ell * R:ell * R + K] += frames[ell]
    return out


def padded_stft(signal, frame_length=512, frame_shift=256):
    """STFT of the signal padded so every original sample lies in the fully overlapped region."""
    x = _as_signal(signal)
    R = frame_shift
    T = -(-len(x) // R) + 1
    padded = np.zeros((T - 1) * R + frame_length)
    padded[R:R + len(x)] = x
    return stft(padded, frame_length, frame_shift)


def padded_istft(spec, length):
    """Inverse of :func:`padded_stft`, cropped back to ``length`` samples."""
    R = spec.frame_shift
    return istft(spec)[R:R + length]


def pack(spec, M=260):
    """Real/imag parts as channels 0/1, zero-padded to M rows: array (M, T, 2)."""
    n_bins = spec.frame_length // 2 + 1
    frames = spec.frames
    if frames.shape[1] != n_bins:
        raise ValueError(f"expected {n_bins} bins, got {frames.shape[1]}")
    if M < n_bins:
        raise ValueError(f"feature height {M} smaller than bin count {n_bins}")
    out = np.zeros((M, frames.shape[0], 2))
    out[:n_bins, :, 0] = frames.real.T
    out[:n_bins, :, 1] = frames.imag.T
    return out


def unpack(features, frame_length=512):
    """Inverse of :func:`pack`. Padding rows beyond the valid bins are discarded."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 3 or features.shape[2] != 2:
        raise ValueError("feature tensor must have shape (M, T, 2)")
    n_bins = frame_length // 2 + 1
    if features.shape[0] < n_bins:
        raise ValueError(f"feature height {features.shape[0]} smaller than bin count {n_bins}")
    frames = (features[:n_bins, :, 0] + 1j * features[:n_bins, :, 1]).T
    return SpectralSequence(frames, frame_length, frame_length // 2)


def frame_energy(spec):
    """Per-frame time-domain energy implied by a one-sided spectrum (Parseval)."""
    K = spec.frame_length
    p = np.abs(spec.frames) ** 2
    return (p[:, 0] + p[:, -1] + 2.0 * p[:, 1:-1].sum(axis=1)) / K


class WavFormatError(ValueError):
    pass


def read_wav(path):
    """Read a 16-bit PCM mono 16 kHz WAV as float samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed WAV not supported")
            if w.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            if w.getframerate() != SAMPLE_RATE:
                raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()} Hz")
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    return np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0


def quantize(signal):
    """Round to the 16-bit grid that :func:`write_wav` stores (clipped to full scale)."""
    x = _as_signal(signal)
    return np.clip(np.round(x * 32768.0), -32768, 32767) / 32768.0


def write_wav(path, signal):
    x = quantize(signal)
    data = (x * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(data.tobytes())
