"""ERLE, deltaSNR, black-box component decomposition and an external PESQ adapter."""

import math
import os
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .profiles import SAMPLE_RATE
from .signals import padded_istft, padded_stft, write_wav

ERLE_SMOOTHING = 0.9996
ERLE_SETTLE = 0.5  # seconds skipped before averaging
ERLE_CEILING = 120.0
BLACKBOX_EPS = 1e-12
PESQ_ENV = "FCRN_AEC_PESQ"
PESQ_ARGS_ENV = "FCRN_AEC_PESQ_ARGS"
DEFAULT_PESQ_ARGS = "+16000 +wb {ref} {deg}"


class MetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("signals must be 1-D with equal length")
    return a, b


def smoothed_power(x, alpha=ERLE_SMOOTHING):
    from scipy.signal import lfilter
    return lfilter([1.0 - alpha], [1.0, -alpha], np.asarray(x, dtype=float) ** 2)


def erle_trajectory(d, residual, fs=SAMPLE_RATE):
    """Samplewise ERLE in dB from IIR-smoothed echo and residual powers (NaN where no echo yet)."""
    d, residual = _pair(d, residual)
    p_d = smoothed_power(d)
    p_r = np.maximum(smoothed_power(residual), 1e-12 * p_d)
    with np.errstate(divide="ignore", invalid="ignore"):
        traj = 10.0 * np.log10(p_d / p_r)
    traj[p_d <= 0] = np.nan
    return np.minimum(traj, ERLE_CEILING)


def erle(d, residual, fs=SAMPLE_RATE, settle=ERLE_SETTLE):
    """File-level ERLE in dB: mean of the smoothed trajectory after the settling time.

    ``residual`` is the echo left in the output: d - d_hat for echo-only runs,
    or the processed echo component for black-box runs. Perfect cancellation
    saturates at 120 dB.
    """
    d, residual = _pair(d, residual)
    if not np.any(d):
        raise MetricError("echo signal has zero power")
    traj = erle_trajectory(d, residual, fs)
    skip = int(round(settle * fs))
    tail = traj[skip:] if len(traj) > skip else traj
    tail = tail[~np.isnan(tail)]
    if tail.size == 0:
        raise MetricError("echo has no power after the settling time")
    return float(np.mean(tail))


def is_saturated(value):
    return value is not None and value >= ERLE_CEILING - 1e-9


def _power(x):
    return float(np.mean(np.asarray(x, dtype=float) ** 2))


def delta_snr(s, n, s_tilde, n_tilde):
    """Output SNR minus input SNR, full-file powers."""
    p = [_power(v) for v in (s, n, s_tilde, n_tilde)]
    if min(p) <= 0.0:
        raise MetricError("deltaSNR needs nonzero speech and noise powers")
    return 10.0 * math.log10(p[2] / p[3]) - 10.0 * math.log10(p[0] / p[1])


def noise_attenuation(n, n_tilde):
    """SNR improvement for a noise-only input, assuming speech would pass unchanged."""
    p_n, p_t = _power(n), _power(n_tilde)
    if p_n <= 0:
        raise MetricError("noise has zero power")
    if p_t <= 0:
        return ERLE_CEILING
    return min(10.0 * math.log10(p_n / p_t), ERLE_CEILING)


@dataclass
class ComponentSet:
    s_tilde: np.ndarray
    n_tilde: np.ndarray
    d_tilde: np.ndarray
    gains: np.ndarray = field(repr=False, default=None)


def blackbox_decompose(y, e, s, n, d, frame_length=512, eps=BLACKBOX_EPS):
    """Split the output ``e`` into processed speech, noise and echo components.

    The system is summarized per frame and bin by the regularized gain
    G = E Y* / (|Y|^2 + eps), which is then applied to each unprocessed
    component's spectrum and resynthesized. The components sum to ``e`` up to
    the eps regularization.
    """
    sigs = [np.asarray(v, dtype=float) for v in (y, e, s, n, d)]
    if len({v.shape for v in sigs}) != 1:
        raise MetricError("all signals must have equal length")
    y, e, s, n, d = sigs
    K, R = frame_length, frame_length // 2
    Y = padded_stft(y, K, R)
    E = padded_stft(e, K, R)
    G = E.frames * np.conj(Y.frames) / (np.abs(Y.frames) ** 2 + eps)

    def apply(x):
        X = padded_stft(x, K, R)
        return padded_istft(X.with_frames(G * X.frames), len(y))

    return ComponentSet(apply(s), apply(n), apply(d), G)


# -- PESQ ----------------------------------------------------------------------

@dataclass
class PesqResult:
    score: float | None
    diagnostics: str = ""

    @property
    def available(self):
        return self.score is not None


_MOS_LINE = re.compile(r"MOS[-_ ]?LQO", re.IGNORECASE)
_FLOAT = re.compile(r"[-+]?\d+\.\d+|[-+]?\d+")


def parse_pesq_output(text):
    """MOS-LQO from tool output: the last number on a line mentioning MOS-LQO,
    or a line consisting of a single number. None if neither is found."""
    for line in text.splitlines():
        if _MOS_LINE.search(line):
            nums = _FLOAT.findall(line.split("=")[-1] if "=" in line else _MOS_LINE.split(line)[-1])
            if nums:
                return float(nums[-1])
    for line in text.splitlines():
        line = line.strip()
        if re.fullmatch(r"[-+]?\d+(\.\d+)?", line):
            return float(line)
    return None


def pesq_adapter(reference, degraded, tool_path=None, args_template=None, timeout=120):
    """Score with an external wideband PESQ executable.

    The tool is given two temporary 16-bit WAVs named ``ref.wav`` and
    ``deg.wav``. Without a tool, or when its output cannot be parsed, the
    result is unavailable; a score is never fabricated.
    """
    tool_path = tool_path or os.environ.get(PESQ_ENV)
    if not tool_path:
        return PesqResult(None, "no PESQ tool configured")
    args_template = args_template or os.environ.get(PESQ_ARGS_ENV, DEFAULT_PESQ_ARGS)
    reference, degraded = _pair(reference, degraded)
    with tempfile.TemporaryDirectory(prefix="pesq-") as tmp:
        ref_path, deg_path = Path(tmp, "ref.wav"), Path(tmp, "deg.wav")
        write_wav(ref_path, reference)
        write_wav(deg_path, degraded)
        args = [a.format(ref=ref_path, deg=deg_path) for a in shlex.split(args_template)]
        try:
            proc = subprocess.run([str(tool_path)] + args, capture_output=True, text=True,
                                  timeout=timeout, cwd=tmp)
        except (OSError, subprocess.SubprocessError) as exc:
            return PesqResult(None, f"PESQ tool failed to run: {exc}")
    if proc.returncode != 0:
        return PesqResult(None, f"PESQ tool exit code {proc.returncode}: {proc.stderr.strip()[:500]}")
    score = parse_pesq_output(proc.stdout)
    if score is None:
        return PesqResult(None, f"could not parse MOS-LQO from output: {proc.stdout.strip()[:500]}")
    return PesqResult(score, "")
