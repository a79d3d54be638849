"""Frequency-domain adaptive Kalman filter echo canceller with a residual echo
suppression postfilter.

The state is a per-bin echo path with diagonal (per-bin) error covariance.
Blocks use overlap-save with an FFT of twice the filter length, so a
``block_length``-tap echo path is modelled exactly; each step consumes
``block_shift`` new samples.
"""

from dataclasses import dataclass

import numpy as np

from .signals import SpectralSequence, padded_istft, padded_stft


@dataclass(frozen=True)
class KalmanConfig:
    block_length: int = 512  # filter taps
    block_shift: int = 256
    A: float = 0.999
    psi_smoothing: float = 0.98
    floor: float = 1e-10
    p_init: float = 1.0
    overestimation: float = 2.0
    gain_floor: float = 0.1
    psd_smoothing: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.A < 1.0:
            raise ValueError("transition coefficient A must lie in (0, 1)")
        if self.floor <= 0 or self.gain_floor <= 0:
            raise ValueError("floors must be positive")
        if self.block_shift > self.block_length:
            raise ValueError("block_shift must not exceed block_length")


class KalmanState:
    def __init__(self, cfg):
        L = 2 * cfg.block_length
        bins = L // 2 + 1
        self.W = np.zeros(bins, dtype=complex)
        self.P = np.full(bins, cfg.p_init)
        self.psi = np.zeros(bins)
        self.xbuf = np.zeros(L)


class FDKF:
    """Streaming filter; call :meth:`process_block` with ``block_shift`` samples at a time."""

    def __init__(self, cfg=None):
        self.cfg = cfg or KalmanConfig()
        self.state = KalmanState(self.cfg)

    def process_block(self, x_blk, y_blk):
        cfg, st = self.cfg, self.state
        R, taps = cfg.block_shift, cfg.block_length
        L = 2 * taps
        st.xbuf = np.concatenate([st.xbuf[R:], x_blk])
        X = np.fft.rfft(st.xbuf)
        X2 = np.abs(X) ** 2

        # predict
        st.W = cfg.A * st.W
        st.P = cfg.A ** 2 * st.P + (1.0 - cfg.A ** 2) * np.abs(st.W) ** 2

        d_hat = np.fft.irfft(st.W * X, n=L)[-R:]
        e = y_blk - d_hat
        E = np.fft.rfft(np.concatenate([np.zeros(L - R), e]))

        st.psi = cfg.psi_smoothing * st.psi + (1.0 - cfg.psi_smoothing) * np.abs(E) ** 2
        # E holds R of L samples; bring the observation noise to the scale of |X|^2 P
        psi = st.psi * (L / R)
        K = st.P * X2 / (X2 * st.P + psi + cfg.floor)

        dW = K * np.conj(X) * E / (X2 + cfg.floor)
        w = np.fft.irfft(dW, n=L)
        w[taps:] = 0.0  # gradient constraint: keep a causal block_length-tap path
        st.W = st.W + np.fft.rfft(w)
        st.P = (1.0 - K) * st.P
        return e, d_hat


def kalman_process(x, y, cfg=None):
    """Run the adaptive filter over whole signals; returns (e, d_hat)."""
    cfg = cfg or KalmanConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("far-end and microphone signals must be 1-D with equal length")
    R = cfg.block_shift
    n_blocks = -(-len(x) // R)
    xp = np.zeros(n_blocks * R)
    yp = np.zeros(n_blocks * R)
    xp[:len(x)] = x
    yp[:len(y)] = y
    e = np.empty_like(yp)
    d_hat = np.empty_like(yp)
    filt = FDKF(cfg)
    for b in range(n_blocks):
        sl = slice(b * R, (b + 1) * R)
        e[sl], d_hat[sl] = filt.process_block(xp[sl], yp[sl])
    return e[:len(x)], d_hat[:len(x)]


def _smooth(p, alpha):
    out = np.empty_like(p)
    acc = np.zeros(p.shape[1])
    for ell in range(p.shape[0]):
        acc = alpha * acc + (1.0 - alpha) * p[ell]
        out[ell] = acc
    return out


def res_gains(e_frames, d_hat_frames, cfg=None):
    """Per-bin Wiener-style suppression gains in [gain_floor, 1]."""
    cfg = cfg or KalmanConfig()
    if e_frames.frames.shape != d_hat_frames.frames.shape:
        raise ValueError("error and echo-estimate spectra must be aligned")
    phi_e = _smooth(np.abs(e_frames.frames) ** 2, cfg.psd_smoothing)
    phi_res = cfg.overestimation * _smooth(np.abs(d_hat_frames.frames) ** 2, cfg.psd_smoothing)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(phi_e > 0, (phi_e - phi_res) / phi_e, 1.0)
    g = np.where(phi_res > 0, g, 1.0)
    return np.clip(g, cfg.gain_floor, 1.0)


def res_postfilter(e_frames, d_hat_frames, cfg=None):
    g = res_gains(e_frames, d_hat_frames, cfg)
    return SpectralSequence(g * e_frames.frames, e_frames.frame_length, e_frames.frame_shift)


def kalman_aec(x, y, cfg=None, postfilter=True, frame_length=512):
    """Kalman AEC followed (optionally) by the postfilter; returns (e, d_hat).

    The postfilter correction is added as ``e + istft((G - 1) E)`` so that a
    unit gain leaves the linear-stage output untouched sample for sample.
    """
    cfg = cfg or KalmanConfig()
    e, d_hat = kalman_process(x, y, cfg)
    if not postfilter:
        return e, d_hat
    E = padded_stft(e, frame_length, frame_length // 2)
    D = padded_stft(d_hat, frame_length, frame_length // 2)
    g = res_gains(E, D, cfg)
    if np.all(g == 1.0):
        return e, d_hat
    corr = padded_istft(E.with_frames((g - 1.0) * E.frames), len(e))
    return e + corr, d_hat
