import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fcrn_aec.signals import (SpectralSequence, WavFormatError, frame_energy, istft, pack,
                              padded_istft, padded_stft, read_wav, sqrt_hann, stft, unpack,
                              write_wav)


def test_frame_count():
    assert len(stft(np.zeros(16000))) == 61


def test_too_short():
    with pytest.raises(ValueError, match="signal too short"):
        stft(np.zeros(511))


def test_zero_signal_gives_zero_frames():
    spec = stft(np.zeros(2048))
    assert spec.frames.shape == (7, 257)
    assert not np.any(spec.frames)


def test_bin_centred_sinusoid_matches_direct_dft():
    k0 = 37
    n = np.arange(4096)
    x = np.cos(2 * np.pi * k0 * n / 512)
    spec = stft(x)
    mags = np.abs(spec.frames[3])
    assert np.argmax(mags) == k0
    # direct DFT of the windowed frame, written out as a sum
    frame = x[3 * 256:3 * 256 + 512] * sqrt_hann(512)
    kk = np.arange(257)[:, None]
    direct = (frame[None, :] * np.exp(-2j * np.pi * kk * np.arange(512)[None, :] / 512)).sum(axis=1)
    np.testing.assert_allclose(spec.frames[3], direct, atol=1e-9)


def test_round_trip_interior():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(16000 * 3)
    y = istft(stft(x))
    assert np.max(np.abs(y[256:len(y) - 256] - x[256:len(y) - 256])) < 1e-6


def test_istft_zero_and_locality():
    spec = stft(np.zeros(4096))
    assert not np.any(istft(spec))
    frames = np.zeros_like(spec.frames)
    frames[5] = np.random.default_rng(1).standard_normal(257)
    out = istft(spec.with_frames(frames))
    support = np.flatnonzero(out)
    assert support.min() >= 5 * 256 and support.max() < 5 * 256 + 512


def test_padded_round_trip_is_exact_everywhere():
    x = np.random.default_rng(2).standard_normal(5000)
    y = padded_istft(padded_stft(x), len(x))
    assert y.shape == x.shape
    assert np.max(np.abs(y - x)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.integers(512, 3000),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)))
def test_reconstruction_property(x):
    y = istft(stft(x))
    inner = slice(256, len(y) - 256)
    assert np.max(np.abs(y[inner] - x[inner]), initial=0.0) < 1e-6 * max(1.0, np.max(np.abs(x)))


def test_parseval():
    x = np.random.default_rng(3).standard_normal(3000)
    spec = stft(x)
    windowed = np.stack([x[i * 256:i * 256 + 512] * sqrt_hann(512) for i in range(len(spec))])
    np.testing.assert_allclose(frame_energy(spec), (windowed ** 2).sum(axis=1), rtol=1e-9)


def test_pack_shape_and_padding():
    spec = stft(np.random.default_rng(4).standard_normal(16000))
    f = pack(spec)
    assert f.shape == (260, 61, 2)
    assert not np.any(f[257:])


def test_pack_unpack_inverse():
    spec = stft(np.random.default_rng(5).standard_normal(4000))
    back = unpack(pack(spec))
    assert np.array_equal(back.frames, spec.frames)


def test_dc_frame_has_no_imaginary_channel():
    frames = np.zeros((1, 257), dtype=complex)
    frames[0, 0] = 3.0
    f = pack(SpectralSequence(frames))
    assert not np.any(f[:, :, 1])


def test_unpack_discards_padding_and_single_frame():
    f = np.random.default_rng(6).standard_normal((260, 1, 2))
    spec = unpack(f)
    assert spec.frames.shape == (1, 257)
    g = f.copy()
    g[257:] = 99.0
    assert np.array_equal(unpack(g).frames, spec.frames)


def test_pack_errors():
    with pytest.raises(ValueError):
        SpectralSequence(np.zeros((3, 200)))
    with pytest.raises(ValueError):
        unpack(np.zeros((260, 3, 3)))


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(7).uniform(-0.9, 0.9, 1600)
    write_wav(tmp_path / "a.wav", x)
    y = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(y - x)) <= 0.5 / 32768 + 1e-12


def test_wav_rejects_other_formats(tmp_path):
    import wave
    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(b"\0" * 400)
    with pytest.raises(WavFormatError, match="mono"):
        read_wav(path)
    path = tmp_path / "8k.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(b"\0" * 400)
    with pytest.raises(WavFormatError, match="16000"):
        read_wav(path)
