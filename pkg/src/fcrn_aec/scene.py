"""Echo-scene simulation: image-method room impulse responses, loudspeaker
nonlinearity, SER/SNR-controlled mixing, synthetic sources and dataset manifests.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from .profiles import SAMPLE_RATE, get_profile

SOUND_SPEED = 343.0
IR_LENGTH = 512
WALL_MARGIN = 0.5
MAX_T60 = 2.0  # beyond this the response is nowhere near decayed within 512 taps
PAPER_T60S = (0.2, 0.3, 0.4)
PAPER_SERS = (-6.0, -3.0, 0.0, 3.0, 6.0, math.inf)
PAPER_SNRS = (8.0, 10.0, 12.0, 14.0, math.inf)
TEST_SER, TEST_SNR, TEST_T60 = 0.0, 10.0, 0.2
TRAIN_NOISES = ("pink", "brown", "factory")
TEST_NOISES = ("babble", "white", "opsroom")


class SceneError(ValueError):
    pass


# -- rooms ---------------------------------------------------------------------

@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple
    source_pos: tuple
    mic_pos: tuple
    t60: float
    seed: int = 0

    def validate(self):
        dims = np.asarray(self.dimensions, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 2 * WALL_MARGIN):
            raise SceneError(f"room dimensions must be three lengths > {2 * WALL_MARGIN} m")
        for label, pos in (("source", self.source_pos), ("mic", self.mic_pos)):
            p = np.asarray(pos, dtype=float)
            if p.shape != (3,) or np.any(p < WALL_MARGIN) or np.any(p > dims - WALL_MARGIN):
                raise SceneError(f"{label} position {tuple(p)} closer than {WALL_MARGIN} m to a wall")
        if not 0 < self.t60 <= MAX_T60:
            raise SceneError(f"t60 must lie in (0, {MAX_T60}] s, got {self.t60}")


def random_room(seed, t60, max_distance=3.0):
    """Room uniform in [3,8]x[3,8]x[2.5,3.5] m; source/mic uniform with a 0.5 m wall margin.

    Positions are redrawn until the source-mic distance is at most ``max_distance``
    so the direct path lands well inside the 512-tap response.
    """
    rng = np.random.default_rng(seed)
    dims = rng.uniform([3.0, 3.0, 2.5], [8.0, 8.0, 3.5])
    while True:
        src = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
        mic = rng.uniform(WALL_MARGIN, dims - WALL_MARGIN)
        if np.linalg.norm(src - mic) <= max_distance:
            break
    return RoomSpec(tuple(np.round(dims, 4)), tuple(np.round(src, 4)), tuple(np.round(mic, 4)),
                    float(t60), int(seed))


def eyring_reflection(dimensions, t60, c=SOUND_SPEED):
    """Wall pressure reflection coefficient giving ``t60`` under Eyring's formula."""
    L = np.asarray(dimensions, dtype=float)
    volume = L.prod()
    surface = 2.0 * (L[0] * L[1] + L[0] * L[2] + L[1] * L[2])
    # Eyring: T60 = 24 ln10 V / (-c S ln(1 - alpha)),  beta = sqrt(1 - alpha)
    log_energy = -24.0 * math.log(10.0) * volume / (c * surface * t60)
    beta = math.exp(0.5 * log_energy)
    if not 0.0 <= beta < 1.0 - 1e-9:
        raise SceneError(f"t60={t60} s incompatible with room {tuple(L)}: reflection coefficient {beta:.3f}")
    return beta


def schroeder_t60(h, fs=SAMPLE_RATE, start_db=-5.0, stop_db=-25.0):
    """Decay time from a line fit to the backward-integrated energy curve (T20 by default)."""
    energy = np.cumsum(np.asarray(h, dtype=float)[::-1] ** 2)[::-1]
    edc = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-300))
    i0 = int(np.argmax(edc <= start_db))
    i1 = int(np.argmax(edc <= stop_db))
    if i1 <= i0 + 1:
        raise SceneError("impulse response too short to measure the decay")
    slope = np.polyfit(np.arange(i0, i1) / fs, edc[i0:i1], 1)[0]
    return -60.0 / slope


def reflection_coefficient(room, fs=SAMPLE_RATE, c=SOUND_SPEED, iterations=4):
    """Wall reflection coefficient whose image-method decay matches ``room.t60``.

    Eyring's value is the starting point. A shoebox image model is not a
    diffuse field and decays slower than Eyring predicts, so the exponent is
    refined against the simulated T20.
    """
    beta = eyring_reflection(room.dimensions, room.t60, c)
    length = int(1.2 * room.t60 * fs)
    for _ in range(iterations):
        measured = schroeder_t60(_image_method(room, beta, length, fs, c), fs)
        # decay rate scales with -ln(beta)
        beta = beta ** (measured / room.t60)
    return beta


def simulate_rir(room, length=IR_LENGTH, fs=SAMPLE_RATE, c=SOUND_SPEED):
    """Image-method impulse response, peak-normalized to 1, ``length`` taps."""
    room.validate()
    beta = reflection_coefficient(room, fs, c)
    taps = _image_method(room, beta, length, fs, c)
    return taps / np.max(np.abs(taps))


def _image_method(room, beta, length, fs, c):
    L = np.asarray(room.dimensions, dtype=float)
    src = np.asarray(room.source_pos, dtype=float)
    mic = np.asarray(room.mic_pos, dtype=float)
    max_dist = length / fs * c
    taps = np.zeros(length)
    orders = [np.arange(-int(np.ceil(max_dist / (2 * L[a]))) - 1,
                        int(np.ceil(max_dist / (2 * L[a]))) + 2) for a in range(3)]
    for q in np.ndindex(2, 2, 2):
        q = np.array(q)
        # per-axis image coordinate offsets and reflection counts
        axes = []
        for a in range(3):
            n = orders[a]
            coord = (1 - 2 * q[a]) * src[a] + 2 * n * L[a] - mic[a]
            refl = np.abs(n - q[a]) + np.abs(n)
            axes.append((coord, refl))
        dx, dy, dz = np.meshgrid(axes[0][0], axes[1][0], axes[2][0], indexing="ij")
        rx, ry, rz = np.meshgrid(axes[0][1], axes[1][1], axes[2][1], indexing="ij")
        dist = np.sqrt(dx * dx + dy * dy + dz * dz).ravel()
        n_refl = (rx + ry + rz).ravel()
        idx = np.rint(dist / c * fs).astype(int)
        keep = idx < length
        amp = beta ** n_refl[keep] / np.maximum(dist[keep], 1e-3)
        taps += np.bincount(idx[keep], weights=amp, minlength=length)
    return taps


def direct_path_tap(room, fs=SAMPLE_RATE, c=SOUND_SPEED):
    d = np.linalg.norm(np.asarray(room.source_pos) - np.asarray(room.mic_pos))
    return int(round(d / c * fs))


# -- echo path -------------------------------------------------------------------

def hard_clip(x):
    x = np.asarray(x, dtype=float)
    x_max = 0.8 * np.max(np.abs(x)) if x.size else 0.0
    return np.clip(x, -x_max, x_max)


def sigmoid_distortion(x_hard):
    b = 1.5 * x_hard - 0.3 * x_hard ** 2
    a = np.where(b > 0, 4.0, 0.5)
    return 4.0 * (2.0 / (1.0 + np.exp(-a * b)) - 1.0)


def loudspeaker_nonlinearity(x):
    """Hard clip at 80% of the peak, then the memoryless sigmoidal loudspeaker model."""
    return sigmoid_distortion(hard_clip(x))


def render_echo(x_nl, ir):
    ir = np.asarray(ir, dtype=float)
    if ir.shape != (IR_LENGTH,):
        raise SceneError(f"impulse response must have {IR_LENGTH} taps, got {ir.shape}")
    x_nl = np.asarray(x_nl, dtype=float)
    return lfilter(ir, [1.0], x_nl)


# -- mixing ----------------------------------------------------------------------

def power(x):
    x = np.asarray(x, dtype=float)
    return float(np.mean(x * x)) if x.size else 0.0


def ratio_db(p_num, p_den):
    if p_den == 0.0:
        return math.inf
    if p_num == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_num / p_den)


@dataclass
class Mixture:
    x: np.ndarray
    s: np.ndarray
    n: np.ndarray
    d: np.ndarray
    y: np.ndarray
    realized_ser_db: float
    realized_snr_db: float

    def scaled(self, gain):
        """All components scaled by a common gain (ratios unchanged)."""
        s, n, d = self.s * gain, self.n * gain, self.d * gain
        return Mixture(self.x, s, n, d, s + n + d, self.realized_ser_db, self.realized_snr_db)


def _scale_to(s_power, comp, target_db, label):
    comp = np.asarray(comp, dtype=float)
    if math.isinf(target_db) and target_db > 0:
        return np.zeros_like(comp)
    p = power(comp)
    if p == 0.0:
        raise SceneError(f"{label} has zero power but a finite target ratio was requested")
    return comp * math.sqrt(s_power / (p * 10.0 ** (target_db / 10.0)))


def mix(s, n, d, ser_db, snr_db, x=None):
    """Scale echo and noise against the unscaled near-end speech and sum them."""
    s, n, d = (np.asarray(v, dtype=float) for v in (s, n, d))
    if not (s.shape == n.shape == d.shape):
        raise SceneError("s, n and d must have equal lengths")
    p_s = power(s)
    finite = [not math.isinf(r) for r in (ser_db, snr_db)]
    if any(finite) and p_s == 0.0:
        raise SceneError("near-end speech has zero power; ratios are undefined")
    d = _scale_to(p_s, d, ser_db, "echo")
    n = _scale_to(p_s, n, snr_db, "noise")
    y = s + n + d
    return Mixture(x if x is not None else np.zeros_like(s), s, n, d, y,
                   ratio_db(p_s, power(d)), ratio_db(p_s, power(n)))


# -- synthetic sources -------------------------------------------------------------

_VOWELS = np.array([  # F1..F4 in Hz
    [730, 1090, 2440, 3400], [270, 2290, 3010, 3700], [530, 1840, 2480, 3500],
    [660, 1720, 2410, 3300], [570, 840, 2410, 3300], [440, 1020, 2240, 3200],
    [300, 870, 2240, 3300], [640, 1190, 2390, 3400], [490, 1350, 1690, 3100],
])


def _allpole(formants, bandwidths, fs=SAMPLE_RATE):
    a = np.array([1.0])
    for f, bw in zip(formants, bandwidths):
        r = math.exp(-math.pi * bw / fs)
        a = np.convolve(a, [1.0, -2.0 * r * math.cos(2 * math.pi * f / fs), r * r])
    return a


def synth_speech(duration, seed, fs=SAMPLE_RATE):
    """Seeded speech-like signal: order-8 all-pole filtered voiced pulse trains and
    noise bursts with silence gaps, peak-normalized to 0.5."""
    if not duration > 0:
        raise SceneError("duration must be positive")
    rng = np.random.default_rng([seed, 0x5EEC])
    n_total = int(round(duration * fs))
    out = np.zeros(n_total)
    base_f0 = rng.uniform(90.0, 220.0)
    vtl = rng.uniform(0.85, 1.15)  # formant scaling per "speaker"
    pos = 0
    while pos < n_total:
        kind = rng.choice(3, p=[0.2, 0.6, 0.2])
        if kind == 0:
            pos += int(rng.uniform(0.05, 0.25) * fs)
            continue
        if kind == 1:
            length = int(rng.uniform(0.08, 0.25) * fs)
            f0 = base_f0 * rng.uniform(0.85, 1.2) * np.linspace(1.0, rng.uniform(0.85, 1.1), length)
            phase = np.cumsum(f0 / fs)
            exc = np.diff(np.floor(phase), prepend=0.0)
            exc = lfilter([1.0], [1.0, -1.2, 0.36], exc)  # glottal pulse shaping
            formants = _VOWELS[rng.integers(len(_VOWELS))] * vtl
            bws = rng.uniform(60.0, 140.0, 4)
            gain = 1.0
        else:
            length = int(rng.uniform(0.04, 0.12) * fs)
            exc = rng.standard_normal(length)
            formants = np.sort(rng.uniform([500, 1500, 2500, 3500], [1500, 2500, 3500, 5000]))
            bws = rng.uniform(200.0, 600.0, 4)
            gain = 0.15
        length = min(length, n_total - pos)
        seg = lfilter([1.0], _allpole(formants, bws), exc[:length])
        seg /= np.max(np.abs(seg)) + 1e-12
        env = np.sin(np.linspace(0.0, np.pi, length)) ** 0.5
        out[pos:pos + length] += gain * rng.uniform(0.5, 1.0) * env * seg
        pos += length
    out = lfilter([1.0], [1.0, -0.3], out)  # spectral tilt
    peak = np.max(np.abs(out))
    return out * (0.5 / peak) if peak > 0 else out


def synth_noise(duration, seed, kind="pink", fs=SAMPLE_RATE):
    """Seeded stationary-ish noise of a few coloured types, peak-normalized to 0.5."""
    rng = np.random.default_rng([seed, 0x0015E])
    n = int(round(duration * fs))
    w = rng.standard_normal(n)
    if kind == "white":
        out = w
    elif kind == "pink":
        # Kellet-style approximation of a -3 dB/oct slope
        out = lfilter([0.049922035, -0.095993537, 0.050612699, -0.004408786],
                      [1.0, -2.494956002, 2.017265875, -0.522189400], w)
    elif kind == "brown":
        out = lfilter([1.0], [1.0, -0.995], w)
    elif kind == "factory":
        t = np.arange(n) / fs
        out = lfilter([1.0], [1.0, -0.9], w) * (1.0 + 0.5 * np.sin(2 * np.pi * 3.0 * t))
        out += 0.3 * np.sign(np.sin(2 * np.pi * rng.uniform(80, 200) * t))
    elif kind == "babble":
        out = sum(synth_speech(duration, int(s)) for s in rng.integers(0, 2**31, 6))
    elif kind == "opsroom":
        t = np.arange(n) / fs
        out = lfilter([1.0], [1.0, -0.97], w) + 2.0 * np.sin(2 * np.pi * 50.0 * t) \
            + np.sin(2 * np.pi * 150.0 * t)
    else:
        raise SceneError(f"unknown noise kind {kind!r}")
    out = out - np.mean(out)
    return out * (0.5 / np.max(np.abs(out)))


# -- manifests -------------------------------------------------------------------

@dataclass
class ManifestConfig:
    profile: str = "desk"
    train: int | None = None
    val: int | None = None
    test: int | None = None
    seed: int = 0
    duration: float | None = None
    nonlinear: bool = True
    speakers: int = 40  # synthetic voices shared by train/val
    test_speakers: int = 10  # disjoint voices for test
    speech_files: list = field(default_factory=list)  # optional user WAVs (train/val pool)
    test_speech_files: list = field(default_factory=list)  # optional user WAVs (test pool)
    noise_files: list = field(default_factory=list)
    test_noise_files: list = field(default_factory=list)
    ser_choices: tuple = PAPER_SERS
    snr_choices: tuple = PAPER_SNRS
    t60_choices: tuple = PAPER_T60S

    def counts(self):
        p = get_profile(self.profile)
        return {"train": p.train_count if self.train is None else self.train,
                "val": p.val_count if self.val is None else self.val,
                "test": p.test_count if self.test is None else self.test}

    def file_duration(self):
        return get_profile(self.profile).duration if self.duration is None else self.duration


def _db_json(v):
    return "inf" if math.isinf(v) else float(v)


def _db_parse(v):
    return math.inf if v == "inf" else float(v)


def build_manifest(cfg):
    """Deterministic list of mixture records for the train, val and test splits.

    Test records draw near-end/far-end voices, rooms and noise seeds from pools
    disjoint from the train/val pools.
    """
    counts = cfg.counts()
    if any(c < 0 for c in counts.values()) or sum(counts.values()) == 0:
        raise SceneError("split counts must be non-negative and not all zero")
    use_files = bool(cfg.speech_files or cfg.test_speech_files)
    if use_files:
        if counts["test"] and len(cfg.test_speech_files) < 2:
            raise SceneError("test speech pool needs at least two files (near-end and far-end)")
        if (counts["train"] or counts["val"]) and len(cfg.speech_files) < 2:
            raise SceneError("train/val speech pool needs at least two files")
        overlap = set(map(str, cfg.speech_files)) & set(map(str, cfg.test_speech_files))
        if overlap:
            raise SceneError(f"speech pools overlap: {sorted(overlap)[:3]}")
    else:
        if counts["test"] and cfg.test_speakers < 2:
            raise SceneError("test pool needs at least two synthetic speakers")
        if (counts["train"] or counts["val"]) and cfg.speakers < 2:
            raise SceneError("train/val pool needs at least two synthetic speakers")
    if set(map(str, cfg.noise_files)) & set(map(str, cfg.test_noise_files)):
        raise SceneError("noise pools overlap")

    rng = np.random.default_rng([cfg.seed, 0xA1EC])
    duration = cfg.file_duration()
    records = []
    for split in ("train", "val", "test"):
        is_test = split == "test"
        for k in range(counts[split]):
            rec = {"id": f"{split}-{k:05d}", "split": split, "duration": duration,
                   "nonlinear": cfg.nonlinear}
            seeds = rng.integers(0, 2**31 - 1, size=6)
            # near-end and far-end must be different talkers
            if use_files:
                pool = cfg.test_speech_files if is_test else cfg.speech_files
                a, b = rng.choice(len(pool), 2, replace=False)
                rec["near_source"] = str(pool[a])
                rec["far_source"] = str(pool[b])
            else:
                lo, size = (cfg.speakers, cfg.test_speakers) if is_test else (0, cfg.speakers)
                a, b = rng.choice(size, 2, replace=False)
                rec["near_speaker"] = int(lo + a)
                rec["far_speaker"] = int(lo + b)
            rec["near_seed"] = int(seeds[0])
            rec["far_seed"] = int(seeds[1])
            # test rooms and noise seeds come from a separate seed stream
            stream = 1 if is_test else 0
            rec["ir_seed"] = int(seeds[2]) * 2 + stream
            rec["noise_seed"] = int(seeds[3]) * 2 + stream
            noise_pool = cfg.test_noise_files if is_test else cfg.noise_files
            if noise_pool:
                rec["noise_source"] = str(noise_pool[rng.integers(len(noise_pool))])
            else:
                kinds = TEST_NOISES if is_test else TRAIN_NOISES
                rec["noise_kind"] = kinds[rng.integers(len(kinds))]
            if is_test:
                ser, snr, t60 = TEST_SER, TEST_SNR, TEST_T60
            else:
                ser = cfg.ser_choices[rng.integers(len(cfg.ser_choices))]
                snr = cfg.snr_choices[rng.integers(len(cfg.snr_choices))]
                t60 = cfg.t60_choices[rng.integers(len(cfg.t60_choices))]
            rec["ser_db"] = _db_json(ser)
            rec["snr_db"] = _db_json(snr)
            rec["t60"] = float(t60)
            records.append(rec)
    return records


def write_manifest(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def speaker_seed(speaker, utterance_seed):
    # voice identity comes from the speaker id, the utterance from the record seed
    return int(np.random.default_rng([speaker, utterance_seed]).integers(0, 2**31 - 1))


def _load_source(path, n):
    from .signals import read_wav
    x = read_wav(path)
    if len(x) >= n:
        return x[:n]
    reps = -(-n // max(len(x), 1))
    return np.tile(x, reps)[:n]


def render_mixture(rec):
    """Render one manifest record into a :class:`Mixture` (pure function of the record)."""
    n = int(round(rec["duration"] * SAMPLE_RATE))
    if "near_source" in rec:
        s = _load_source(rec["near_source"], n)
        x = _load_source(rec["far_source"], n)
    else:
        s = synth_speech(rec["duration"], speaker_seed(rec["near_speaker"], rec["near_seed"]))
        x = synth_speech(rec["duration"], speaker_seed(rec["far_speaker"], rec["far_seed"]))
    if "noise_source" in rec:
        noise = _load_source(rec["noise_source"], n)
    else:
        noise = synth_noise(rec["duration"], rec["noise_seed"], rec["noise_kind"])
    room = random_room(rec["ir_seed"], rec["t60"])
    ir = simulate_rir(room)
    x_nl = loudspeaker_nonlinearity(x) if rec.get("nonlinear", True) else x
    d = render_echo(x_nl, ir)
    return mix(s, noise, d, _db_parse(rec["ser_db"]), _db_parse(rec["snr_db"]), x=x)


def record_ratios(rec):
    return _db_parse(rec["ser_db"]), _db_parse(rec["snr_db"])


def room_dict(room):
    return asdict(room)
