"""FCRN echo canceller: encoder / ConvLSTM bottleneck / decoder in all fusion, skip and target variants.

Layer layout per encoder branch (feature height M, F filters, kernels N x 1)::

    c1  Conv(F)  -> c2  Conv(F)   [anchor e2, M rows]   -> MaxPool
    c3  Conv(2F) -> c4  Conv(2F)  [anchor e4, M/2 rows] -> MaxPool
    ConvLSTM(F) at M/4 rows
    Upsample -> d1 Conv(2F) -> d2 Conv(2F) -> Upsample -> d3 Conv(F) -> d4 Conv(F) -> out Conv(C), linear

Skip anchors (an interpretation of the figure's marker placement; merge is
channel concatenation):

    SkipB (outer): e2 -> after d4 (input of the output conv); e4 -> after d2 (before the second upsample)
    SkipA (inner, symmetric around the pools): e4 -> after the first upsample; e2 -> after the second upsample

For MidF and LateF the anchors are taken from the microphone path.
"""

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .profiles import DESK, PAPER
from .signals import pack, padded_istft, padded_stft, unpack

FUSIONS = ("EarlyF", "MidF", "LateF")
SKIPS = ("SkipA", "SkipB", "NoSkips")
TARGETS = ("OutE_clean", "OutE_noisy", "OutD")
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    fusion: str = "LateF"
    skip: str = "SkipA"
    target: str = "OutD"
    F: int = 88
    N: int = 24
    M: int = 260
    C: int = 2
    frame_length: int = 512

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.skip not in SKIPS:
            raise ValueError(f"skip must be one of {SKIPS}, got {self.skip!r}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.M % 4:
            raise ValueError(f"M must be divisible by 4, got {self.M}")
        if min(self.F, self.N, self.C) < 1:
            raise ValueError("F, N and C must be positive")
        if self.M < self.frame_length // 2 + 1:
            raise ValueError("M must cover all frequency bins")

    @property
    def variant(self):
        return f"{self.fusion}/{self.skip}/{self.target}"

    @classmethod
    def from_variant(cls, variant, profile=PAPER):
        try:
            fusion, skip, target = variant.split("/")
        except ValueError:
            raise ValueError(f"variant must look like <fusion>/<skip>/<target>, got {variant!r}") from None
        return cls(fusion, skip, target, F=profile.F, N=profile.N, M=profile.M,
                   frame_length=profile.frame_length)


def paper_config(fusion="LateF", skip="SkipA", target="OutD"):
    return ModelConfig(fusion, skip, target, F=PAPER.F, N=PAPER.N, M=PAPER.M,
                       frame_length=PAPER.frame_length)


def desk_config(fusion="LateF", skip="SkipA", target="OutD"):
    return ModelConfig(fusion, skip, target, F=DESK.F, N=DESK.N, M=DESK.M,
                       frame_length=DESK.frame_length)


def layer_plan(cfg):
    """(name, Cin, Cout) for every conv layer, in build order. The ConvLSTM appears as 'lstm'."""
    F, C = cfg.F, cfg.C
    plan = []
    if cfg.fusion == "EarlyF":
        plan += [("enc.c1", 2 * C, F), ("enc.c2", F, F), ("enc.c3", F, 2 * F), ("enc.c4", 2 * F, 2 * F)]
        lstm_in = 2 * F
    elif cfg.fusion == "MidF":
        for b in ("mic", "ref"):
            plan += [(f"{b}.c1", C, F), (f"{b}.c2", F, F)]
        plan += [("enc.c3", 2 * F, 2 * F), ("enc.c4", 2 * F, 2 * F)]
        lstm_in = 2 * F
    else:
        for b in ("mic", "ref"):
            plan += [(f"{b}.c1", C, F), (f"{b}.c2", F, F), (f"{b}.c3", F, 2 * F), (f"{b}.c4", 2 * F, 2 * F)]
        lstm_in = 4 * F
    plan.append(("lstm", lstm_in + F, 4 * F))

    e2, e4 = F, 2 * F
    d1_in = F + (e4 if cfg.skip == "SkipA" else 0)
    d3_in = 2 * F + (e4 if cfg.skip == "SkipB" else 0) + (e2 if cfg.skip == "SkipA" else 0)
    out_in = F + (e2 if cfg.skip == "SkipB" else 0)
    plan += [("dec.d1", d1_in, 2 * F), ("dec.d2", 2 * F, 2 * F),
             ("dec.d3", d3_in, F), ("dec.d4", F, F), ("dec.out", out_in, C)]
    return plan


def param_shapes(cfg):
    shapes = {}
    for name, cin, cout in layer_plan(cfg):
        shapes[f"{name}.w"] = (cfg.N, cin, cout)
        shapes[f"{name}.b"] = (cout,)
    return shapes


def count_params(cfg):
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


@dataclass
class ModelState:
    """ConvLSTM hidden and cell maps, shape (..., M/4, F)."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, cfg, batch=()):
        shape = tuple(batch) + (cfg.M // 4, cfg.F)
        return cls(np.zeros(shape), np.zeros(shape))


class Model:
    def __init__(self, cfg, params):
        self.config = cfg
        self.params = params

    @classmethod
    def build(cls, cfg, seed=0):
        rng = np.random.default_rng(seed)
        params = ad.ParamSet()
        for name, shape in param_shapes(cfg).items():
            if name.endswith(".w"):
                N, cin, cout = shape
                params.add(name, ad.glorot_uniform(rng, shape, N * cin, N * cout))
            else:
                params.add(name, np.zeros(shape))
        return cls(cfg, params)

    def count_params(self):
        return self.params.count()

    # -- graph ---------------------------------------------------------------

    def _conv(self, name, x, act=True):
        y = ad.conv_freq(x, self.params[f"{name}.w"], self.params[f"{name}.b"])
        return ad.leaky_relu(y, LEAKY_SLOPE) if act else y

    def _encoder_front(self, prefix, x):
        e2 = self._conv(f"{prefix}.c2", self._conv(f"{prefix}.c1", x))
        return e2, ad.maxpool_freq(e2)

    def _encoder_back(self, prefix, x):
        e4 = self._conv(f"{prefix}.c4", self._conv(f"{prefix}.c3", x))
        return e4, ad.maxpool_freq(e4)

    def _encode(self, mic, ref):
        """Returns (bottleneck input, e2, e4) with anchors from the microphone path."""
        fusion = self.config.fusion
        if fusion == "EarlyF":
            e2, p = self._encoder_front("enc", ad.concat_channels(mic, ref))
            e4, z = self._encoder_back("enc", p)
        elif fusion == "MidF":
            e2, pm = self._encoder_front("mic", mic)
            _, pr = self._encoder_front("ref", ref)
            e4, z = self._encoder_back("enc", ad.concat_channels(pm, pr))
        else:
            e2, pm = self._encoder_front("mic", mic)
            e4, zm = self._encoder_back("mic", pm)
            _, pr = self._encoder_front("ref", ref)
            _, zr = self._encoder_back("ref", pr)
            z = ad.concat_channels(zm, zr)
        return z, e2, e4

    def _decode(self, h, e2, e4):
        skip = self.config.skip
        u = ad.upsample_freq(h)
        if skip == "SkipA":
            u = ad.concat_channels(u, e4)
        u = self._conv("dec.d2", self._conv("dec.d1", u))
        if skip == "SkipB":
            u = ad.concat_channels(u, e4)
        u = ad.upsample_freq(u)
        if skip == "SkipA":
            u = ad.concat_channels(u, e2)
        u = self._conv("dec.d4", self._conv("dec.d3", u))
        if skip == "SkipB":
            u = ad.concat_channels(u, e2)
        return self._conv("dec.out", u, act=False)

    def graph(self, mic, ref, state=None):
        """Differentiable forward over tensors laid out (..., T, M, C).

        Returns (output tensor, final (h, c) tensors). The recurrence runs over
        axis -3; every other layer is frame-wise.
        """
        mic, ref = ad.constant(mic), ad.constant(ref)
        if mic.shape != ref.shape:
            raise ValueError(f"mic/ref shape mismatch: {mic.shape} vs {ref.shape}")
        if mic.shape[-2:] != (self.config.M, self.config.C):
            raise ValueError(f"expected frames of shape ({self.config.M}, {self.config.C}), got {mic.shape[-2:]}")
        lead, T = mic.shape[:-3], mic.shape[-3]
        if state is None:
            state = ModelState.zeros(self.config, lead)
        if state.h.shape != tuple(lead) + (self.config.M // 4, self.config.F):
            raise ValueError(f"state shape {state.h.shape} does not match the input batch")
        z, e2, e4 = self._encode(mic, ref)
        h, c = ad.constant(state.h), ad.constant(state.c)
        axis = len(lead)
        hs = []
        for t in range(T):
            h, c = ad.conv_lstm_step(ad.take(z, t, axis), h, c,
                                     self.params["lstm.w"], self.params["lstm.b"])
            hs.append(h)
        out = self._decode(ad.stack(hs, axis), e2, e4)
        return out, (h, c)

    # -- numpy-facing inference -----------------------------------------------

    def forward(self, mic, ref, state=None):
        """Batch forward of feature tensors shaped (M, T, C); returns (M, T, C)."""
        mic, ref = _check_features(mic), _check_features(ref)
        if mic.shape != ref.shape:
            raise ValueError(f"mic/ref shape mismatch: {mic.shape} vs {ref.shape}")
        with ad.no_grad():
            out, _ = self.graph(mic.transpose(1, 0, 2), ref.transpose(1, 0, 2), state)
        return out.value.transpose(1, 0, 2)

    def infer_stream(self, state, mic_frame, ref_frame):
        """Process one M x 1 x C frame pair; returns (output frame, advanced state)."""
        mic_frame, ref_frame = _check_features(mic_frame), _check_features(ref_frame)
        if mic_frame.shape[1] != 1 or ref_frame.shape[1] != 1:
            raise ValueError("infer_stream expects single frames (M x 1 x C)")
        expected = (self.config.M // 4, self.config.F)
        if state.h.shape != expected or state.c.shape != expected:
            raise ValueError(f"state shape {state.h.shape} != {expected}")
        with ad.no_grad():
            out, (h, c) = self.graph(mic_frame.transpose(1, 0, 2), ref_frame.transpose(1, 0, 2), state)
        return out.value.transpose(1, 0, 2), ModelState(h.value, c.value)

    def new_state(self):
        return ModelState.zeros(self.config)

    def enhance(self, y, x):
        """Run the echo canceller on time signals; returns (e, d_hat or None)."""
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        if y.shape != x.shape:
            raise ValueError("microphone and reference must have equal length")
        K = self.config.frame_length
        Y = padded_stft(y, K, K // 2)
        X = padded_stft(x, K, K // 2)
        out = self.forward(pack(Y, self.config.M), pack(X, self.config.M))
        return spectra_to_signals(self.config.target, Y, unpack(out, K), len(y))

    # -- persistence -------------------------------------------------------------

    def save(self, path, dtype="f4"):
        save_checkpoint(self, path, dtype)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


def spectra_to_signals(target, Y, net_out, length):
    """Turn network output spectra into (e, d_hat); OutD subtracts per bin from the microphone."""
    if target == "OutD":
        E = Y.with_frames(Y.frames - net_out.frames)
        return padded_istft(E, length), padded_istft(net_out, length)
    return padded_istft(net_out, length), None


def _check_features(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 3:
        raise ValueError(f"feature tensor must be 3-D (M, T, C), got shape {a.shape}")
    return a


build = Model.build


# -- checkpoint file -----------------------------------------------------------
#
# layout (little-endian):
#   magic     8 bytes  b"FCRNAEC\0"
#   version   uint32   (currently 1)
#   config    uint32 length + UTF-8 JSON of ModelConfig
#   dtype     1 byte   b"f" (float32, default) or b"d" (float64)
#   count     uint32   number of arrays
#   per array uint16 name length, UTF-8 name, uint8 ndim, ndim x uint32 dims, raw values
#   crc32     uint32   over everything before it

MAGIC = b"FCRNAEC\0"
VERSION = 1
_DTYPES = {"f4": (b"f", "<f4"), "f8": (b"d", "<f8")}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, dtype="f4"):
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    code, np_dtype = _DTYPES[dtype]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(code)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype=np_dtype).tobytes())
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an FCRN checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt file)")
    view = memoryview(body)
    pos = len(MAGIC)

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    (version,) = read("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (n,) = read("<I")
    cfg = ModelConfig(**json.loads(bytes(view[pos:pos + n]).decode()))
    pos += n
    code = bytes(view[pos:pos + 1])
    pos += 1
    np_dtype = {c: d for c, d in _DTYPES.values()}.get(code)
    if np_dtype is None:
        raise CheckpointError(f"{path}: unknown value type {code!r}")
    (count,) = read("<I")
    params = ad.ParamSet()
    for _ in range(count):
        (ln,) = read("<H")
        name = bytes(view[pos:pos + ln]).decode()
        pos += ln
        (ndim,) = read("<B")
        shape = read(f"<{ndim}I")
        nbytes = int(np.prod(shape)) * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=np_dtype).reshape(shape).astype(float)
        pos += nbytes
        params.add(name, arr)
    expected = param_shapes(cfg)
    got = {k: p.shape for k, p in params.items()}
    if got != expected:
        raise CheckpointError(f"{path}: parameter layout does not match its config")
    return Model(cfg, params)


def with_target(cfg, target):
    return replace(cfg, target=target)
