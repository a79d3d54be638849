"""Experiment orchestration: dataset generation, training runs over the variant
grid, four-condition evaluation and result tables.

On-disk dataset layout produced by :func:`run_simulate`::

    <data_dir>/manifest.jsonl             one record per mixture (scene.build_manifest schema + "files")
    <data_dir>/<split>/<id>/{x,s,n,d,y}.wav
    <data_dir>/<split>/<id>/meta.json     realized SER/SNR, T60, seeds, applied gain

Components are written as 16-bit PCM and ``y`` is the sum of the quantized
components, so ``y == s + n + d`` holds exactly for the stored files too.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import scene
from .fcrn import Model, ModelConfig
from .kalman import KalmanConfig, kalman_aec
from .metrics import (ERLE_CEILING, MetricError, blackbox_decompose, delta_snr, erle,
                      is_saturated, noise_attenuation, pesq_adapter)
from .profiles import get_profile
from .signals import quantize, read_wav, write_wav
from .training import TrainConfig, make_example, train

COMPONENTS = ("x", "s", "n", "d", "y")
CONDITIONS = ("full", "echo", "noise", "speech")
REFERENCE_MODES = ("live", "zero")
PEAK_LIMIT = 0.9

# (key, header, condition group); order mirrors the published tables
COLUMNS = (
    ("full_pesq", "PESQ", "full mixture"),
    ("erle_bb", "ERLE_BB", "full mixture"),
    ("dsnr_bb", "dSNR_BB", "full mixture"),
    ("pesq_bb", "PESQ_BB", "full mixture"),
    ("echo_erle", "ERLE", "d(n)"),
    ("noise_dsnr", "dSNR", "n(n)"),
    ("speech_pesq", "PESQ", "s(n)"),
)
COLUMN_KEYS = tuple(c[0] for c in COLUMNS)
DB_COLUMNS = ("erle_bb", "dsnr_bb", "echo_erle", "noise_dsnr")


class HarnessError(RuntimeError):
    pass


# -- configuration -----------------------------------------------------------------

def default_train_overrides(profile):
    # the desk profile trains for minutes, not days: larger step, short budget
    if profile == "desk":
        return {"lr_init": 1e-3, "stop_lr": 1e-4, "max_epochs": 30}
    return {}


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    seed: int = 0
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    results_dir: str = "results"
    variants: list = field(default_factory=lambda: ["LateF/SkipA/OutD"])
    include_kalman: bool = True
    split: str = "test"
    counts: dict = field(default_factory=dict)  # optional train/val/test overrides
    duration: float | None = None
    nonlinear: bool = True
    speech_dir: str | None = None
    test_speech_dir: str | None = None
    noise_dir: str | None = None
    test_noise_dir: str | None = None
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    reference_modes: dict = field(default_factory=lambda: {c: "live" for c in CONDITIONS})
    # the Kalman speech-only run gets no far-end signal, so its pass-through is exact
    kalman_reference_modes: dict = field(default_factory=lambda: {"full": "live", "echo": "live",
                                                                  "noise": "live", "speech": "zero"})
    pesq_tool: str | None = None
    pesq_args: str | None = None
    workers: int = 1

    def validate(self):
        get_profile(self.profile)
        if not self.variants and not self.include_kalman:
            raise HarnessError("empty system grid: give at least one variant or enable the Kalman baseline")
        for v in self.variants:
            ModelConfig.from_variant(v, get_profile(self.profile))
        for modes in (self.reference_modes, self.kalman_reference_modes):
            for cond, mode in modes.items():
                if cond not in CONDITIONS:
                    raise HarnessError(f"unknown condition {cond!r}; choose from {CONDITIONS}")
                if mode not in REFERENCE_MODES:
                    raise HarnessError(f"reference mode for {cond!r} must be one of {REFERENCE_MODES}")
        unknown = set(self.counts) - {"train", "val", "test"}
        if unknown:
            raise HarnessError(f"unknown split(s) in counts: {sorted(unknown)}")
        unknown = set(self.train) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise HarnessError(f"unknown training option(s): {sorted(unknown)}")
        if self.workers < 1:
            raise HarnessError("workers must be >= 1")
        return self

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise HarnessError(f"{path}: unknown config key(s) {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw).validate()

    def train_config(self):
        opts = default_train_overrides(self.profile)
        opts.update(self.train)
        opts.setdefault("seed", self.seed)
        return TrainConfig(**opts)

    def modes_for(self, system_name):
        base = {c: "live" for c in CONDITIONS}
        base.update(self.kalman_reference_modes if system_name == "Kalman" else self.reference_modes)
        return base


def variant_slug(variant):
    return variant.replace("/", "_")


# -- simulation ----------------------------------------------------------------------

def _wav_list(directory):
    if not directory:
        return []
    paths = sorted(str(p) for p in Path(directory).glob("*.wav"))
    if not paths:
        raise HarnessError(f"no .wav files in {directory}")
    return paths


def manifest_config(cfg):
    counts = cfg.counts
    return scene.ManifestConfig(
        profile=cfg.profile, train=counts.get("train"), val=counts.get("val"), test=counts.get("test"),
        seed=cfg.seed, duration=cfg.duration, nonlinear=cfg.nonlinear,
        speech_files=_wav_list(cfg.speech_dir), test_speech_files=_wav_list(cfg.test_speech_dir),
        noise_files=_wav_list(cfg.noise_dir), test_noise_files=_wav_list(cfg.test_noise_dir))


def _quantized_components(m):
    peak = max(float(np.max(np.abs(v))) if v.size else 0.0 for v in (m.s, m.n, m.d, m.y))
    gain = min(1.0, PEAK_LIMIT / peak) if peak > 0 else 1.0
    s, n, d = (quantize(v * gain) for v in (m.s, m.n, m.d))
    x_peak = float(np.max(np.abs(m.x))) if m.x.size else 0.0
    x = quantize(m.x * (min(1.0, PEAK_LIMIT / x_peak) if x_peak > 0 else 1.0))
    return {"x": x, "s": s, "n": n, "d": d, "y": s + n + d}, gain


def run_simulate(cfg):
    """Render the manifest into a WAV tree; returns the written records."""
    records = scene.build_manifest(manifest_config(cfg))
    root = Path(cfg.data_dir)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for rec in records:
        m = scene.render_mixture(rec)
        comps, gain = _quantized_components(m)
        rel = Path(rec["split"]) / rec["id"]
        (root / rel).mkdir(parents=True, exist_ok=True)
        files = {}
        for name in COMPONENTS:
            write_wav(root / rel / f"{name}.wav", comps[name])
            files[name] = str(rel / f"{name}.wav")
        p_s = scene.power(comps["s"])
        meta = {"id": rec["id"], "split": rec["split"], "t60": rec["t60"],
                "target_ser_db": rec["ser_db"], "target_snr_db": rec["snr_db"],
                "realized_ser_db": _db_out(scene.ratio_db(p_s, scene.power(comps["d"]))),
                "realized_snr_db": _db_out(scene.ratio_db(p_s, scene.power(comps["n"]))),
                "ir_seed": rec["ir_seed"], "noise_seed": rec["noise_seed"],
                "near_seed": rec["near_seed"], "far_seed": rec["far_seed"],
                "gain": gain, "room": scene.room_dict(scene.random_room(rec["ir_seed"], rec["t60"]))}
        with open(root / rel / "meta.json", "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)
        out.append(dict(rec, files=files))
    scene.write_manifest(out, root / "manifest.jsonl")
    return out


def _db_out(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return round(v, 6)


def load_records(data_dir, split=None):
    path = Path(data_dir) / "manifest.jsonl"
    if not path.exists():
        raise HarnessError(f"no manifest at {path}; run `simulate` first")
    records = scene.read_manifest(path)
    return [r for r in records if split is None or r["split"] == split]


def load_mixture(data_dir, rec):
    comps = {k: read_wav(Path(data_dir) / rec["files"][k]) for k in COMPONENTS}
    p_s = scene.power(comps["s"])
    return scene.Mixture(comps["x"], comps["s"], comps["n"], comps["d"], comps["y"],
                         scene.ratio_db(p_s, scene.power(comps["d"])),
                         scene.ratio_db(p_s, scene.power(comps["n"])))


# -- training ------------------------------------------------------------------------

def run_train(cfg, variant, progress=None):
    """Train one variant on the train split (validation on val); returns (checkpoint path, log)."""
    profile = get_profile(cfg.profile)
    mcfg = ModelConfig.from_variant(variant, profile)

    def examples(split):
        return [make_example(load_mixture(cfg.data_dir, r), mcfg.target, profile.frame_length, profile.M)
                for r in load_records(cfg.data_dir, split)]
    train_ex = examples("train")
    if not train_ex:
        raise HarnessError("training split is empty")
    val_ex = examples("val") or None
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    slug = variant_slug(variant)
    model = Model.build(mcfg, seed=cfg.seed)
    model, log = train(model, train_ex, cfg.train_config(), val_ex,
                       log_path=ckpt_dir / f"{slug}.log.jsonl", progress=progress)
    path = ckpt_dir / f"{slug}.ckpt"
    model.save(path)
    return path, log


# -- evaluation ----------------------------------------------------------------------

class FcrnSystem:
    def __init__(self, model, name=None):
        self.model = model
        self.name = name or model.config.variant

    def process(self, y, x):
        return self.model.enhance(y, x)


class KalmanSystem:
    name = "Kalman"

    def __init__(self, cfg=None, postfilter=True):
        self.cfg = cfg or KalmanConfig()
        self.postfilter = postfilter

    def process(self, y, x):
        return kalman_aec(x, y, self.cfg, self.postfilter)


def load_system(path):
    path = Path(path)
    if not path.exists():
        raise HarnessError(f"checkpoint not found: {path}")
    return FcrnSystem(Model.load(path))


def _condition_input(cond, m):
    return {"full": m.y, "echo": m.d, "noise": m.n, "speech": m.s}[cond]


def _safe(fn, *args):
    try:
        return fn(*args)
    except MetricError:
        return None


def evaluate_file(system, m, modes, pesq_tool=None, pesq_args=None):
    """Metrics for one mixture under the four input conditions.

    Model inputs are only y (the condition's microphone signal) and x;
    the clean components are read for scoring alone.
    """
    def run(cond):
        x = m.x if modes[cond] == "live" else np.zeros_like(m.x)
        return system.process(_condition_input(cond, m), x)

    def pesq(ref, deg):
        return pesq_adapter(ref, deg, pesq_tool, pesq_args).score

    out = {}
    e, _ = run("full")
    out["full_pesq"] = pesq(m.s, e)
    comp = blackbox_decompose(m.y, e, m.s, m.n, m.d)
    out["erle_bb"] = _safe(erle, m.d, comp.d_tilde) if np.any(m.d) else None
    out["dsnr_bb"] = (_safe(delta_snr, m.s, m.n, comp.s_tilde, comp.n_tilde)
                      if np.any(m.n) and np.any(m.s) else None)
    out["pesq_bb"] = pesq(m.s, comp.s_tilde)
    if np.any(m.d):
        e, _ = run("echo")
        # y = d, so the output is exactly the residual echo d - d_hat
        out["echo_erle"] = _safe(erle, m.d, e)
    else:
        out["echo_erle"] = None
    if np.any(m.n):
        e, _ = run("noise")
        out["noise_dsnr"] = noise_attenuation(m.n, e)
    else:
        out["noise_dsnr"] = None
    e, _ = run("speech")
    out["speech_pesq"] = pesq(m.s, e)
    return out


def _eval_task(args):
    system, data_dir, rec, modes, pesq_tool, pesq_args = args
    return evaluate_file(system, load_mixture(data_dir, rec), modes, pesq_tool, pesq_args)


def run_eval(systems, cfg, records=None):
    """Evaluate every system on the configured split; returns (rows, per-file results)."""
    records = load_records(cfg.data_dir, cfg.split) if records is None else records
    if not records:
        raise HarnessError(f"no records in split {cfg.split!r}")
    rows, per_file = [], []
    for system in systems:
        modes = cfg.modes_for(system.name)
        tasks = [(system, cfg.data_dir, r, modes, cfg.pesq_tool, cfg.pesq_args) for r in records]
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(_eval_task, tasks))
        else:
            results = [_eval_task(t) for t in tasks]
        for rec, res in zip(records, results):
            per_file.append({"system": system.name, "id": rec["id"], **_rounded(res)})
        rows.append(aggregate(system.name, results, modes))
    return rows, per_file


def aggregate(name, results, modes=None):
    row = {"system": name}
    saturated = []
    for key in COLUMN_KEYS:
        vals = [r[key] for r in results if r.get(key) is not None]
        row[key] = float(np.mean(vals)) if vals else None
        if key in ("erle_bb", "echo_erle") and any(is_saturated(v) for v in vals):
            saturated.append(key)
    row["saturated"] = saturated
    row["files"] = len(results)
    if modes is not None:
        row["reference"] = {c: modes[c] for c in CONDITIONS}
    return _rounded(row)


def _rounded(d):
    # fixed precision keeps exports byte-stable across platforms
    return {k: (round(v, 6) if isinstance(v, float) else v) for k, v in d.items()}


# -- tables --------------------------------------------------------------------------

def rank_marks(rows):
    """Per column, 'best' / 'second' / '' for each row, compared at display precision.

    Higher is better in every column. Ties share the mark; second best is the
    next distinct value below the best.
    """
    marks = [{} for _ in rows]
    for key in COLUMN_KEYS:
        shown = [None if r.get(key) is None else round(r[key], 2) for r in rows]
        distinct = sorted({v for v in shown if v is not None}, reverse=True)
        for i, v in enumerate(shown):
            if v is None:
                marks[i][key] = ""
            elif v == distinct[0]:
                marks[i][key] = "best"
            elif len(distinct) > 1 and v == distinct[1]:
                marks[i][key] = "second"
            else:
                marks[i][key] = ""
    return marks


def format_value(v, key=None, saturated=()):
    if v is None:
        return "n/a"
    if key in saturated and v >= ERLE_CEILING - 1e-9:
        return "sat"
    return f"{v:.2f}"


def render_table(rows):
    """Aligned text table; '*' marks the best and '+' the second-best value per column."""
    marks = rank_marks(rows)
    sym = {"best": "*", "second": "+", "": " "}
    cells = [[r["system"]] + [format_value(r.get(k), k, r.get("saturated", ())) + sym[m[k]]
                              for k in COLUMN_KEYS]
             for r, m in zip(rows, marks)]
    header = ["system"] + [c[1] for c in COLUMNS]
    groups = [""] + [c[2] for c in COLUMNS]
    widths = [max(len(header[j]), len(groups[j]) if j == 0 else len(header[j]),
                  *(len(row[j]) for row in cells)) for j in range(len(header))]
    # group labels span their columns
    group_line, j = [], 1
    while j < len(COLUMNS) + 1:
        k = j
        while k + 1 < len(groups) and groups[k + 1] == groups[j]:
            k += 1
        span = sum(widths[j:k + 1]) + 3 * (k - j)
        group_line.append(groups[j][:span].center(span))
        j = k + 1
    lines = [" " * widths[0] + " | " + " | ".join(group_line),
             " | ".join(h.rjust(w) if i else h.ljust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("-+-".join("-" * w for w in widths))
    for row in cells:
        lines.append(" | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))))
    lines.append("")
    lines.append("* best, + second best per column (ties share the mark); "
                 "PESQ n/a when no external tool is configured; dB values are file means")
    return "\n".join(lines) + "\n"


def export_rows(rows):
    """Line-delimited JSON with stable keys and sorted key order."""
    marks = rank_marks(rows)
    lines = []
    for r, m in zip(rows, marks):
        rec = {"system": r["system"]}
        for key in COLUMN_KEYS:
            rec[key] = r.get(key)
        rec["best"] = [k for k in COLUMN_KEYS if m[k] == "best"]
        rec["second"] = [k for k in COLUMN_KEYS if m[k] == "second"]
        rec["saturated"] = list(r.get("saturated", []))
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def emit_table(rows, out_dir, figures=True):
    """Write table.txt, table.jsonl and (optionally) figures; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"text": out_dir / "table.txt", "jsonl": out_dir / "table.jsonl"}
    paths["text"].write_text(render_table(rows))
    paths["jsonl"].write_text(export_rows(rows))
    if figures:
        from .plotting import plot_results
        paths["figure"] = plot_results(rows, out_dir / "table.png")
    return paths


def write_jsonl(items, path):
    with open(path, "w") as fh:
        for item in items:
            fh.write(json.dumps(item, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- full pipeline -------------------------------------------------------------------

def run_pipeline(cfg, progress=None):
    """simulate -> train every variant -> evaluate -> table; returns the emitted paths."""
    cfg.validate()
    run_simulate(cfg)
    systems = []
    for variant in cfg.variants:
        path, _ = run_train(cfg, variant, progress)
        systems.append(load_system(path))
    if cfg.include_kalman:
        systems.append(KalmanSystem())
    rows, per_file = run_eval(systems, cfg)
    results = Path(cfg.results_dir)
    results.mkdir(parents=True, exist_ok=True)
    write_jsonl(per_file, results / "files.jsonl")
    write_jsonl(rows, results / "rows.jsonl")
    return emit_table(rows, results)


def config_dict(cfg):
    return asdict(cfg)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
