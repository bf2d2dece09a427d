"""Command-line entry point: ``freegaze <command> [options]``.

Every command accepts ``--config run.json`` (a versioned RunConfig document);
explicit flags override the config, which overrides built-in defaults. The
resolved configuration, including the master seed, is written next to every
output as ``<output>.run.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import DimensionError, __version__
from .augment import AugmentConfig
from .contrastive import (CalibrationConfig, InsufficientDataError, LossConfig, TrainState, calibrate,
                          calibration_split, evaluate, network_inputs, pretrain, write_report)
from .costmodel import cost_ratio, network_cost, write_cost_csv
from .freqdct import image_to_dct, write_dct
from .imagecore import rgb_to_ycbcr
from .nnet import ArchitectureSpec, CheckpointVersionError, build_embedding, gaze_estimator
from .sampler import EmptyDatasetError, SamplerConfig, load_dataset
from .synthgaze import SynthConfig, generate_dataset

log = logging.getLogger("freegaze")

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- run configuration

@dataclass
class ArchConfig:
    name: str = "freegaze8"
    width: float = 0.25
    cy: int = 6
    cc: int = 3

    def spec(self) -> ArchitectureSpec:
        return ArchitectureSpec(self.name, self.width, self.cy, self.cc)


@dataclass
class SamplingConfig:
    batch_size: int = 128
    mode: str = "subject_specific"

    def __post_init__(self):
        if self.mode not in ("subject_specific", "mixed"):
            raise ValueError(f"sampler mode must be subject_specific or mixed, got {self.mode!r}")
        if int(self.batch_size) < 2:
            raise ValueError("sampler batch_size must be >= 2")


@dataclass
class PretrainConfig:
    epochs: int = 30

    def __post_init__(self):
        if int(self.epochs) < 0:
            raise ValueError("pretrain epochs must be >= 0")


@dataclass
class SynthSection:
    size: int = 64
    subjects: int = 20
    per_subject: int = 200
    calibration_subjects: int = 4
    max_angle_deg: float = 25.0
    noise_sigma: float = 2.0


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 7
    synth: SynthSection = field(default_factory=SynthSection)
    architecture: ArchConfig = field(default_factory=ArchConfig)
    sampler: SamplingConfig = field(default_factory=SamplingConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    SECTIONS = {"synth": SynthSection, "architecture": ArchConfig, "sampler": SamplingConfig,
                "augment": AugmentConfig, "loss": LossConfig, "pretrain": PretrainConfig,
                "calibration": CalibrationConfig}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        if "version" not in doc:
            raise ConfigError("run config is missing the mandatory 'version' field")
        if doc["version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported run config version {doc['version']!r} (expected {CONFIG_VERSION})")
        unknown = set(doc) - {"version", "seed", *cls.SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {"version": doc["version"], "seed": int(doc.get("seed", 7))}
        for name, typ in cls.SECTIONS.items():
            sec = doc.get(name, {})
            allowed = {f.name for f in fields(typ)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            try:
                kw[name] = typ(**sec)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid '{name}' section: {e}") from e
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = {"version": self.version, "seed": self.seed}
        for name in self.SECTIONS:
            d[name] = asdict(getattr(self, name))
        return d

    def synth_config(self) -> SynthConfig:
        return SynthConfig(seed=self.seed, **asdict(self.synth))


# flag dest -> (section, field); a value of None means "not given on the command line"
OVERRIDES = {
    "size": ("synth", "size"),
    "subjects": ("synth", "subjects"),
    "per_subject": ("synth", "per_subject"),
    "calibration_subjects": ("synth", "calibration_subjects"),
    "noise_sigma": ("synth", "noise_sigma"),
    "arch": ("architecture", "name"),
    "width": ("architecture", "width"),
    "cy": ("architecture", "cy"),
    "cc": ("architecture", "cc"),
    "batch_size": ("sampler", "batch_size"),
    "mode": ("sampler", "mode"),
    "color_strength": ("augment", "color_strength"),
    "temperature": ("loss", "temperature"),
    "lr": ("loss", "lr"),
    "epochs": ("pretrain", "epochs"),
    "cal_epochs": ("calibration", "epochs"),
    "cal_lr": ("calibration", "lr"),
    "n_finetune": ("calibration", "n_finetune"),
    "n_validation": ("calibration", "n_validation"),
    "freeze_embedding": ("calibration", "freeze_embedding"),
}


def resolve_config(args) -> RunConfig:
    """flag > config file > default."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    doc = cfg.to_dict()
    if args.seed is not None:
        doc["seed"] = args.seed
    for dest, (section, key) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            doc[section][key] = value
    return RunConfig.from_dict(doc)


def write_run_record(cfg: RunConfig, output, command: str, extra=None) -> None:
    path = Path(str(output).rstrip("/") + ".run.json")
    rec = {"command": command, "freegaze_version": __version__, "config": cfg.to_dict()}
    if extra:
        rec.update(extra)
    path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def thread_limit(args):
    """BLAS thread cap from --threads, else FREEGAZE_THREADS; --deterministic implies 1."""
    n = args.threads
    if n is None and os.environ.get("FREEGAZE_THREADS"):
        n = int(os.environ["FREEGAZE_THREADS"])
    if args.deterministic:
        n = 1
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------- commands

def cmd_synthgen(args, cfg: RunConfig) -> int:
    scfg = cfg.synth_config()
    ds = generate_dataset(scfg, args.out)
    write_run_record(cfg, args.out, "synthgen")
    splits = {s: sum(x.split == s for x in ds.samples) for s in ("pretrain", "calibration")}
    print(f"wrote {len(ds)} images for {len(ds.subjects)} subjects to {args.out} "
          f"(pretrain {splits['pretrain']}, calibration {splits['calibration']})")
    return 0


def cmd_preprocess(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.data)
    out = Path(args.out)
    a = cfg.architecture
    with open(_mkparent(out / "dct_index.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for s in ds.samples:
            rel = str(Path(s.name).with_suffix(".fgd"))
            write_dct(image_to_dct(rgb_to_ycbcr(s.image), a.cy, a.cc), _mkparent(out / rel))
            fh.write(json.dumps({"image": s.name, "dct": rel, "subject": s.subject_id}, sort_keys=True) + "\n")
    write_run_record(cfg, out, "preprocess")
    print(f"wrote {len(ds)} coefficient files to {out}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.data, split=None if args.all_subjects else "pretrain")
    spec = cfg.architecture.spec()
    scfg = SamplerConfig(batch_size=cfg.sampler.batch_size, mode=cfg.sampler.mode, seed=cfg.seed)
    state = TrainState.load(args.resume) if args.resume else None
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".csv")
    t0 = time.perf_counter()
    state = pretrain(ds, spec, cfg.loss, scfg, cfg.augment, cfg.pretrain.epochs, seed=cfg.seed,
                     state=state, log_path=_mkparent(log_path))
    state.metadata.pop("loss_trace", None)  # the CSV log holds the trace
    state.flags["deterministic"] = bool(args.deterministic)
    state.save(_mkparent(Path(args.out)))
    write_run_record(cfg, args.out, "pretrain")
    print(f"pretrained {state.epoch} epochs ({state.step} steps) in {time.perf_counter() - t0:.1f}s -> {args.out}")
    return 0


def _subjects(ds, requested):
    if requested:
        missing = set(requested) - set(ds.subjects)
        if missing:
            raise EmptyDatasetError(f"subjects not found: {sorted(missing)}")
        return list(requested)
    return ds.subjects


def cmd_calibrate(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.data, split=None if args.all_subjects else "calibration")
    state = TrainState.load(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ccfg = CalibrationConfig(**{**asdict(cfg.calibration), "seed": cfg.seed})
    with open(out / "calibration_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "epoch", "val_angular_deg"])
        for subject in _subjects(ds, args.subjects):
            ft, val, _ = calibration_split(ds.of_subject(subject), ccfg.n_finetune, ccfg.n_validation, cfg.seed)
            cal = calibrate(state, ft, val, ccfg)
            cal.metadata["subject_id"] = subject
            cal.save(out / f"{subject}.fgze")
            for epoch, err in enumerate(cal.metadata["val_history"]):
                w.writerow([subject, epoch, f"{err:.6f}"])
            print(f"{subject}: best validation {cal.metadata['best_val_deg']:.3f} deg "
                  f"(epoch {cal.metadata['best_epoch']})")
    write_run_record(cfg, out, "calibrate", {"checkpoint": str(args.checkpoint)})
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.data, split=None if args.all_subjects else "calibration")
    ckpt = Path(args.checkpoint)
    ccfg = CalibrationConfig(**{**asdict(cfg.calibration), "seed": cfg.seed})
    reports = []
    if ckpt.is_dir():
        states = {p.stem: TrainState.load(p) for p in sorted(ckpt.glob("*.fgze"))}
        if not states:
            raise FileNotFoundError(f"no .fgze checkpoints in {ckpt}")
    else:
        states = {None: TrainState.load(ckpt)}
    for key, state in states.items():
        subjects = [state.metadata.get("subject_id", key)] if state.estimator is not None and key else None
        for subject in _subjects(ds, subjects or args.subjects):
            ft, val, test = calibration_split(ds.of_subject(subject), ccfg.n_finetune, ccfg.n_validation, cfg.seed)
            st = state if state.estimator is not None else calibrate(state, ft, val, ccfg)
            reports.append(evaluate(st, subject, test))
    _mkparent(Path(args.out))
    write_report(reports, args.out)
    write_run_record(cfg, args.out, "evaluate", {"checkpoint": str(ckpt)})
    for r in reports:
        print(f"{r.subject_id}: {r.mean:.3f} +- {r.std:.3f} deg over {len(r.errors_deg)} images")
    return 0


def cmd_costmodel(args, cfg: RunConfig) -> int:
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    archs = ["freegaze8", "resnet18_rgb"] if args.arch in (None, "both") else [args.arch]
    width = args.width if args.width is not None else 1.0
    print("arch,input,gflops,params")
    costs = {}
    for name in archs:
        spec = ArchitectureSpec(name, width, cfg.architecture.cy, cfg.architecture.cc)
        c = network_cost(spec, args.resolution, include_estimator=args.with_estimator)
        costs[name] = c
        print(c.summary_line())
        if out:
            write_cost_csv(c, out / f"{name}_{args.resolution}.csv")
    if len(costs) == 2:
        ratio = costs["resnet18_rgb"].flops / costs["freegaze8"].flops
        print(f"# flops ratio resnet18_rgb/freegaze8 = {ratio:.4f}")
    if out:
        write_run_record(cfg, out, "costmodel")
    return 0


def _bench_one(spec: ArchitectureSpec, resolution: int, n: int, warmup: int, seed: int):
    rng = np.random.default_rng([seed, 0xBE4C])
    emb = build_embedding(spec, seed)
    est = gaze_estimator(spec.feature_dim, seed)
    img = rng.uniform(0, 255, (1, resolution, resolution, 3)).astype(np.float32)
    x = network_inputs(spec, img)
    times = []
    for k in range(warmup + n):
        t0 = time.perf_counter()
        est.forward(emb.forward(x, train=False), train=False)
        if k >= warmup:
            times.append(time.perf_counter() - t0)
    return np.array(times)


def cmd_bench(args, cfg: RunConfig) -> int:
    width = args.width if args.width is not None else 1.0
    res = args.resolution
    rows = {}
    for name in ("freegaze8", "resnet18_rgb"):
        spec = ArchitectureSpec(name, width, cfg.architecture.cy, cfg.architecture.cc)
        t = _bench_one(spec, res, args.n, args.warmup, cfg.seed)
        rows[name] = t
        print(f"{name}: {1e3 * t.mean():.3f} +- {1e3 * t.std():.3f} ms per inference (n={len(t)}, {res}x{res})")
    speedup = rows["resnet18_rgb"].mean() / rows["freegaze8"].mean()
    ratio = cost_ratio(ArchitectureSpec("resnet18_rgb", width), ArchitectureSpec("freegaze8", width), res)
    print(f"speedup {speedup:.2f}x measured; cost-model flops ratio {ratio:.2f}x")
    if args.out:
        with open(_mkparent(Path(args.out)), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arch", "resolution", "n", "mean_ms", "std_ms"])
            for name, t in rows.items():
                w.writerow([name, res, len(t), f"{1e3 * t.mean():.4f}", f"{1e3 * t.std():.4f}"])
        write_run_record(cfg, args.out, "bench", {"speedup": speedup, "flops_ratio": ratio})
    return 0


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="BLAS worker threads (default: FREEGAZE_THREADS or library default)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="freegaze", description="Frequency-domain contrastive gaze toolkit")
    p.add_argument("--version", action="version", version=f"freegaze {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def data_flags(sp, *, all_subjects=True):
        sp.add_argument("--data", required=True, help="dataset root with annotations.jsonl")
        if all_subjects:
            sp.add_argument("--all-subjects", action="store_true", help="ignore split markers")

    def arch_flags(sp):
        sp.add_argument("--arch", choices=["freegaze8", "resnet18_rgb"])
        sp.add_argument("--width", type=float)
        sp.add_argument("--cy", type=int)
        sp.add_argument("--cc", type=int)

    def cal_flags(sp):
        sp.add_argument("--subjects", nargs="+")
        sp.add_argument("--cal-epochs", type=int)
        sp.add_argument("--cal-lr", type=float)
        sp.add_argument("--n-finetune", type=int)
        sp.add_argument("--n-validation", type=int)
        sp.add_argument("--freeze-embedding", action="store_const", const=True)

    sp = add("synthgen", cmd_synthgen, "render the synthetic gaze dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=int)
    sp.add_argument("--subjects", type=int)
    sp.add_argument("--per-subject", type=int)
    sp.add_argument("--calibration-subjects", type=int)
    sp.add_argument("--noise-sigma", type=float)

    sp = add("preprocess", cmd_preprocess, "write DCT coefficient files for a dataset")
    data_flags(sp, all_subjects=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cy", type=int)
    sp.add_argument("--cc", type=int)

    sp = add("pretrain", cmd_pretrain, "contrastive pretraining")
    data_flags(sp)
    arch_flags(sp)
    sp.add_argument("--out", required=True, help="checkpoint path (.fgze)")
    sp.add_argument("--log", help="training log CSV (default: checkpoint path with .csv)")
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--mode", choices=["subject_specific", "mixed"])
    sp.add_argument("--lr", type=float)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--color-strength", type=float)

    sp = add("calibrate", cmd_calibrate, "per-subject supervised calibration")
    data_flags(sp)
    cal_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="output directory for per-subject checkpoints")

    sp = add("evaluate", cmd_evaluate, "test-set angular error report")
    data_flags(sp)
    cal_flags(sp)
    sp.add_argument("--checkpoint", required=True, help="calibrated checkpoint directory, or a pretrained checkpoint")
    sp.add_argument("--out", required=True, help="report CSV")

    sp = add("costmodel", cmd_costmodel, "analytic FLOPs / memory tables")
    sp.add_argument("--arch", choices=["freegaze8", "resnet18_rgb", "both"])
    sp.add_argument("--width", type=float)
    sp.add_argument("--resolution", type=int, default=224)
    sp.add_argument("--with-estimator", action="store_true")
    sp.add_argument("--out", help="directory for per-layer CSV tables")

    sp = add("bench", cmd_bench, "single-image inference latency")
    sp.add_argument("--n", type=int, default=5000)
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--width", type=float)
    sp.add_argument("--resolution", type=int, default=224)
    sp.add_argument("--out", help="CSV with per-architecture timings")
    return p


EXPECTED_ERRORS = (ConfigError, DimensionError, CheckpointVersionError, InsufficientDataError, EmptyDatasetError,
                   FileNotFoundError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with thread_limit(args):
            return args.fn(args, cfg)
    except EXPECTED_ERRORS as e:
        print(f"freegaze {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
