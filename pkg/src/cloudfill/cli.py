"""Command line operator surface.

Subcommands: synth (dataset generation), train, infer, eval, ablate,
and metrics (standalone metric computation between two .xyzb files).

Runs are reproducible from their stored config alone: every command
that produces a directory writes the effective merged configuration
(file values overridden by flags) back as `run.cfg`. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import geometry, network, oracle, training
from .network import ConfigError
from .oracle import DatasetError
from .tensor import CheckpointError
from .training import NumericAbort
from .views import SidecarError

VIEW_SWEEP = (2, 4, 6, 8)
KEEP_SWEEP = (0.88, 0.75, 0.50)

_PRESETS = {"full": network.full_config, "small": network.small_config,
            "tiny": network.tiny_config}


def worker_count():
    """Thread budget for sample-level parallelism, capped by PCDK_THREADS."""
    cap = os.environ.get("PCDK_THREADS")
    if cap is not None:
        try:
            return max(1, int(cap))
        except ValueError:
            raise ConfigError(f"PCDK_THREADS must be an integer, got {cap!r}")
    return 1


# ---------------------------------------------------------------------------
# config files: flat `key = value` under [model] / [train] / [data]


def _coerce(text, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        return tuple(int(t) for t in text.replace(",", " ").split())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def read_config_file(path):
    parser = configparser.ConfigParser()
    found = parser.read(path)
    if not found:
        raise ConfigError(f"config file not found: {path}")
    return {section: dict(parser[section]) for section in parser.sections()}


def write_config_file(path, sections):
    parser = configparser.ConfigParser()
    for name, values in sections.items():
        parser[name] = {}
        for k, v in values.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            parser[name][k] = str(v)
    with open(path, "w") as f:
        parser.write(f)


def _apply_section(raw, defaults):
    """Coerce raw string values against a dict of typed defaults."""
    out = dict(defaults)
    for k, v in raw.items():
        if k not in defaults:
            raise ConfigError(f"unknown config key: {k}")
        out[k] = _coerce(v, defaults[k])
    return out


def _model_defaults(preset):
    d = _PRESETS[preset]().to_dict()
    d["image_channels"] = tuple(d["image_channels"])
    return d


def build_model_config(file_sections, args):
    raw = dict(file_sections.get("model", {}))
    preset = raw.pop("preset", None)
    if getattr(args, "preset", None):
        preset = args.preset
    preset = preset or "small"
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
    fields = _apply_section(raw, _model_defaults(preset))
    for flag in ("keep_fraction", "n_in", "v_views"):
        v = getattr(args, flag, None)
        if v is not None:
            fields[flag] = v
    if getattr(args, "no_views", False):
        fields["use_views"] = False
    return preset, network.ModelConfig.from_dict(fields)


def build_train_config(file_sections, args):
    base = training.TrainConfig()
    raw = file_sections.get("train", {})
    fields = _apply_section(raw, {k: getattr(base, k) for k in (
        "epochs", "batch_size", "lr", "lr_decay_factor", "lr_decay_every",
        "seed", "grad_clip", "conf_weight", "loss_gt_points",
        "checkpoint_every")})
    for flag in ("epochs", "batch_size", "lr", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            fields[flag] = v
    return training.TrainConfig(**fields)


def _run_sections(preset, model_cfg, train_cfg=None, data=None):
    sections = {"model": {"preset": preset, **model_cfg.to_dict()}}
    if train_cfg is not None:
        sections["train"] = {k: getattr(train_cfg, k) for k in (
            "epochs", "batch_size", "lr", "lr_decay_factor", "lr_decay_every",
            "seed", "grad_clip", "conf_weight", "loss_gt_points",
            "checkpoint_every")}
    if data:
        sections["data"] = data
    return sections


def load_run_model(run_dir, ckpt_name="ckpt_last.pckpt"):
    """Rebuild the model a run directory describes and load its weights."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "run.cfg"
    if not cfg_path.exists():
        raise DatasetError(f"missing run config: {cfg_path}")
    sections = read_config_file(cfg_path)
    raw = dict(sections["model"])
    preset = raw.pop("preset", "small")
    fields = _apply_section(raw, _model_defaults(preset))
    seed = int(sections.get("train", {}).get("seed", 0))
    model = network.CompletionModel(network.ModelConfig.from_dict(fields), seed=seed)
    ckpt = run_dir / ckpt_name
    if not ckpt.exists():
        raise DatasetError(f"missing checkpoint: {ckpt}")
    model.load(ckpt)
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DatasetError(f"{out} is not empty; pass --force to write anyway")
    sections = read_config_file(args.config) if args.config else {}
    data_defaults = {"n_train": 200, "n_val": 20, "n_test": 20,
                     "profile": "mild", "views": 6, "seed": 0,
                     "n_partial": 2048, "n_gt": 16384,
                     "width": 128, "height": 128}
    data = _apply_section(sections.get("data", {}), data_defaults)
    for flag in data_defaults:
        v = getattr(args, flag, None)
        if v is not None:
            data[flag] = v
    if data["profile"] not in oracle.PROFILES:
        raise ConfigError(f"unknown profile {data['profile']!r}; "
                          f"choose from {sorted(oracle.PROFILES)}")
    profile = oracle.PROFILES[data["profile"]]
    out.mkdir(parents=True, exist_ok=True)

    jobs = []
    index = 0
    for split, n in (("train", data["n_train"]), ("val", data["n_val"]),
                     ("test", data["n_test"])):
        (out / split).mkdir(exist_ok=True)
        for j in range(n):
            family = oracle.FAMILIES[index % len(oracle.FAMILIES)]
            jobs.append((split, j, index, family))
            index += 1

    def make(job):
        split, j, idx, family = job
        sample = oracle.generate_sample(
            data["seed"], idx, family, profile, v_views=data["views"],
            n_partial=data["n_partial"], n_gt=data["n_gt"],
            width=data["width"], height=data["height"])
        oracle.export_sample(out / split / f"sample_{j:04d}", sample.partial,
                             sample.input_view, sample.views, sample.gt,
                             sample.meta)
        return split

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(make, jobs))
    else:
        done = [make(job) for job in jobs]
    write_config_file(out / "run.cfg", {"data": data})
    for split in ("train", "val", "test"):
        print(f"{split}: {done.count(split)} samples")
    return 0


def cmd_train(args):
    sections = read_config_file(args.config) if args.config else {}
    preset, model_cfg = build_model_config(sections, args)
    train_cfg = build_train_config(sections, args)
    train_samples = oracle.load_split(args.data, "train")
    try:
        val_samples = oracle.load_split(args.data, "val")
    except DatasetError:
        val_samples = []
    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = network.CompletionModel(model_cfg, seed=train_cfg.seed)
    if args.resume:
        pass  # train() restores model/optimizer/history from run_dir
    elif args.init_from:
        model.load(args.init_from)
    write_config_file(run_dir / "run.cfg",
                      _run_sections(preset, model_cfg, train_cfg,
                                    {"dataset": str(args.data)}))
    log = print if not args.quiet else None
    training.train(model, train_samples, val_samples, train_cfg,
                   run_dir=run_dir, resume=args.resume, log=log)
    print(f"run complete: {run_dir}")
    return 0


def _resolve_model(args):
    if args.run:
        return load_run_model(args.run, args.ckpt or "ckpt_last.pckpt")
    if not args.ckpt:
        raise ConfigError("need --run, or --ckpt together with --preset")
    preset = args.preset or "small"
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    model = network.CompletionModel(_PRESETS[preset]())
    model.load(args.ckpt)
    return model


def cmd_infer(args):
    model = _resolve_model(args)
    sample = oracle.load_sample(args.sample)
    result = model.forward(sample, keep_fraction=args.keep_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    oracle.write_xyzb(out / "coarse.xyzb", result.coarse.data)
    oracle.write_xyzb(out / "filtered.xyzb", result.filtered.data)
    oracle.write_xyzb(out / "dense.xyzb", result.dense.data)
    with open(out / "confidence.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "score", "kept"])
        kept = set(int(i) for i in result.keep_idx)
        for i, s in enumerate(result.scores.data):
            writer.writerow([i, f"{float(s):.8f}", int(i in kept)])
    print(f"coarse {result.coarse.shape[0]}  filtered {result.filtered.shape[0]}  "
          f"dense {result.dense.shape[0]} -> {out}")
    return 0


def _parallel_rows(pairs, tau, backend):
    """Metric rows for (pred, gt, family) triples, sample-parallel."""
    def row(p):
        pred, gt, family = p
        return training.metrics_row(pred, gt, tau=tau, family=family,
                                    backend=backend)
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(row, pairs))
    return [row(p) for p in pairs]


def cmd_eval(args):
    model = _resolve_model(args)
    samples = oracle.load_split(args.data, args.split)
    pairs = []
    for s in samples:
        result = model.forward(s, keep_fraction=args.keep_fraction)
        pairs.append((result.dense.data, s.gt, s.meta.get("family", "?")))
    report = training.MetricReport.from_rows(
        _parallel_rows(pairs, args.tau, args.backend))
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(report.to_text() + "\n")
    return 0


def _ablate_table(rows, label):
    header = f"{label:>14}{'CD':>10}{'DCD':>10}{'F1':>10}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(f"{name:>14}{r['cd_l1']:>10.4f}{r['dcd']:>10.4f}"
                     f"{r['f_score']:>10.4f}")
    return "\n".join(lines)


def cmd_ablate(args):
    model = _resolve_model(args)
    samples = oracle.load_split(args.data, args.split)
    rows = []
    if args.axis == "views":
        need = max(VIEW_SWEEP)
        have = min(len(s.views) for s in samples)
        if have < need:
            raise DatasetError(f"views axis needs {need} views per sample, "
                               f"dataset has {have}; re-synth with --views {need}")
        base_cfg = model.config
        try:
            for v in VIEW_SWEEP:
                model.config = replace(base_cfg, v_views=v)
                pairs = [(model.forward(s).dense.data, s.gt,
                          s.meta.get("family", "?")) for s in samples]
                report = training.MetricReport.from_rows(
                    _parallel_rows(pairs, args.tau, args.backend))
                rows.append((str(v), report.means))
        finally:
            model.config = base_cfg
        table = _ablate_table(rows, "views")
    elif args.axis == "keep":
        for k in KEEP_SWEEP:
            pairs = [(model.forward(s, keep_fraction=k).dense.data, s.gt,
                      s.meta.get("family", "?")) for s in samples]
            report = training.MetricReport.from_rows(
                _parallel_rows(pairs, args.tau, args.backend))
            rows.append((f"{k:.2f}", report.means))
        table = _ablate_table(rows, "keep")
    else:
        raise ConfigError(f"unknown ablation axis {args.axis!r}")
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablate_{args.axis}.txt").write_text(table + "\n")
        (out / f"ablate_{args.axis}.json").write_text(json.dumps(
            {name: r for name, r in rows}, indent=2))
    return 0


def cmd_metrics(args):
    a = oracle.read_xyzb(args.cloud_a)
    b = oracle.read_xyzb(args.cloud_b)
    row = training.metrics_row(a, b, tau=args.tau, backend=args.backend)
    row.pop("family")
    if args.json:
        print(json.dumps(row, indent=2))
    else:
        for k, v in row.items():
            print(f"{k} = {v:.6f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p):
    p.add_argument("--preset", choices=sorted(_PRESETS))
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    p.add_argument("--n-in", dest="n_in", type=int)
    p.add_argument("--views", dest="v_views", type=int)
    p.add_argument("--no-views", dest="no_views", action="store_true")


def _add_ckpt_flags(p):
    p.add_argument("--run", help="run directory holding run.cfg and checkpoints")
    p.add_argument("--ckpt", help="checkpoint file (or name inside --run)")
    p.add_argument("--preset", choices=sorted(_PRESETS),
                   help="model preset when loading a bare --ckpt")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cloudfill",
        description="point cloud completion: synth / train / infer / eval / "
                    "ablate / metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--profile", choices=sorted(oracle.PROFILES))
    p.add_argument("--views", dest="views", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-partial", dest="n_partial", type=int)
    p.add_argument("--n-gt", dest="n_gt", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a synthesized dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--config")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--init-from", dest="init_from",
                   help="warm-start weights from a checkpoint file")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run one sample through a checkpoint")
    _add_ckpt_flags(p)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_ckpt_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--backend", choices=("grid", "brute"), default="grid")
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep view count or keep fraction")
    _add_ckpt_flags(p)
    p.add_argument("--axis", required=True, choices=("views", "keep"))
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--backend", choices=("grid", "brute"), default="grid")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="metrics between two .xyzb clouds")
    p.add_argument("cloud_a")
    p.add_argument("cloud_b")
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--backend", choices=("grid", "brute"), default="grid")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, configparser.Error) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, SidecarError, CheckpointError, FileNotFoundError,
            geometry.EmptyCloudError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
