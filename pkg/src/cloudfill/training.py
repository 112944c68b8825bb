"""Loss assembly, optimizer, training loop, and evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import geometry, views
from . import tensor as T
from .tensor import ParamStore, Tensor
from .network import CompletionModel


class NumericAbort(FloatingPointError):
    def __init__(self, epoch, batch, detail):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch
        self.detail = detail


# ---------------------------------------------------------------------------
# differentiable losses


def chamfer_l2_t(a, b):
    """Differentiable squared-distance Chamfer between Tensors/arrays."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float32))
    d = T.pairwise_sqdist(a, b)
    return T.add(T.mean(T.min_(d, axis=1)), T.mean(T.min_(d, axis=0)))


def hyper_cd_t(a, b):
    return T.arcosh1p(chamfer_l2_t(a, b))


def total_loss(p_c, p_r, g, n_coarse):
    """Coarse + dense hyperbolic Chamfer terms against the ground truth."""
    g = np.asarray(g, dtype=np.float64)
    if n_coarse > len(g):
        raise ValueError("total_loss: n_coarse exceeds ground-truth size")
    g_coarse = g[geometry.farthest_point_sample(g, n_coarse,
                                                start=geometry.centroid_start(g))]
    return T.add(hyper_cd_t(p_c, g_coarse), hyper_cd_t(p_r, g))


def confidence_loss(scores, coarse_pts, g):
    """Auxiliary supervision for the scorer (hard top-k passes no gradient).

    Target: 1 for coarse points whose GT residual is below the median,
    0 otherwise; squared error against the sigmoid scores.
    """
    d, _ = geometry.nn_bruteforce(coarse_pts, g)
    target = (d <= np.median(d)).astype(np.float32)
    diff = T.sub(scores, Tensor(target))
    return T.mean(T.mul(diff, diff))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment optimizer; state round-trips through checkpoints."""

    def __init__(self, store: ParamStore, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p: np.zeros_like(t.data) for p, t in store.items()}
        self.v = {p: np.zeros_like(t.data) for p, t in store.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for path, tens in self.store.items():
            g = tens.grad
            if g is None:
                continue
            m = self.m[path]
            v = self.v[path]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps))
            tens.data = (tens.data - update).astype(np.float32)

    def save(self, path):
        state = ParamStore()
        for name, m in self.m.items():
            state._params[f"m/{name}"] = Tensor(m)
        for name, v in self.v.items():
            state._params[f"v/{name}"] = Tensor(v)
        state._params["t"] = Tensor(np.array([self.t], dtype=np.float32))
        state.save(path)

    def load(self, path):
        state = ParamStore.load(path)
        for name in self.m:
            self.m[name] = state[f"m/{name}"].data.astype(np.float32).copy()
            self.v[name] = state[f"v/{name}"].data.astype(np.float32).copy()
        self.t = int(state["t"].data[0])


def clip_gradients(store, max_norm):
    """Global-norm gradient clipping; returns the pre-clip norm."""
    total = 0.0
    for _, tens in store.items():
        if tens.grad is not None:
            total += float(np.sum(tens.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = np.float32(max_norm / (norm + 1e-12))
        for _, tens in store.items():
            if tens.grad is not None:
                tens.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay_factor: float = 0.7
    lr_decay_every: int = 20
    seed: int = 0
    grad_clip: float = 5.0
    conf_weight: float = 0.2
    loss_gt_points: int = 4096   # GT downsample for the dense loss term; 0 = full
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must lie in (0,1]")

    def lr_at(self, epoch):
        """Step-decay schedule; epochs count from 1."""
        return self.lr * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


def reference_train_config(**overrides):
    """Full-scale schedule used for long runs on large datasets."""
    base = TrainConfig(epochs=300, batch_size=24, lr=1e-4,
                       lr_decay_factor=0.7, lr_decay_every=40)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# training loop


def _sample_loss(model, sample, cfg, gt_cache):
    sid = id(sample)
    if sid not in gt_cache:
        g = sample.gt
        if cfg.loss_gt_points and len(g) > cfg.loss_gt_points:
            idx = geometry.farthest_point_sample(g, cfg.loss_gt_points,
                                                 start=geometry.centroid_start(g))
            g = g[idx]
        gt_cache[sid] = g
    g = gt_cache[sid]
    result = model.forward(sample)
    loss = total_loss(result.coarse, result.dense, g, model.config.n_coarse)
    if cfg.conf_weight > 0:
        aux = confidence_loss(result.scores, result.coarse.data, g)
        loss = T.add(loss, T.scale(aux, cfg.conf_weight))
    return loss, result


def _val_cd(model, samples):
    vals = []
    for s in samples:
        r = model.forward(s)
        vals.append(geometry.chamfer_l1(r.dense.data, s.gt, backend="brute"))
    return float(np.mean(vals)) if vals else float("nan")


def train(model: CompletionModel, train_samples, val_samples, cfg: TrainConfig,
          run_dir=None, resume=False, log=None):
    """Train in place; returns the per-epoch history.

    With `run_dir`, writes `curve.csv`, per-state checkpoints, and a
    `state.json` enabling bit-exact resume (single-threaded).
    """
    if not train_samples:
        raise ValueError("train: empty dataset")
    run_dir = Path(run_dir) if run_dir else None
    opt = Adam(model.params, lr=cfg.lr)
    history = []
    start_epoch = 1
    best_val = float("inf")
    if resume:
        if run_dir is None:
            raise ValueError("resume requires a run directory")
        state = json.loads((run_dir / "state.json").read_text())
        model.load(run_dir / "ckpt_last.pckpt")
        opt.load(run_dir / "opt_last.pckpt")
        start_epoch = state["epoch"] + 1
        best_val = state.get("best_val", float("inf"))
        with open(run_dir / "curve.csv") as f:
            for row in csv.DictReader(f):
                history.append({k: float(v) for k, v in row.items()})
    gt_cache = {}
    order = np.arange(len(train_samples))
    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        opt.lr = lr
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        perm = rng.permutation(order)
        losses = []
        for b, lo in enumerate(range(0, len(perm), cfg.batch_size)):
            batch = perm[lo:lo + cfg.batch_size]
            model.params.zero_grad()
            batch_loss = 0.0
            for i in batch:
                loss, result = _sample_loss(model, train_samples[int(i)], cfg, gt_cache)
                if not np.isfinite(loss.data):
                    detail = _diagnose(result)
                    raise NumericAbort(epoch, b, detail)
                T.scale(loss, 1.0 / len(batch)).backward()
                batch_loss += loss.item() / len(batch)
            clip_gradients(model.params, cfg.grad_clip)
            opt.step()
            losses.append(batch_loss)
        val_loss = float("nan")
        if val_samples:
            val_loss = _val_cd(model, val_samples)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "val_loss": val_loss, "lr": lr}
        history.append(entry)
        if log:
            log(f"epoch {epoch:4d}  train {entry['train_loss']:.5f}  "
                f"val_cd {val_loss:.5f}  lr {lr:.2e}")
        if run_dir and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            model.save(run_dir / "ckpt_last.pckpt")
            opt.save(run_dir / "opt_last.pckpt")
            if val_samples and val_loss < best_val:
                best_val = val_loss
                model.save(run_dir / "ckpt_best.pckpt")
            (run_dir / "state.json").write_text(json.dumps(
                {"epoch": epoch, "best_val": best_val}))
            _write_curve(run_dir / "curve.csv", history)
    return history


def _diagnose(result):
    for name in ("coarse", "dense", "scores", "f_fusion"):
        t = getattr(result, name)
        if t is not None and not np.all(np.isfinite(t.data)):
            return f"first non-finite stage: {name}"
    return "loss non-finite with finite stage outputs"


def _write_curve(path, history):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
        writer.writeheader()
        for row in history:
            out = {k: row[k] for k in writer.fieldnames}
            out["epoch"] = int(out["epoch"])
            writer.writerow(out)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricReport:
    rows: list                       # per-sample dicts (family + metrics)
    means: dict = field(default_factory=dict)
    per_family: dict = field(default_factory=dict)

    METRICS = ("cd_l1", "cd_l2", "hyper_cd", "dcd", "f_score")

    @classmethod
    def from_rows(cls, rows):
        report = cls(rows=rows)
        report.means = {m: float(np.mean([r[m] for r in rows])) for m in cls.METRICS}
        fams = sorted({r.get("family", "?") for r in rows})
        report.per_family = {
            fam: {m: float(np.mean([r[m] for r in rows if r.get("family", "?") == fam]))
                  for m in cls.METRICS}
            for fam in fams}
        return report

    def to_json(self):
        return json.dumps({"means": self.means, "per_family": self.per_family,
                           "rows": self.rows}, indent=2)

    def to_text(self):
        header = f"{'group':<14}" + "".join(f"{m:>10}" for m in self.METRICS)
        lines = [header, "-" * len(header)]
        for fam, vals in self.per_family.items():
            lines.append(f"{fam:<14}" + "".join(f"{vals[m]:>10.4f}" for m in self.METRICS))
        lines.append(f"{'mean':<14}" + "".join(f"{self.means[m]:>10.4f}"
                                               for m in self.METRICS))
        return "\n".join(lines)


def metrics_row(pred, gt, tau=0.01, family="?", backend="brute"):
    """Per-sample metric dict; CD values carry the x1000 reporting scale."""
    m = geometry.all_metrics(pred, gt, tau=tau, backend=backend)
    return {"family": family,
            "cd_l1": 1000.0 * m["cd_l1"], "cd_l2": 1000.0 * m["cd_l2"],
            "hyper_cd": m["hyper_cd"], "dcd": m["dcd"], "f_score": m["f_score"]}


def evaluate(model, samples, tau=0.01, keep_fraction=None, backend="brute"):
    rows = []
    for s in samples:
        result = model.forward(s, keep_fraction=keep_fraction)
        rows.append(metrics_row(result.dense.data, s.gt, tau=tau,
                                family=s.meta.get("family", "?"), backend=backend))
    return MetricReport.from_rows(rows)


# ---------------------------------------------------------------------------
# non-learned baselines


def baseline_merge(sample, n_out, seed=0):
    """Partial plus back-projected views, FPS'd to the output budget."""
    clouds = [np.asarray(sample.partial, dtype=np.float64)]
    for v in sample.views:
        clouds.append(views.back_project(v, seed=seed))
    merged = np.concatenate(clouds, axis=0)
    if len(merged) <= n_out:
        return merged
    idx = geometry.farthest_point_sample(merged, n_out,
                                         start=geometry.centroid_start(merged))
    return merged[idx]


def baseline_passthrough(sample):
    return np.asarray(sample.partial, dtype=np.float64)
