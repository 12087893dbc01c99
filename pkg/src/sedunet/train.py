"""MSE training with Adam, reduce-on-plateau, checkpoints and per-horizon metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from sedunet.data import HORIZON_NAMES, Dataset, FormatError, read_tensor, write_tensor
from sedunet.model import ModelConfig, SedUNet, select_outputs, select_outputs_backward
from sedunet.tensor import NonFiniteError, Prng

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "lr", "train_mse", "val_mse", "val_mse_u8",
                  *HORIZON_NAMES, "seconds"]


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    lr_floor: float = 1e-6
    lr_factor: float = 0.1
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_train_windows: int | None = None
    max_val_windows: int | None = None

    def __post_init__(self):
        if not self.lr_floor <= self.lr_init:
            raise ValueError("lr_floor must not exceed lr_init")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.plateau_patience < 1:
            raise ValueError("batch_size and plateau_patience must be positive, max_epochs non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- loss / optimizer / schedule

def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = diff * (pred.dtype.type(2.0) / pred.dtype.type(diff.size))
    return loss, grad


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place bias-corrected Adam update.

    ``params`` and ``grads`` are ``{name: array}`` dicts with matching keys.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.step + 1}: "
                                 f"max |g| = {np.nanmax(np.abs(g))}")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} differs from parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def epochs_since_improvement(history, min_delta) -> int:
    best, bad = None, 0
    for value in history:
        if best is None or value < best * (1 - min_delta):
            best, bad = value, 0
        else:
            bad += 1
    return bad


def plateau_schedule(history, current_lr, cfg: TrainConfig) -> float:
    """Cut lr by ``lr_factor`` after each run of ``plateau_patience`` stale epochs.

    An epoch counts as an improvement only if it beats the best so far by a
    relative margin of ``plateau_min_delta``. Never raises lr, never drops
    below ``lr_floor``.
    """
    bad = epochs_since_improvement(history, cfg.plateau_min_delta)
    if bad and bad % cfg.plateau_patience == 0:
        lr = current_lr * cfg.lr_factor
        # 1e-4 * 0.1 * 0.1 lands a rounding step above 1e-6; snap it onto the floor
        return cfg.lr_floor if lr <= cfg.lr_floor * (1 + 1e-9) else lr
    return current_lr


# ---------------------------------------------------------------- evaluation

def horizon_sq_errors(pred, target):
    """Per-horizon sums of squared error (float64) and element count per horizon."""
    diff = pred.astype(np.float64) - target
    per_h = np.square(diff).sum(axis=tuple(i for i in range(diff.ndim) if i != 1))
    return per_h, diff[:, 0].size


def evaluate(predict, dataset: Dataset, split: str, batch_size=8, limit=None) -> dict:
    """Per-horizon and overall MSE of ``predict(static, dynamic)`` over a split."""
    items = dataset.windows(split, limit)
    if not items:
        raise ValueError(f"split {split!r} has no windows")
    sums, count = np.zeros(len(HORIZON_NAMES)), 0
    for i in range(0, len(items), batch_size):
        static, dynamic, target = dataset.batch(items[i:i + batch_size])
        s, n = horizon_sq_errors(predict(static, dynamic), target)
        sums += s
        count += n
    per_h = sums / count
    out = dict(zip(HORIZON_NAMES, per_h.tolist()))
    out["mse"] = float(per_h.mean())
    out["mse_u8"] = out["mse"] * 255.0 ** 2
    out["windows"] = len(items)
    return out


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    tensors: dict
    meta: dict

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def save_checkpoint(path, ckpt: Checkpoint):
    """``u32 count``, then per entry ``u16 name length``, UTF-8 name, HXT1 tensor;
    finally ``u32 length`` + JSON metadata. All integers little-endian."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, t)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    Path(path).write_bytes(buf.getvalue())


def _read_exact(f, n, what):
    b = f.read(n)
    if len(b) < n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return b


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, n, "name").decode("utf-8")
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}")
            tensors[name] = read_tensor(f)
        (n,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        meta = json.loads(_read_exact(f, n, "metadata").decode("utf-8"))
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint metadata")
    return Checkpoint(tensors, meta)


def make_checkpoint(model: SedUNet, adam: AdamState | None, train_cfg: TrainConfig | None,
                    epoch=0, lr=None, history=()) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_tensors().items()}
    if adam is not None:
        for k in sorted(adam.m):
            tensors[f"adam.m.{k}"] = adam.m[k]
            tensors[f"adam.v.{k}"] = adam.v[k]
    meta = {
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "epoch": epoch,
        "lr": lr,
        "adam_step": adam.step if adam else 0,
        "history": list(history),
    }
    return Checkpoint(tensors, meta)


def restore_model(ckpt: Checkpoint, model: SedUNet | None = None) -> SedUNet:
    """Copy checkpointed weights and BN statistics into ``model`` (built from the
    checkpoint's config when omitted)."""
    if model is None:
        model = SedUNet(ModelConfig.from_dict(ckpt.meta["model_config"]))
    state = model.state_tensors()
    missing = [k for k in state if f"model.{k}" not in ckpt.tensors]
    if missing:
        raise KeyError(f"checkpoint is missing tensors: {', '.join(missing)}")
    for k, arr in state.items():
        src = ckpt.tensors[f"model.{k}"]
        if src.shape != arr.shape:
            raise ValueError(f"tensor {k}: checkpoint shape {src.shape}, model shape {arr.shape}")
        arr[...] = src
    return model


def restore_adam(ckpt: Checkpoint) -> AdamState:
    state = AdamState(step=int(ckpt.meta.get("adam_step", 0)))
    for name, t in ckpt.tensors.items():
        if name.startswith("adam.m."):
            state.m[name[len("adam.m."):]] = t.copy()
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v."):]] = t.copy()
    return state


# ---------------------------------------------------------------- fit

def train_step(model: SedUNet, static, dynamic, target, adam: AdamState, lr, cfg: TrainConfig):
    """One forward/backward/Adam update on a batch; returns the batch loss."""
    model.zero_grad()
    net_out = model.forward(static, dynamic, train=True)
    loss, g = mse_loss(select_outputs(net_out, model.cfg), target)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at step {adam.step + 1}")
    model.backward(select_outputs_backward(g, model.cfg, net_out))
    params, grads = {}, {}
    for name, p, gr in model.named_params():
        params[name], grads[name] = p, gr
    adam_step(params, grads, adam, lr, (cfg.beta1, cfg.beta2), cfg.eps)
    return loss


def _write_metrics_row(path: Path, row: dict):
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in METRIC_COLUMNS})


def fit(model: SedUNet, dataset: Dataset, cfg: TrainConfig, out_dir=None,
        resume: Checkpoint | None = None, callback=None):
    """Train ``model`` and return ``(last_checkpoint, history)``.

    Each epoch shuffles the training windows with a stream derived from
    ``(seed, epoch)``, so a resumed run sees the same batches as an
    uninterrupted one. ``callback(row)`` runs after every epoch; returning
    True stops training.
    """
    m = dataset.manifest
    mult = model.cfg.spatial_multiple
    if m["height"] % mult or m["width"] % mult:
        raise ValueError(f"dataset {m['height']}x{m['width']} is not divisible by 2^depth = {mult}")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        restore_model(resume, model)
        adam = restore_adam(resume)
        lr = float(resume.meta["lr"])
        history = list(resume.meta["history"])
        start = resume.epoch
    else:
        adam, lr, history, start = AdamState(), cfg.lr_init, [], 0

    train_items = dataset.windows("train", cfg.max_train_windows)
    if not train_items:
        raise ValueError("training split has no windows")
    base_rng = Prng(cfg.seed)
    best = min((r["val_mse"] for r in history), default=None)
    ckpt = None

    for epoch in range(start + 1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = base_rng.spawn(epoch).permutation(len(train_items))
        total, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_items[j] for j in order[i:i + cfg.batch_size]]
            static, dynamic, target = dataset.batch(batch)
            try:
                loss = train_step(model, static, dynamic, target, adam, lr, cfg)
            except (TrainingDiverged, NonFiniteError):
                if out:
                    save_checkpoint(out / "diverged.ckpt",
                                    make_checkpoint(model, adam, cfg, epoch - 1, lr, history))
                raise
            total += loss * len(batch)
            seen += len(batch)
        val = evaluate(model.predict, dataset, "val", limit=cfg.max_val_windows)
        row = {"epoch": epoch, "lr": lr, "train_mse": total / seen,
               "val_mse": val["mse"], "val_mse_u8": val["mse_u8"],
               **{h: val[h] for h in HORIZON_NAMES},
               "seconds": time.perf_counter() - t0}
        history.append(row)
        log.info("epoch %d lr %.1e train %.4e val %.4e", epoch, lr, row["train_mse"], row["val_mse"])
        lr = plateau_schedule([r["val_mse"] for r in history], lr, cfg)
        ckpt = make_checkpoint(model, adam, cfg, epoch, lr, history)
        if out:
            _write_metrics_row(out / "metrics.csv", row)
            save_checkpoint(out / "last.ckpt", ckpt)
            if best is None or row["val_mse"] < best:
                save_checkpoint(out / "best.ckpt", ckpt)
        if best is None or row["val_mse"] < best:
            best = row["val_mse"]
        if callback is not None and callback(row):
            break
    if ckpt is None:
        ckpt = make_checkpoint(model, adam, cfg, start, lr, history)
    return ckpt, history
