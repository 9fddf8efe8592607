"""Training loop: MSE loss on normalized images, AdamW with decoupled weight
decay, seeded shuffling/augmentation, per-epoch validation, and WITU
checkpointing (best validation PSNR and final state, optimizer moments
included so runs resume exactly).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError, TrainingDiverged
from . import tensor as T
from .data import augment, load_manifest, load_pair
from .metrics import MetricConfig, MetricReport, report
from .network import NetConfig, ParamStore, WiTUnet, forward, init_params, load_checkpoint, save_checkpoint
from .rng import Rng, derive_seed
from .tensor import Tensor


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 1
    seed: int = 0
    clip_norm: float | None = None
    lr_schedule: str = "none"  # or "cosine"
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.lr_schedule not in ("none", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    @classmethod
    def desk(cls, **overrides) -> "OptimConfig":
        kw = dict(epochs=50)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # (step, epoch, loss)
    epochs: list = field(default_factory=list)  # (epoch, psnr, ssim, rmse)
    wall_clock_s: float = 0.0
    seed: int = 0

    def steps_csv(self) -> str:
        lines = ["step,epoch,loss"]
        lines += [f"{s},{e},{v!r}" for s, e, v in self.steps]
        return "\n".join(lines) + "\n"

    def epochs_csv(self) -> str:
        lines = ["epoch,psnr,ssim,rmse"]
        lines += [f"{e},{p!r},{s!r},{r!r}" for e, p, s, r in self.epochs]
        return "\n".join(lines) + "\n"

    def save(self, log_dir: str) -> None:
        os.makedirs(log_dir, exist_ok=True)
        T.atomic_write_bytes(os.path.join(log_dir, "steps.csv"), self.steps_csv().encode())
        T.atomic_write_bytes(os.path.join(log_dir, "epochs.csv"), self.epochs_csv().encode())


def loss_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error between a prediction tensor and a constant target."""
    if tuple(pred.shape) != tuple(np.asarray(target).shape):
        raise ConfigError(f"loss shapes differ: {pred.shape} vs {np.asarray(target).shape}")
    diff = T.add(pred, T.neg(Tensor(np.asarray(target, dtype=pred.data.dtype.type))))
    return T.mean_all(T.mul(diff, diff))


def adamw_step(store: ParamStore, cfg: OptimConfig, t: int, lr: float | None = None) -> None:
    """One AdamW update at step t (1-based) over every parameter in the store.

    Decoupled decay first (theta *= 1 - lr*wd), then the bias-corrected
    moment update. Moments persist in store.opt_state.
    """
    if t < 1:
        raise StateError("adamw step index must be >= 1")
    lr = cfg.lr if lr is None else lr
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in store.items():
        if p.grad is None:
            raise StateError(f"adamw_step before backward: no gradient for {name!r}")
        g = p.grad
        slots = store.opt_state.setdefault(
            name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        )
        if cfg.weight_decay:
            p.data *= np.float32(1.0 - lr * cfg.weight_decay)
        slots["m"] = b1 * slots["m"] + (np.float32(1.0) - b1) * g
        slots["v"] = b2 * slots["v"] + (np.float32(1.0) - b2) * (g * g)
        m_hat = slots["m"] / np.float32(c1)
        v_hat = slots["v"] / np.float32(c2)
        p.data -= np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(cfg.eps))
    store.step = t


def _clip_gradients(store: ParamStore, max_norm: float) -> float:
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = np.float32(max_norm / norm)
        for _, p in store.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


def _max_grad_param(store: ParamStore) -> str:
    worst, worst_val = "<none>", -1.0
    for name, p in store.items():
        if p.grad is None:
            continue
        v = float(np.max(np.abs(p.grad)))
        if not math.isfinite(v):
            return name
        if v > worst_val:
            worst, worst_val = name, v
    return worst


def _lr_at(cfg: OptimConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, cfg.epochs)))
    return cfg.lr


def _validate(store: ParamStore, net_cfg: NetConfig, entries, metric_cfg: MetricConfig):
    pairs = []
    with T.no_grad():
        for entry in entries:
            pair = load_pair(entry)
            out = forward(Tensor(pair.ldct[None]), store, net_cfg).data[0]
            pairs.append((out, pair.fdct))
    rep = report(pairs, metric_cfg)
    agg = rep.aggregates()
    return agg["psnr"]["mean"], agg["ssim"]["mean"], agg["rmse"]["mean"]


def best_checkpoint_path(out_checkpoint: str) -> str:
    stem, ext = os.path.splitext(out_checkpoint)
    return f"{stem}_best{ext or '.witu'}"


def train(
    net_cfg: NetConfig,
    optim_cfg: OptimConfig,
    train_manifest: str,
    out_checkpoint: str,
    val_manifest: str | None = None,
    log_dir: str | None = None,
    resume: str | None = None,
    metric_cfg: MetricConfig = MetricConfig(),
) -> TrainLog:
    """Seeded end-to-end loop: shuffle, augment, forward, MSE, backward, AdamW.

    The shuffle/augment stream is re-derived per epoch from (seed, epoch), so
    resuming from an epoch-boundary checkpoint replays the exact remaining
    trajectory. Aborts loudly (TrainingDiverged) on a non-finite loss.
    """
    entries = load_manifest(train_manifest)
    val_entries = load_manifest(val_manifest) if val_manifest else None

    start_epoch = 0
    best_psnr = -math.inf
    if resume:
        ck_cfg, store, extras = load_checkpoint(resume)
        if ck_cfg != net_cfg:
            raise ConfigError("resume checkpoint config differs from the requested config")
        start_epoch = int(extras.get("train.epoch", 0))
        best_psnr = float(extras.get("train.best_psnr", -math.inf))
    else:
        store = init_params(net_cfg, seed=derive_seed(optim_cfg.seed, 0xC0FFEE))

    log = TrainLog(seed=optim_cfg.seed)
    step = store.step
    started = time.monotonic()
    for epoch in range(start_epoch, optim_cfg.epochs):
        rng = Rng(derive_seed(optim_cfg.seed, 1000 + epoch))
        order = list(range(len(entries)))
        rng.shuffle(order)
        lr = _lr_at(optim_cfg, epoch)
        for idx in order:
            pair = load_pair(entries[idx])
            if optim_cfg.augment:
                pair = augment(pair, rng)
            store.zero_grad()
            pred = forward(Tensor(pair.ldct[None]), store, net_cfg)
            loss = loss_mse(pred, pair.fdct[None])
            loss_val = loss.item()
            step += 1
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    step,
                    _max_grad_param(store),
                    f"loss became {loss_val} at step {step}; largest-gradient "
                    f"parameter so far: {_max_grad_param(store)}",
                )
            loss.backward()
            if optim_cfg.clip_norm:
                _clip_gradients(store, optim_cfg.clip_norm)
            adamw_step(store, optim_cfg, step, lr=lr)
            log.steps.append((step, epoch, loss_val))
        if val_entries:
            p, s, r = _validate(store, net_cfg, val_entries, metric_cfg)
            log.epochs.append((epoch, p, s, r))
            if p > best_psnr:
                best_psnr = p
                save_checkpoint(
                    best_checkpoint_path(out_checkpoint), net_cfg, store,
                    extra_scalars={"train.epoch": epoch + 1, "train.best_psnr": best_psnr},
                )
        save_checkpoint(
            out_checkpoint, net_cfg, store,
            extra_scalars={"train.epoch": epoch + 1, "train.best_psnr": best_psnr},
        )
    log.wall_clock_s = time.monotonic() - started
    if log_dir:
        log.save(log_dir)
    return log


@dataclass
class EvalResult:
    model: MetricReport
    baseline: MetricReport
    denoised: list = field(default_factory=list)


def evaluate(checkpoint: str, manifest: str, metric_cfg: MetricConfig = MetricConfig(),
             keep_outputs: bool = False) -> EvalResult:
    """Denoise every pair in the manifest; report model-vs-target metrics and
    the untouched noisy-input baseline."""
    net = WiTUnet.from_checkpoint(checkpoint)
    entries = load_manifest(manifest)
    model_pairs, baseline_pairs, outputs = [], [], []
    for entry in entries:
        pair = load_pair(entry)
        out = net.denoise(pair.ldct)
        model_pairs.append((out, pair.fdct))
        baseline_pairs.append((pair.ldct, pair.fdct))
        if keep_outputs:
            outputs.append(out)
    return EvalResult(
        model=report(model_pairs, metric_cfg),
        baseline=report(baseline_pairs, metric_cfg),
        denoised=outputs,
    )
