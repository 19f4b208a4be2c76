"""Intensity-weighted MAE+MSE loss, Adam with coupled L2 decay, global-norm clipping and SWA."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, as_tensor, backward, make_result
from .data import Batch, DatasetWindow, denormalize, make_batch
from .fileformat import save_checkpoint
from .model import ModelConfig, ModelParams, forward, init_params

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    grad_clip_norm: float = 1.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    swa_start_fraction: float = 0.75
    swa_every_steps: int = 5
    batch_size: int = 4
    total_steps: int = 300
    seed: int = 0
    bmae_breakpoints: tuple[float, ...] = (12.0, 18.0, 23.0)
    bmae_weights: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0)
    loss_smoothing: float = 0.9
    checkpoint_every: int = 0  # 0: only final checkpoints

    def __post_init__(self):
        if not 0.0 <= self.swa_start_fraction < 1.0:
            raise ValueError("swa_start_fraction must lie in [0, 1)")
        if self.grad_clip_norm <= 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("grad_clip_norm, batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")


def bmae_pixel_weights(truth_dbz, breakpoints: Sequence[float], weights: Sequence[float]) -> np.ndarray:
    """Piecewise-constant weight by ground-truth reflectivity; a pixel at a breakpoint takes the upper weight."""
    bp = np.asarray(breakpoints, dtype=np.float64)
    if len(weights) != len(bp) + 1:
        raise ValueError(f"{len(weights)} weights for {len(bp)} breakpoints")
    if np.any(np.diff(bp) <= 0):
        raise ValueError("breakpoints must be strictly increasing")
    truth = truth_dbz.data if isinstance(truth_dbz, Tensor) else np.asarray(truth_dbz)
    idx = np.searchsorted(bp, truth, side="right")
    return np.asarray(weights, dtype=np.float64)[idx].astype(truth.dtype if truth.dtype.kind == "f" else np.float64)


def weighted_mae_mse_loss(pred: Tensor, truth, w) -> Tensor:
    """mean(w * (|pred - truth| + (pred - truth)^2) / 2)."""
    truth = as_tensor(truth)
    w_arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    if pred.shape != truth.shape or w_arr.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, truth {truth.shape}, weights {w_arr.shape}")
    d = pred.data - truth.data
    n = d.size
    out = np.asarray((w_arr * (np.abs(d) + d * d)).sum() / (2.0 * n), dtype=pred.dtype)

    def grad_fn(g):
        gp = g * w_arr * (np.sign(d) + 2.0 * d) / (2.0 * n)
        return gp.astype(pred.dtype, copy=False), -gp.astype(truth.dtype, copy=False)

    return make_result(out, (pred, truth), grad_fn, "weighted_mae_mse_loss")


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the scale."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return 1.0
    s = max_norm / norm
    for g in grads:
        g *= g.dtype.type(s)
    return s


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    swa_avg: dict[str, np.ndarray] = field(default_factory=dict)
    swa_count: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype, copy=False)


def swa_update(state: OptimizerState, params: ModelParams) -> None:
    n = state.swa_count
    for name, p in params.items():
        src = p.data.astype(np.float64)
        if n == 0:
            state.swa_avg[name] = src.copy()
        else:
            avg = state.swa_avg[name]
            avg += (src - avg) / (n + 1)
    state.swa_count = n + 1


def swa_finalize(state: OptimizerState) -> ModelParams:
    if state.swa_count == 0:
        raise TrainingError("no SWA snapshot has been taken")
    return {name: Tensor(avg.copy(), name=name) for name, avg in state.swa_avg.items()}


def cast_params(params: ModelParams, dtype) -> ModelParams:
    return {k: Tensor(p.data.astype(dtype), name=k) for k, p in params.items()}


def swa_due(step: int, cfg: TrainConfig) -> bool:
    start = int(np.floor(cfg.swa_start_fraction * cfg.total_steps))
    return step > start and (step - start) % max(cfg.swa_every_steps, 1) == 0


@dataclass
class TrainResult:
    params: ModelParams
    swa_params: ModelParams | None
    raw_losses: list[float]
    smoothed_losses: list[float]

    def write_loss_csv(self, path) -> None:
        write_loss_csv(path, self.raw_losses, self.smoothed_losses)


def write_loss_csv(path, raw: Sequence[float], smoothed: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "raw_loss", "smoothed_loss"])
        for i, (r, s) in enumerate(zip(raw, smoothed), start=1):
            wr.writerow([i, repr(float(r)), repr(float(s))])


def loss_and_grads(params: ModelParams, config: ModelConfig, batch, cfg: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    weights = bmae_pixel_weights(batch.targets_dbz, cfg.bmae_breakpoints, cfg.bmae_weights)
    with Tape() as tape:
        pred = forward(batch.inputs, params, config, batch.hrrr)
        loss = weighted_mae_mse_loss(pred, Tensor(batch.targets), weights)
    backward(loss, tape)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return loss.item(), grads


def train_loop(
    config: ModelConfig,
    windows: list[DatasetWindow],
    cfg: TrainConfig,
    params: ModelParams | None = None,
    out_dir=None,
) -> TrainResult:
    """Adam + clipping + SWA over batches sampled from ``windows``.

    With ``out_dir`` set, writes periodic checkpoints, ``final.msnc``,
    ``swa.msnc`` (when SWA ran) and ``loss.csv``.
    """
    if not windows:
        raise TrainingError("empty training set")
    config.validate()
    if params is None:
        params = init_params(config, cfg.seed)
    full = make_batch(windows, config)
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    raw, smooth = [], []
    bs = min(cfg.batch_size, len(windows))
    for step in range(1, cfg.total_steps + 1):
        idx = np.sort(rng.choice(len(windows), size=bs, replace=False))
        batch = _subset(full, idx)
        try:
            loss, grads = loss_and_grads(params, config, batch, cfg)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite values at step {step}: {exc}") from exc
        if not np.isfinite(loss):
            raise TrainingError(f"loss became {loss} at step {step}")
        clip_global_norm(list(grads.values()), cfg.grad_clip_norm)
        adam_step(params, grads, state, cfg)
        for p in params.values():
            p.zero_grad()
            p.requires_grad = False
        if swa_due(step, cfg):
            swa_update(state, params)
        raw.append(loss)
        smooth.append(loss if not smooth else cfg.loss_smoothing * smooth[-1] + (1 - cfg.loss_smoothing) * loss)
        if step % 50 == 0:
            log.info("step %d loss %.5f smoothed %.5f", step, loss, smooth[-1])
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_step{step:06d}.msnc", params)
    swa = swa_finalize(state) if state.swa_count else None
    if swa is not None:
        swa = cast_params(swa, next(iter(params.values())).dtype)
    result = TrainResult(params, swa, raw, smooth)
    if out is not None:
        save_checkpoint(out / "final.msnc", params)
        if swa is not None:
            save_checkpoint(out / "swa.msnc", swa)
        result.write_loss_csv(out / "loss.csv")
    return result


def _subset(batch: Batch, idx) -> Batch:
    return Batch(
        inputs=batch.inputs[idx],
        targets=batch.targets[idx],
        targets_dbz=batch.targets_dbz[idx],
        hrrr=None if batch.hrrr is None else batch.hrrr[idx],
        last_input_dbz=batch.last_input_dbz[idx],
    )


def predict(params: ModelParams, config: ModelConfig, windows: list[DatasetWindow], batch_size: int = 8) -> np.ndarray:
    """Forecasts in dBZ, [N, T_o, S, S]."""
    outs = []
    for i in range(0, len(windows), batch_size):
        b = make_batch(windows[i : i + batch_size], config)
        y = forward(b.inputs, params, config, b.hrrr)
        outs.append(denormalize(np.clip(y.data[:, :, 0], 0.0, 1.0)))
    return np.concatenate(outs).astype(np.float32)
