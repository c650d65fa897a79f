"""Training loops: adaptive-moment training plus stochastic weight averaging.

The main phase trains for a fixed number of epochs with Adam. Every epoch
re-pairs the training volumes with a fresh epoch seed and synthesizes
interpolation samples on the fly, so no sample is ever reused across
epochs. The optional averaging phase runs plain SGD with a learning rate
that decays linearly within each epoch, snapshots the weights at each
epoch's minimum, and averages the snapshots into the final model.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericError, UsageError
from .network import FpiModel, save_checkpoint, training_loss
from .rng import SeededRng
from .synth import AlphaMode, batch_arrays, make_training_batch
from .volume import DatasetManifest, Volume, pair_slices

# Offsets keeping the averaging phase's seed children disjoint from the
# main phase's per-epoch children.
_SWA_EPOCH_BASE = 1_000_000
_REFRESH_EPOCH = 2_000_000


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 16
    mode: AlphaMode = AlphaMode.CONTINUOUS
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    swa_epochs: int = 10
    swa_lr_high: float = 1e-3
    swa_lr_low: float = 1e-4

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = AlphaMode(self.mode)
        if self.lr < 0:
            raise UsageError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise UsageError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.swa_epochs < 0:
            raise UsageError("epoch counts must be >= 0")
        if not self.swa_lr_low < self.swa_lr_high:
            raise UsageError(
                f"SWA lr range must satisfy low < high, got "
                f"[{self.swa_lr_low}, {self.swa_lr_high}]"
            )


def _epoch_batches(manifest: DatasetManifest, epoch_rng: SeededRng, config: TrainConfig,
                   cache: dict[str, Volume]):
    """Pair and shuffle this epoch's slice pairs, yield (batch_index, window)."""
    pairs = pair_slices(manifest, epoch_rng.seed, cache)
    order = epoch_rng.child(0).gen.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    for b in range(0, len(shuffled), config.batch_size):
        yield b // config.batch_size, shuffled[b : b + config.batch_size]


def _batch_tensors(window, batch_rng: SeededRng, config: TrainConfig):
    samples = make_training_batch(window, batch_rng, config.mode, len(window))
    images, labels = batch_arrays(samples)
    x = torch.from_numpy(images)
    y = torch.from_numpy(labels)
    return x, y


def _check_finite(loss: torch.Tensor, epoch: int, batch: int):
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite loss {float(loss.detach())!r} at epoch {epoch} batch {batch}; aborting"
        )


def train(
    manifest: DatasetManifest,
    model: FpiModel,
    config: TrainConfig,
    log_path: str | None = None,
    epoch_callback=None,
) -> list[dict]:
    """Train ``model`` in place; returns the per-epoch log records.

    Single-threaded runs are bit-reproducible for a fixed seed. A non-finite
    loss aborts with a diagnostic rather than training onward.
    """
    root = SeededRng(config.seed)
    cache: dict[str, Volume] = {}
    opt = torch.optim.Adam(
        model.module.parameters(), lr=config.lr,
        betas=config.adam_betas, eps=config.adam_eps,
    )
    log: list[dict] = []
    log_file = None
    if log_path:
        os.makedirs(os.path.dirname(log_path) or ".", exist_ok=True)
        log_file = open(log_path, "w")
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            epoch_rng = root.child(epoch)
            total, count = 0.0, 0
            for b, window in _epoch_batches(manifest, epoch_rng, config, cache):
                x, y = _batch_tensors(window, epoch_rng.child(1 + b), config)
                opt.zero_grad(set_to_none=True)
                loss = training_loss(model, x, y, config.mode)
                _check_finite(loss, epoch, b)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(window)
                count += len(window)
            record = {
                "epoch": epoch,
                "mean_loss": total / max(count, 1),
                "lr": config.lr,
                "wall_time_s": time.perf_counter() - t0,
            }
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if epoch_callback:
                epoch_callback(model, epoch, record)
    finally:
        if log_file:
            log_file.close()
    return log


@dataclass
class SwaResult:
    snapshot_paths: list[str] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)


def _epoch_lr(step: int, steps: int, high: float, low: float) -> float:
    """Linear decay from high to low across one epoch, reset each epoch.

    The final step returns ``low`` exactly, so every epoch's trace has
    exactly one minimum at the configured floor.
    """
    if steps <= 1 or step >= steps - 1:
        return low
    return high + (low - high) * (step / (steps - 1))


def _average_snapshots(model: FpiModel, snapshots: list[dict]):
    """Load the elementwise mean of the snapshots into ``model``.

    Float tensors are averaged; integer buffers (batch counters) are taken
    from the last snapshot since the statistics refresh recomputes them.
    """
    state = {}
    for name in snapshots[0]:
        tensors = [s[name] for s in snapshots]
        if tensors[0].dtype.is_floating_point:
            state[name] = torch.stack([t.double() for t in tensors]).mean(0).to(tensors[0].dtype)
        else:
            state[name] = tensors[-1].clone()
    model.module.load_state_dict(state)


def refresh_norm_stats(model: FpiModel, manifest: DatasetManifest, config: TrainConfig,
                       cache: dict[str, Volume] | None = None):
    """Recompute normalization running statistics with one data pass.

    Needed after weight averaging: the averaged weights produce activation
    distributions that none of the snapshots' running estimates describe.
    """
    momenta = {}
    for m in model.module.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.reset_running_stats()
            momenta[m] = m.momentum
            m.momentum = None  # cumulative moving average
    if not momenta:
        return
    root = SeededRng(config.seed)
    epoch_rng = root.child(_REFRESH_EPOCH)
    model.module.train()
    if cache is None:
        cache = {}
    with torch.no_grad():
        for b, window in _epoch_batches(manifest, epoch_rng, config, cache):
            x, _ = _batch_tensors(window, epoch_rng.child(1 + b), config)
            model.module(x)
    for m, momentum in momenta.items():
        m.momentum = momentum


def swa_finetune(
    model: FpiModel,
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: str,
) -> SwaResult:
    """Averaging phase: cyclic-rate SGD, one snapshot per epoch, then average.

    The learning rate sweeps linearly from ``swa_lr_high`` to ``swa_lr_low``
    within every epoch; weights are snapshotted each time the rate reaches
    its minimum (once per epoch, at the last step). The final model is the
    elementwise mean of the snapshots, followed by a normalization-statistics
    refresh pass. ``model`` is updated in place.
    """
    os.makedirs(out_dir, exist_ok=True)
    root = SeededRng(config.seed)
    cache: dict[str, Volume] = {}
    opt = torch.optim.SGD(model.module.parameters(), lr=config.swa_lr_high, momentum=0.0)
    result = SwaResult()
    snapshots: list[dict] = []
    for e in range(config.swa_epochs):
        t0 = time.perf_counter()
        epoch_rng = root.child(_SWA_EPOCH_BASE + e)
        windows = list(_epoch_batches(manifest, epoch_rng, config, cache))
        total, count = 0.0, 0
        for b, window in windows:
            lr = _epoch_lr(b, len(windows), config.swa_lr_high, config.swa_lr_low)
            for group in opt.param_groups:
                group["lr"] = lr
            result.lr_trace.append(lr)
            x, y = _batch_tensors(window, epoch_rng.child(1 + b), config)
            opt.zero_grad(set_to_none=True)
            loss = training_loss(model, x, y, config.mode)
            _check_finite(loss, e, b)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(window)
            count += len(window)
        snapshot = {k: v.detach().clone() for k, v in model.module.state_dict().items()}
        snapshots.append(snapshot)
        path = os.path.join(out_dir, f"swa_snapshot_{e:02d}.ckpt")
        save_checkpoint(model, path)
        result.snapshot_paths.append(path)
        result.log.append({
            "epoch": e,
            "mean_loss": total / max(count, 1),
            "lr": config.swa_lr_low,
            "wall_time_s": time.perf_counter() - t0,
        })
    _average_snapshots(model, snapshots)
    refresh_norm_stats(model, manifest, config, cache)
    return result


def reference_adam_step(theta, m, v, grad, step, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar adaptive-moment update, for verifying the optimizer.

    step is 1-based. Returns (theta, m, v) after one update.
    """
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v
