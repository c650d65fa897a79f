"""Wide-residual encoder-decoder and its pixel-wise losses.

The encoder is a wide residual network (pre-activation blocks, two 3x3
convolutions per block); the decoder mirrors it in reverse with
nearest-neighbor upsampling before each stage. The terminating activation
is a sigmoid for scalar interpolation-factor regression or a softmax over
the five discrete factor classes.

Weighted-layer count (stem + encoder block convs + output projection) is 14
for the standard 3-stage configuration and 16 for the large-input variant
with one extra residual block.

torch supplies the tensor ops and autograd; everything here is CPU-friendly
and deterministic given seeds and a fixed thread count.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericError, UsageError
from .rng import SeededRng
from .synth import AlphaMode, DISCRETE_ALPHAS

LOG_EPS = 1e-7  # clamp inside the losses so log never sees 0

HEAD_SIGMOID = "sigmoid"
HEAD_SOFTMAX = "softmax"


def head_for_mode(mode: AlphaMode) -> str:
    return HEAD_SOFTMAX if mode is AlphaMode.DISCRETE else HEAD_SIGMOID


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; all sizes are validated at construction.

    ``downsamples`` counts the stride-2 reductions in the encoder. With one
    per stage the stem has stride 1; with stages+1 the stem is also strided
    (the full-scale arrangement). The decoder mirrors whatever is chosen.
    """

    input_size: int
    head: str = HEAD_SIGMOID
    num_classes: int = 5
    stem_width: int = 16
    stage_widths: tuple[int, ...] = (64, 128, 256)
    stage_blocks: tuple[int, ...] = (2, 2, 2)
    downsamples: int | None = None

    def __post_init__(self):
        if self.head not in (HEAD_SIGMOID, HEAD_SOFTMAX):
            raise UsageError(f"unknown head {self.head!r}")
        if len(self.stage_widths) != len(self.stage_blocks):
            raise UsageError("stage_widths and stage_blocks must have equal length")
        if min(self.stage_blocks) < 1 or min(self.stage_widths) < 1:
            raise UsageError("stage widths/blocks must be positive")
        ds = self.n_downsamples
        n = len(self.stage_blocks)
        if ds not in (n, n + 1):
            raise UsageError(f"downsamples must be {n} or {n + 1} for {n} stages")
        if self.input_size % (2**ds) != 0 or self.input_size < 2**ds:
            raise UsageError(
                f"input size {self.input_size} not divisible by 2^{ds}"
            )
        if self.head == HEAD_SOFTMAX and self.num_classes != len(DISCRETE_ALPHAS):
            raise UsageError(
                f"softmax head uses {len(DISCRETE_ALPHAS)} classes, got {self.num_classes}"
            )

    @property
    def n_downsamples(self) -> int:
        return len(self.stage_blocks) + 1 if self.downsamples is None else self.downsamples

    @property
    def stem_strided(self) -> bool:
        return self.n_downsamples == len(self.stage_blocks) + 1

    @property
    def depth(self) -> int:
        """Weighted layers counted over stem + encoder blocks + projection."""
        return 2 * sum(self.stage_blocks) + 2

    @property
    def out_channels(self) -> int:
        return 1 if self.head == HEAD_SIGMOID else self.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["stage_blocks"] = list(self.stage_blocks)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("stage_widths", "stage_blocks"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(int(x) for x in kwargs[key])
        return cls(**kwargs)

    @classmethod
    def wide(cls, input_size: int, head: str = HEAD_SIGMOID, width_factor: int = 4,
             base_widths: tuple[int, ...] = (16, 32, 64),
             stage_blocks: tuple[int, ...] = (2, 2, 2),
             stem_width: int = 16) -> "ModelConfig":
        return cls(
            input_size=input_size,
            head=head,
            stem_width=stem_width,
            stage_widths=tuple(w * width_factor for w in base_widths),
            stage_blocks=stage_blocks,
        )

    @classmethod
    def full256(cls, head: str = HEAD_SIGMOID) -> "ModelConfig":
        """Width-4, depth-14 configuration for 256x256 inputs."""
        return cls.wide(256, head)

    @classmethod
    def full512(cls, head: str = HEAD_SIGMOID) -> "ModelConfig":
        """512x512 variant: one extra residual block brings the depth to 16."""
        return cls.wide(512, head, base_widths=(16, 32, 64, 128),
                        stage_blocks=(2, 2, 2, 1))

    @classmethod
    def desk64(cls, head: str = HEAD_SIGMOID) -> "ModelConfig":
        """Narrow 64x64 configuration, same topology, sized for CPU runs."""
        return cls(input_size=64, head=head, stem_width=12, stage_widths=(12, 24, 48))


class _PreactBlock(nn.Module):
    """Pre-activation residual block: BN-ReLU-conv, BN-ReLU-conv, additive skip."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        h = F.relu(self.bn1(x))
        s = self.skip(h) if self.skip is not None else x
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h)))
        return h + s


class _Upsample(nn.Module):
    def forward(self, x):
        return F.interpolate(x, scale_factor=2, mode="nearest")


class _EncoderDecoder(nn.Module):
    """Logit-producing module; head activation is applied by callers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stem = nn.Conv2d(
            1, cfg.stem_width, 3, stride=2 if cfg.stem_strided else 1,
            padding=1, bias=False,
        )
        enc = []
        cin = cfg.stem_width
        for width, blocks in zip(cfg.stage_widths, cfg.stage_blocks):
            enc.append(_PreactBlock(cin, width, stride=2))
            for _ in range(blocks - 1):
                enc.append(_PreactBlock(width, width))
            cin = width
        self.encoder = nn.Sequential(*enc)

        dec = []
        widths = list(cfg.stage_widths)
        blocks = list(cfg.stage_blocks)
        for i in reversed(range(len(widths))):
            w = widths[i]
            nxt = widths[i - 1] if i > 0 else cfg.stem_width
            dec.append(_Upsample())
            for _ in range(blocks[i] - 1):
                dec.append(_PreactBlock(w, w))
            dec.append(_PreactBlock(w, nxt))
        if cfg.stem_strided:
            dec.append(_Upsample())
        self.decoder = nn.Sequential(*dec)
        self.head_bn = nn.BatchNorm2d(cfg.stem_width)
        self.head = nn.Conv2d(cfg.stem_width, cfg.out_channels, 3, padding=1)

    def forward(self, x):
        h = self.stem(x)
        h = self.encoder(h)
        h = self.decoder(h)
        return self.head(F.relu(self.head_bn(h)))


@dataclass
class FpiModel:
    """A built network plus its configuration."""

    config: ModelConfig
    module: nn.Module

    def parameters_dict(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.module.state_dict().items()}

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())


def init_model(config: ModelConfig, rng: SeededRng | int) -> FpiModel:
    """Build and deterministically initialize a model.

    Convolution kernels get zero-mean normals with std sqrt(2 / fan_in);
    normalization scales start at 1, every offset at 0. The same seed always
    produces bit-identical parameters.
    """
    seed = rng.seed if isinstance(rng, SeededRng) else int(rng)
    module = _EncoderDecoder(config)
    gen = torch.Generator().manual_seed(seed & (2**63 - 1))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                fan_in = p[0].numel()
                p.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            elif name.endswith(".bias") or name == "bias":
                p.zero_()
            else:  # normalization scale
                p.fill_(1.0)
    return FpiModel(config=config, module=module)


def _as_batch_tensor(images: np.ndarray | torch.Tensor, size: int) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images.float()
    else:
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    elif x.dim() != 4:
        raise DataError(f"expected 2D/3D/4D image input, got {tuple(x.shape)}")
    if x.shape[-1] != size or x.shape[-2] != size:
        raise DataError(f"input spatial size {tuple(x.shape[-2:])} != model size {size}")
    return x


def predict_proba(module: nn.Module, x: torch.Tensor, head: str) -> torch.Tensor:
    """Head-activated probabilities from a logits module (differentiable)."""
    logits = module(x)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite activation in forward pass")
    return torch.sigmoid(logits) if head == HEAD_SIGMOID else torch.softmax(logits, dim=1)


def forward(model: FpiModel, images: np.ndarray) -> np.ndarray:
    """Inference-mode prediction using running normalization statistics.

    Returns (N, H, W) for the sigmoid head and (N, H, W, C) per-pixel class
    probabilities for the softmax head.
    """
    x = _as_batch_tensor(images, model.config.input_size)
    model.module.eval()
    with torch.no_grad():
        probs = predict_proba(model.module, x, model.config.head)
    if model.config.head == HEAD_SIGMOID:
        return probs[:, 0].numpy()
    return probs.permute(0, 2, 3, 1).contiguous().numpy()


def _as_tensor(a, dtype=None) -> torch.Tensor:
    """To tensor, preserving float width unless a dtype is forced."""
    t = a if isinstance(a, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(a))
    if dtype is not None:
        return t.to(dtype)
    return t if t.dtype.is_floating_point else t.float()


def loss_bce(pred, target) -> torch.Tensor:
    """Mean binary cross-entropy with soft targets in [0, 1].

    loss_i = -t_i log p_i - (1 - t_i) log(1 - p_i), averaged over pixels,
    with p clamped away from {0, 1} by LOG_EPS.
    """
    p = _as_tensor(pred)
    t = _as_tensor(target).to(p.dtype)
    if p.shape != t.shape:
        raise DataError(f"prediction/label shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    if t.numel() and (t.min() < 0 or t.max() > 1):
        raise UsageError("labels must lie in [0, 1]")
    p = p.clamp(LOG_EPS, 1.0 - LOG_EPS)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def loss_cce(pred, classes) -> torch.Tensor:
    """Mean categorical cross-entropy against per-pixel class indices.

    ``pred`` holds per-class probabilities with the class axis at dim 1;
    ``classes`` holds integer indices of the true class.
    """
    p = _as_tensor(pred)
    c = _as_tensor(classes, dtype=torch.int64)
    if p.dim() != c.dim() + 1:
        raise DataError(
            f"expected class axis at dim 1: pred {tuple(p.shape)}, classes {tuple(c.shape)}"
        )
    ncls = p.shape[1]
    if c.numel() and (c.min() < 0 or c.max() >= ncls):
        raise UsageError(f"class indices must be in [0, {ncls})")
    p_true = p.gather(1, c.unsqueeze(1)).squeeze(1)
    return -torch.log(p_true.clamp(LOG_EPS, 1.0)).mean()


def training_loss(model: FpiModel, x: torch.Tensor, labels: torch.Tensor,
                  mode: AlphaMode) -> torch.Tensor:
    """Loss of a training batch with batch-statistics normalization."""
    model.module.train()
    probs = predict_proba(model.module, x, model.config.head)
    if mode is AlphaMode.DISCRETE:
        return loss_cce(probs, labels)
    return loss_bce(probs, labels)


def gradients(model: FpiModel, images, labels, mode: AlphaMode) -> dict[str, np.ndarray]:
    """Gradient of the selected loss w.r.t. every parameter, by name."""
    x = _as_batch_tensor(images, model.config.input_size)
    y = _as_tensor(labels, torch.int64 if mode is AlphaMode.DISCRETE else torch.float32)
    model.module.zero_grad(set_to_none=True)
    loss = training_loss(model, x, y, mode)
    loss.backward()
    out = {}
    for name, p in model.module.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        out[name] = g.detach().numpy().copy()
    model.module.zero_grad(set_to_none=True)
    return out


def finite_difference_check(
    model: FpiModel,
    images,
    labels,
    mode: AlphaMode,
    step: float = 1e-5,
    entries_per_tensor: int = 4,
) -> dict[str, float]:
    """Compare autograd gradients against central finite differences.

    Runs the whole check in float64. For every parameter tensor the
    largest-magnitude gradient entries are perturbed by +-step and the
    resulting loss slope is compared with the backward-pass gradient.
    Returns the max relative error per tensor; relative error uses
    max(|fd|, |grad|, 1e-6) as the denominator.

    The default step keeps the error from stepping across rectifier kinks
    negligible; float64 keeps the matching roundoff well below tolerance.
    """
    module = model.module.double()
    x = _as_batch_tensor(images, model.config.input_size).double()
    y = _as_tensor(labels, torch.int64 if mode is AlphaMode.DISCRETE else torch.float64)

    def loss_value() -> float:
        with torch.no_grad():
            module.train()
            probs = predict_proba(module, x, model.config.head)
            if mode is AlphaMode.DISCRETE:
                return float(loss_cce(probs, y))
            return float(loss_bce(probs, y))

    module.zero_grad(set_to_none=True)
    module.train()
    probs = predict_proba(module, x, model.config.head)
    loss = loss_cce(probs, y) if mode is AlphaMode.DISCRETE else loss_bce(probs, y)
    loss.backward()

    errors: dict[str, float] = {}
    for name, p in module.named_parameters():
        grad = p.grad.detach().reshape(-1)
        k = min(entries_per_tensor, grad.numel())
        idx = torch.argsort(grad.abs(), descending=True)[:k]
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in idx.tolist():
            orig = float(flat[i])
            flat[i] = orig + step
            hi = loss_value()
            flat[i] = orig - step
            lo = loss_value()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            g = float(grad[i])
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-6)
            worst = max(worst, rel)
        errors[name] = worst
    module.zero_grad(set_to_none=True)
    module.float()
    return errors


CHECKPOINT_VERSION = 1


def save_checkpoint(model: FpiModel, path: str) -> str:
    """Write config + tensors: one JSON header line, then raw float32 payload.

    Integer buffers (batch counters) are stored as float32 and restored on
    load; all values they take are exactly representable.
    """
    state = model.module.state_dict()
    names = list(state.keys())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tensors": [
            {"name": n, "shape": list(state[n].shape)} for n in names
        ],
    }
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        f.write(b"\n")
        for n in names:
            f.write(state[n].detach().cpu().numpy().astype("<f4").tobytes())
    return path


def load_checkpoint(path: str) -> FpiModel:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise DataError(f"bad checkpoint header in {path}: {e}") from None
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version in {path}")
        config = ModelConfig.from_dict(header["config"])
        module = _EncoderDecoder(config)
        reference = module.state_dict()
        state = {}
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise DataError(f"truncated checkpoint payload in {path} at {name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            if name not in reference:
                raise DataError(f"unexpected tensor {name!r} in {path}")
            t = torch.from_numpy(arr.copy())
            state[name] = t.to(reference[name].dtype)
        if f.read(1):
            raise DataError(f"trailing bytes in checkpoint {path}")
    module.load_state_dict(state)
    return FpiModel(config=config, module=module)
