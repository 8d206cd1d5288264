# neuralops.py
"""
Functional tensor ops for the masked autoencoder and its classifiers.

Every op is a contract-checked wrapper over torch: shapes are validated up
front (NeuralOpsError instead of an opaque kernel error), gradients come from
torch autograd, and outputs can be checked for non-finite values by setting
VOXMIM_DEBUG_FINITE=1.

Layout of feature maps is N x C x D x H x W.
"""

import logging
import os
from typing import Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from config import VoxmimError

logger = logging.getLogger(__name__)

DEBUG_FINITE = os.getenv("VOXMIM_DEBUG_FINITE", "0") == "1"

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PROB_CLAMP = 1e-7

ADAM_LR = 1e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_warned_single_sample = False


class NeuralOpsError(VoxmimError, ValueError):
    """Shape mismatch, non-finite value, or misuse of the autograd contract."""


class GraphConsumedError(NeuralOpsError):
    """backward() called a second time on an already-released graph."""


def _triple(values, name: str) -> Tuple[int, int, int]:
    if isinstance(values, int):
        values = (values,) * 3
    values = tuple(int(v) for v in values)
    if len(values) != 3:
        raise NeuralOpsError(f"{name} needs three components, got {values}")
    return values


def _checked(out: torch.Tensor, op: str) -> torch.Tensor:
    if DEBUG_FINITE and not torch.isfinite(out).all():
        raise NeuralOpsError(f"{op} produced non-finite values")
    return out


def _require_5d(x: torch.Tensor, op: str) -> None:
    if x.dim() != 5:
        raise NeuralOpsError(f"{op} expects an N x C x D x H x W tensor, got shape {tuple(x.shape)}")


# ----------------------------
# Convolution / normalisation
# ----------------------------
def conv3d(input: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor], padding=0) -> torch.Tensor:
    """Stride-1 cross-correlation with zero padding."""
    _require_5d(input, "conv3d")
    if kernel.dim() != 5:
        raise NeuralOpsError(f"conv3d kernel must be (C_out, C_in, kd, kh, kw), got {tuple(kernel.shape)}")
    if input.shape[1] != kernel.shape[1]:
        raise NeuralOpsError(f"conv3d: input has {input.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if bias is not None and tuple(bias.shape) != (kernel.shape[0],):
        raise NeuralOpsError(f"conv3d: bias shape {tuple(bias.shape)} does not match {kernel.shape[0]} output channels")
    pad = _triple(padding, "padding")
    for n, k, p in zip(input.shape[2:], kernel.shape[2:], pad):
        if n + 2 * p - k + 1 < 1:
            raise NeuralOpsError(f"conv3d: kernel {tuple(kernel.shape[2:])} larger than padded input {tuple(input.shape[2:])}")
    return _checked(F.conv3d(input, kernel, bias, stride=1, padding=pad), "conv3d")


def batchnorm3d(
    input: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> torch.Tensor:
    """
    Per-channel normalisation over (N, D, H, W).

    Train mode uses batch statistics (accumulated in float64) and updates the
    running buffers in place; Eval mode uses the running buffers.
    """
    global _warned_single_sample
    _require_5d(input, "batchnorm3d")
    channels = input.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if tuple(t.shape) != (channels,):
            raise NeuralOpsError(f"batchnorm3d: {name} has shape {tuple(t.shape)}, input has {channels} channels")
    shape = (1, channels, 1, 1, 1)

    if not training:
        scale = (running_var.double() + eps).rsqrt().to(input.dtype)
        normed = (input - running_mean.to(input.dtype).view(shape)) * scale.view(shape)
        return _checked(normed * gamma.view(shape) + beta.view(shape), "batchnorm3d")

    if input.shape[0] == 1 and not _warned_single_sample:
        logger.warning("BatchNorm training with batch size 1: statistics come from one sample's spatial extent")
        _warned_single_sample = True

    count = input.numel() // channels
    wide = input.double()
    mean = wide.mean(dim=(0, 2, 3, 4))
    var = wide.var(dim=(0, 2, 3, 4), unbiased=False)
    with torch.no_grad():
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean.mul_(1 - momentum).add_(momentum * mean.to(running_mean.dtype))
        running_var.mul_(1 - momentum).add_(momentum * unbiased.to(running_var.dtype))

    normed = ((wide - mean.view(shape)) * (var + eps).rsqrt().view(shape)).to(input.dtype)
    return _checked(normed * gamma.view(shape) + beta.view(shape), "batchnorm3d")


# ----------------------------
# Resampling
# ----------------------------
def maxpool3d(input: torch.Tensor, window=2) -> torch.Tensor:
    """Max over non-overlapping windows; gradient goes to the first argmax."""
    _require_5d(input, "maxpool3d")
    win = _triple(window, "window")
    if any(w < 1 for w in win):
        raise NeuralOpsError(f"maxpool3d: window must be positive, got {win}")
    for n, w in zip(input.shape[2:], win):
        if n % w:
            raise NeuralOpsError(f"maxpool3d: spatial dims {tuple(input.shape[2:])} not divisible by window {win}")
    if win == (1, 1, 1):
        return input.clone()
    return _checked(F.max_pool3d(input, kernel_size=win, stride=win), "maxpool3d")


def upsample_nearest3d(input: torch.Tensor, factor=2) -> torch.Tensor:
    """Replicate each voxel factor_d x factor_h x factor_w times."""
    _require_5d(input, "upsample_nearest3d")
    fac = _triple(factor, "factor")
    if any(f < 1 for f in fac):
        raise NeuralOpsError(f"upsample_nearest3d: factor must be >= 1, got {fac}")
    out = input
    for axis, f in zip((2, 3, 4), fac):
        if f > 1:
            out = out.repeat_interleave(f, dim=axis)
    return _checked(out if out is not input else input.clone(), "upsample_nearest3d")


# ----------------------------
# Pointwise / dense
# ----------------------------
def activation(input: torch.Tensor, kind: str) -> torch.Tensor:
    kind = kind.lower()
    if kind == "relu":
        return _checked(F.relu(input), "relu")
    if kind == "sigmoid":
        return _checked(torch.sigmoid(input), "sigmoid")
    raise NeuralOpsError(f"Unknown activation '{kind}', expected relu or sigmoid")


def linear(input: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor]) -> torch.Tensor:
    flat = input.reshape(input.shape[0], -1)
    if weight.dim() != 2 or flat.shape[1] != weight.shape[1]:
        raise NeuralOpsError(f"linear: {flat.shape[1]} input features vs weight {tuple(weight.shape)}")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise NeuralOpsError(f"linear: bias shape {tuple(bias.shape)} vs {weight.shape[0]} outputs")
    return _checked(F.linear(flat, weight, bias), "linear")


def global_avg_pool3d(input: torch.Tensor) -> torch.Tensor:
    _require_5d(input, "global_avg_pool3d")
    return input.mean(dim=(2, 3, 4))


# ----------------------------
# Losses
# ----------------------------
def mse_loss(prediction: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Mean squared error, accumulated in float64.

    With `mask`, the mean runs over masked elements only.
    """
    if prediction.shape != target.shape:
        raise NeuralOpsError(f"mse_loss: prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}")
    sq = (prediction.double() - target.double()) ** 2
    if mask is None:
        return _checked(sq.mean(), "mse_loss")
    if mask.shape != prediction.shape:
        raise NeuralOpsError(f"mse_loss: mask {tuple(mask.shape)} vs prediction {tuple(prediction.shape)}")
    selected = mask.bool()
    n = int(selected.sum())
    if n == 0:
        raise NeuralOpsError("mse_loss: masked-only loss with an empty mask")
    return _checked(sq[selected].sum() / n, "mse_loss")


def bce_loss(probability: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """-[y ln p + (1 - y) ln(1 - p)], p clamped to [1e-7, 1 - 1e-7], mean over cases."""
    p = probability.double().reshape(-1).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = torch.as_tensor(label, dtype=torch.float64).reshape(-1)
    if p.shape != y.shape:
        raise NeuralOpsError(f"bce_loss: {p.numel()} probabilities vs {y.numel()} labels")
    if ((y != 0) & (y != 1)).any():
        raise NeuralOpsError("bce_loss: labels must be 0 or 1")
    return _checked(-(y * p.log() + (1 - y) * (1 - p).log()).mean(), "bce_loss")


# ----------------------------
# Autograd / optimiser
# ----------------------------
def backward(loss: torch.Tensor, params: Optional[Sequence[torch.Tensor]] = None) -> Optional[List[torch.Tensor]]:
    """
    Reverse pass from a scalar loss; gradients accumulate into `.grad`.

    The graph is released afterwards: a second call on the same loss raises
    GraphConsumedError. Call zero_grad / build a new forward pass in between.
    """
    if loss.numel() != 1:
        raise NeuralOpsError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise NeuralOpsError("backward: loss does not depend on any trainable tensor")
    if not torch.isfinite(loss).all():
        raise NeuralOpsError(f"backward: non-finite loss {loss.item()}")
    try:
        loss.backward()
    except RuntimeError as e:
        if "second time" in str(e):
            raise GraphConsumedError("backward called twice on the same graph; run a fresh forward pass") from e
        raise
    if params is None:
        return None
    return [p.grad for p in params]


def make_adam(params: Iterable, lr: float = ADAM_LR, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> torch.optim.Adam:
    """
    Adam with bias correction. `params` is either tensors or torch-style
    param-group dicts (each may carry its own "lr"); only tensors with
    requires_grad are handed over and emptied groups are dropped.
    """
    items = list(params)
    groups = items if items and isinstance(items[0], dict) else [{"params": items}]
    kept = []
    for group in groups:
        trainable = [p for p in group["params"] if p.requires_grad]
        if trainable:
            kept.append({**group, "params": trainable})
    if not kept:
        raise NeuralOpsError("make_adam: no trainable parameters")
    return torch.optim.Adam(kept, lr=lr, betas=betas, eps=eps)


def adam_steps_taken(optimizer: torch.optim.Adam) -> int:
    """Bias-correction step t as held in the optimiser's per-parameter state."""
    return max((int(state["step"]) for state in optimizer.state.values() if "step" in state), default=0)


def adam_step(optimizer: torch.optim.Adam) -> int:
    """Apply one update and return the resulting step t."""
    optimizer.step()
    return adam_steps_taken(optimizer)


def adam_state_arrays(optimizer: torch.optim.Adam) -> List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """(parameter, first moment, second moment) for every parameter that has taken a step."""
    moments = []
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if state:
                moments.append((p, state["exp_avg"], state["exp_avg_sq"]))
    return moments
