"""Layer primitives, losses, per-group Adam, finite-difference gradient checks
and the flat checkpoint format.

Tensors are torch tensors; float64 is used for gradient checks and float32
for training runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LEARNING_GROUPS = ("head", "fusion_weights", "fusion_proj", "encoder", "decoder")
LOG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Functional layers
# ---------------------------------------------------------------------------


def conv_output_width(width: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (width + 2 * padding - kernel) // stride + 1


def conv_transpose_output_width(width: int, kernel: int, stride: int = 1, padding: int = 0, output_padding: int = 0) -> int:
    return (width - 1) * stride - 2 * padding + kernel + output_padding


def _batched(x: torch.Tensor, ndim: int = 3):
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise ValueError(f"expected a {ndim - 1}-D or {ndim}-D tensor, got shape {tuple(x.shape)}")
    return x, False


def conv_forward(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """1-D cross-correlation along the last axis.  ``x`` is (C_in, W) or (B, C_in, W)."""
    xb, squeeze = _batched(x)
    if kernel.dim() != 3 or kernel.shape[1] != xb.shape[1]:
        raise ValueError(f"kernel {tuple(kernel.shape)} does not match input channels {xb.shape[1]}")
    if kernel.shape[-1] > xb.shape[-1] + 2 * padding:
        raise ValueError(f"kernel width {kernel.shape[-1]} exceeds padded input width {xb.shape[-1] + 2 * padding}")
    y = F.conv1d(xb, kernel, bias, stride=stride, padding=padding)
    return y[0] if squeeze else y


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def maxpool(x: torch.Tensor, window: int) -> torch.Tensor:
    xb, squeeze = _batched(x) if x.dim() != 1 else (x.view(1, 1, -1), True)
    if window > xb.shape[-1]:
        raise ValueError(f"pool window {window} wider than input {xb.shape[-1]}")
    y = F.max_pool1d(xb, window)
    if x.dim() == 1:
        return y.view(-1)
    return y[0] if squeeze else y


def fully_connected(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def transposed_conv(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None, stride: int = 1, padding: int = 0, output_padding: int = 0) -> torch.Tensor:
    xb, squeeze = _batched(x)
    if kernel.dim() != 3 or kernel.shape[0] != xb.shape[1]:
        raise ValueError(f"kernel {tuple(kernel.shape)} does not match input channels {xb.shape[1]}")
    y = F.conv_transpose1d(xb, kernel, bias, stride=stride, padding=padding, output_padding=output_padding)
    return y[0] if squeeze else y


def layer_forward(x: torch.Tensor, layer: nn.Module) -> torch.Tensor:
    """Run one of the supported layer modules with explicit shape validation."""
    if isinstance(layer, nn.BatchNorm1d):
        if x.dim() not in (2, 3) or x.shape[1] != layer.num_features:
            raise ValueError(f"batchnorm expects {layer.num_features} channels, got shape {tuple(x.shape)}")
    elif isinstance(layer, nn.Linear):
        if x.shape[-1] != layer.in_features:
            raise ValueError(f"linear layer expects width {layer.in_features}, got {x.shape[-1]}")
    elif isinstance(layer, (nn.Conv1d, nn.ConvTranspose1d)):
        if x.dim() < 2 or x.shape[-2] != layer.in_channels:
            raise ValueError(f"{type(layer).__name__} expects {layer.in_channels} channels, got shape {tuple(x.shape)}")
    elif isinstance(layer, nn.MaxPool1d):
        if layer.kernel_size > x.shape[-1]:
            raise ValueError("pool window wider than input")
    elif not isinstance(layer, nn.ReLU):
        raise ValueError(f"unsupported layer {type(layer).__name__}")
    return layer(x)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def softmax(u: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = torch.exp(u - u.max(dim=dim, keepdim=True).values)
    return z / z.sum(dim=dim, keepdim=True)


def cross_entropy(s: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    """-sum_n c_n log s_n over the last axis, logs floored at 1e-12."""
    return -(onehot * torch.log(torch.clamp_min(s, LOG_FLOOR))).sum(dim=-1)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    onehot = F.one_hot(labels, logits.shape[-1]).to(logits.dtype)
    return cross_entropy(softmax(logits), onehot).mean()


def branch_mse(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if x_hat.shape != x.shape:
        raise ValueError(f"reconstruction shape {tuple(x_hat.shape)} != target {tuple(x.shape)}")
    return ((x - x_hat) ** 2).mean()


def weighted_mse(csi_hat, csi, bsnr_hat, bsnr, lam: float) -> torch.Tensor:
    """lam * mean CSI squared error + (1 - lam) * mean beam SNR squared error.

    The weight-zero branch is skipped entirely so it contributes no gradient.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    terms = []
    if lam > 0:
        terms.append(lam * branch_mse(csi_hat, csi))
    if lam < 1:
        terms.append((1.0 - lam) * branch_mse(bsnr_hat, bsnr))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


def init_kaiming_uniform(module: nn.Module) -> None:
    """Kaiming-uniform fan-in on conv/linear weights, BN gamma=1 beta=0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=0.0, nonlinearity="relu")
            if m.bias is not None:
                fan_in = nn.init._calculate_fan_in_and_fan_out(m.weight)[0]
                bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
                nn.init.uniform_(m.bias, -bound, bound)
        elif isinstance(m, nn.BatchNorm1d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ConvBlock(nn.Module):
    """conv -> batchnorm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=padding)
        self.bn = nn.BatchNorm1d(c_out)
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def out_width(self, width: int) -> int:
        return conv_output_width(width, self.kernel, self.stride, self.padding)

    def forward(self, x):
        return torch.relu(self.bn(self.conv(x)))


class PoolLayer(nn.Module):
    def __init__(self, window: int):
        super().__init__()
        self.window = window

    def out_width(self, width: int) -> int:
        return width // self.window

    def forward(self, x):
        return F.max_pool1d(x, self.window)


class DeconvBlock(nn.Module):
    """Transposed conv mapping back to an exact target width; BN+ReLU unless final."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, in_width: int, out_width: int, final: bool = False):
        super().__init__()
        base = conv_transpose_output_width(in_width, kernel, stride, padding)
        output_padding = out_width - base
        if not 0 <= output_padding < max(stride, 1) or (stride == 1 and output_padding):
            raise ValueError(f"cannot reach width {out_width} from {in_width} with k={kernel}, s={stride}, p={padding}")
        self.deconv = nn.ConvTranspose1d(c_in, c_out, kernel, stride=stride, padding=padding, output_padding=output_padding)
        self.bn = None if final else nn.BatchNorm1d(c_out)

    def forward(self, x):
        y = self.deconv(x)
        return y if self.bn is None else torch.relu(self.bn(y))


class Upsample(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width

    def forward(self, x):
        return F.interpolate(x, size=self.width, mode="nearest")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Iterable[tuple[str, torch.Tensor, str]],
    lr_per_group: Mapping[str, float],
    state: AdamState,
) -> AdamState:
    """One Adam update using each tensor's ``.grad``.

    ``params`` yields ``(name, tensor, group)``.  Tensors in zero-rate groups
    or without a gradient are not touched at all.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p, group in params:
            if group not in lr_per_group:
                raise ValueError(f"no learning rate for group {group!r} (parameter {name})")
            lr = lr_per_group[group]
            if lr == 0 or p.grad is None:
                continue
            g = p.grad
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict
    tolerance: float
    checked: int = 0
    skipped: int = 0  # probes discarded because they straddled a kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


class KinkMonitor:
    """Records the ReLU sign pattern and max-pool winners of every forward pass.

    ReLU inputs are observed at the outputs of batchnorm and linear layers;
    pooling winners at ``PoolLayer`` inputs.  Two passes with equal patterns
    lie in the same linear region of the network.
    """

    def __init__(self, model: nn.Module):
        self._parts: list = []
        self._handles = []
        for m in model.modules():
            if isinstance(m, (nn.BatchNorm1d, nn.Linear)):
                self._handles.append(m.register_forward_hook(self._signs))
            elif isinstance(m, PoolLayer):
                self._handles.append(m.register_forward_hook(self._winners))

    def _signs(self, module, inputs, output):
        self._parts.append((output > 0).detach().reshape(-1))

    def _winners(self, module, inputs, output):
        x = inputs[0].detach()
        n = x.shape[-1] // module.window
        self._parts.append(x[..., : n * module.window].reshape(*x.shape[:-1], n, module.window).argmax(-1).reshape(-1))

    def reset(self) -> None:
        self._parts = []

    def pattern(self) -> torch.Tensor:
        if not self._parts:
            return torch.zeros(0, dtype=torch.int64)
        return torch.cat([p.to(torch.int64) for p in self._parts])

    def close(self) -> None:
        for h in self._handles:
            h.remove()
        self._handles = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Mapping[str, torch.Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    analytic: Optional[Mapping[str, torch.Tensor]] = None,
    monitor: Optional[KinkMonitor] = None,
) -> GradCheckReport:
    """Compare backprop gradients with central finite differences.

    ``loss_fn`` must recompute the scalar loss from the current values of
    ``tensors`` (all float64, ``requires_grad``).  With ``max_entries`` only a
    random subset of coordinates per tensor is probed.  The error for a tensor
    is ||g_bp - g_fd|| / max(||g_bp||, ||g_fd||, 1e-8) over the probed entries.
    With a ``monitor``, probes whose +-h passes change the activation pattern
    are discarded, since the difference quotient there spans a kink.
    ``analytic`` overrides the backprop gradients (used for negative controls).
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise ValueError(f"gradient checks need float64 tensors; {name} is {t.dtype}")
    for t in tensors.values():
        t.grad = None
    if monitor is not None:
        monitor.reset()
    loss = loss_fn()
    base = monitor.pattern() if monitor is not None else None
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    rng = np.random.default_rng(seed)

    def evaluate():
        if monitor is not None:
            monitor.reset()
        value = loss_fn().item()
        same = monitor is None or torch.equal(monitor.pattern(), base)
        return value, same

    per_tensor = {}
    checked = skipped = 0
    with torch.no_grad():
        for (name, t), g in zip(tensors.items(), grads):
            g = torch.zeros_like(t) if g is None else g
            if analytic is not None and name in analytic:
                g = analytic[name]
            flat = t.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
            keep, fd = [], []
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                lp, ok_p = evaluate()
                flat[i] = orig - h
                lm, ok_m = evaluate()
                flat[i] = orig
                if ok_p and ok_m:
                    keep.append(int(i))
                    fd.append((lp - lm) / (2 * h))
                else:
                    skipped += 1
            checked += len(keep)
            if not keep:
                continue
            fd = np.asarray(fd)
            bp = g.reshape(-1)[torch.as_tensor(keep)].cpu().numpy()
            denom = max(np.linalg.norm(bp), np.linalg.norm(fd), 1e-8)
            per_tensor[name] = float(np.linalg.norm(bp - fd) / denom)
    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(worst, per_tensor, tolerance, checked, skipped)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: nn.Module, directory, architecture: dict, group_of: Callable[[str], str]) -> Path:
    """Write ``weights.bin`` (little-endian float32) and the ``weights.json`` manifest.

    Batchnorm running statistics are stored as entries of kind ``buffer``.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, p in model.named_parameters():
        entries.append({"name": name, "kind": "parameter", "shape": list(p.shape), "group": group_of(name), "offset": offset})
        chunks.append(p.detach().cpu().numpy().astype("<f4").ravel())
        offset += chunks[-1].nbytes
    for name, b in model.named_buffers():
        if not b.is_floating_point():
            continue
        entries.append({"name": name, "kind": "buffer", "shape": list(b.shape), "group": None, "offset": offset})
        chunks.append(b.detach().cpu().numpy().astype("<f4").ravel())
        offset += chunks[-1].nbytes
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.tofile(out / "weights.bin")
    manifest = {"format": "mbsense-weights/1", "dtype": "<f4", "architecture": architecture, "tensors": entries, "total_bytes": offset}
    (out / "weights.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_checkpoint_manifest(directory) -> dict:
    path = Path(directory) / "weights.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_weights(model: nn.Module, directory, names: Optional[Sequence[str]] = None, strict: bool = True) -> None:
    """Copy stored tensors into ``model``.  ``names`` restricts which entries are loaded."""
    src = Path(directory)
    manifest = read_checkpoint_manifest(src)
    blob = np.fromfile(src / "weights.bin", dtype="<f4")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    wanted = set(names) if names is not None else None
    seen = set()
    with torch.no_grad():
        for e in manifest["tensors"]:
            name = e["name"]
            if wanted is not None and name not in wanted:
                continue
            target = params.get(name, buffers.get(name))
            if target is None:
                if strict:
                    raise ValueError(f"checkpoint tensor {name} has no counterpart in the model")
                continue
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            start = e["offset"] // 4
            arr = blob[start:start + count].reshape(e["shape"])
            if tuple(target.shape) != tuple(e["shape"]):
                raise ValueError(f"shape mismatch for {name}: model {tuple(target.shape)} vs checkpoint {tuple(e['shape'])}")
            target.copy_(torch.from_numpy(arr.astype(np.float32)).to(target.dtype))
            seen.add(name)
    if strict and wanted is None:
        missing = [n for n in list(params) + [b for b, t in buffers.items() if t.is_floating_point()] if n not in seen]
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {missing[:5]}")
