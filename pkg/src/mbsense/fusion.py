"""Two-branch encoders, granularity-matching fusion, task heads, mirrored
decoders and the baseline variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .nn import ConvBlock, DeconvBlock, PoolLayer, Upsample, init_kaiming_uniform

VARIANTS = ("csi_only", "bsnr_only", "input_fusion", "feature_fusion", "granularity_matching")
TASK_CLASSES = {"pose": 8, "occupancy": 8, "localization": 16}

# (kind, out_channels, kernel, stride, padding) or ("pool", window)
CSI_LAYERS = (
    ("conv", 8, 3, 2, 0),
    ("conv", 16, 3, 2, 0),
    ("pool", 2),
    ("conv", 16, 3, 1, 1),
    ("conv", 32, 3, 2, 1),
    ("conv", 32, 3, 2, 1),
)
BSNR_LAYERS = (
    ("conv", 8, 5, 1, 0),
    ("conv", 16, 5, 1, 0),
    ("conv", 16, 3, 1, 1),
    ("conv", 32, 3, 2, 1),
    ("conv", 32, 3, 2, 1),
)


@dataclass(frozen=True)
class ModelDims:
    num_streams: int = 3
    csi_width: int = 234
    bsnr_width: int = 36
    num_classes: int = 8
    latent_dim: int = 24
    tap_width: int = 64
    tap_pool_bins: int = 1
    head_hidden: int = 64
    head_layers: int = 2
    csi_layers: tuple = CSI_LAYERS
    bsnr_layers: tuple = BSNR_LAYERS
    csi_taps: tuple = (1, 3, 5, 6)
    bsnr_taps: tuple = (1, 4, 5)

    def __post_init__(self):
        for name in ("csi_layers", "bsnr_layers"):
            object.__setattr__(self, name, tuple(tuple(l) for l in getattr(self, name)))
        for taps, layers, label in ((self.csi_taps, self.csi_layers, "CSI"), (self.bsnr_taps, self.bsnr_layers, "beam SNR")):
            taps = tuple(int(t) for t in taps)
            if not taps or any(b <= a for a, b in zip(taps, taps[1:])):
                raise ValueError(f"{label} tap indices must be nonempty and strictly increasing")
            if taps[0] < 1 or taps[-1] > len(layers):
                raise ValueError(f"{label} tap indices must lie in [1, {len(layers)}]")
        object.__setattr__(self, "csi_taps", tuple(int(t) for t in self.csi_taps))
        object.__setattr__(self, "bsnr_taps", tuple(int(t) for t in self.bsnr_taps))
        if self.latent_dim < 1 or self.num_classes < 1 or self.head_layers < 1:
            raise ValueError("latent_dim, num_classes and head_layers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["csi_layers"] = [list(l) for l in self.csi_layers]
        d["bsnr_layers"] = [list(l) for l in self.bsnr_layers]
        d["csi_taps"] = list(self.csi_taps)
        d["bsnr_taps"] = list(self.bsnr_taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in cls.__dataclass_fields__})


class EncoderBranch(nn.Module):
    """Stack of conv blocks (and pooling layers); layer indices are 1-based."""

    def __init__(self, in_channels: int, in_width: int, layers: Sequence[tuple], tap_indices: Sequence[int]):
        super().__init__()
        self.tap_indices = tuple(tap_indices)
        blocks = []
        self.channels = [in_channels]
        self.widths = [in_width]
        self.specs = [tuple(s) for s in layers]
        c, w = in_channels, in_width
        for spec in self.specs:
            if spec[0] == "pool":
                block = PoolLayer(spec[1])
            elif spec[0] == "conv":
                _, c_out, k, s, p = spec
                if k > w + 2 * p:
                    raise ValueError(f"layer {spec} too wide for input width {w}")
                block = ConvBlock(c, c_out, k, s, p)
                c = c_out
            else:
                raise ValueError(f"unknown layer kind {spec[0]!r}")
            w = block.out_width(w)
            if w < 1:
                raise ValueError(f"input width {in_width} collapses to zero in layer {spec}")
            blocks.append(block)
            self.channels.append(c)
            self.widths.append(w)
        self.layers = nn.ModuleList(blocks)

    def forward(self, x, upto: Optional[int] = None):
        """Return (final map, taps) where taps follow ``tap_indices``."""
        taps = []
        n = len(self.layers) if upto is None else upto
        for i in range(n):
            x = self.layers[i](x)
            if i + 1 in self.tap_indices:
                taps.append(x)
        return x, taps

    def tap_channels(self) -> list[int]:
        return [self.channels[i] for i in self.tap_indices]


class TapProjection(nn.Module):
    """Average pool a tap over its spatial axis (into ``bins`` cells) and project linearly."""

    def __init__(self, channels: int, width: int, bins: int = 1):
        super().__init__()
        self.bins = bins
        self.linear = nn.Linear(channels * bins, width)

    def forward(self, y):
        pooled = y.mean(dim=-1) if self.bins == 1 else F.adaptive_avg_pool1d(y, self.bins).flatten(1)
        return self.linear(pooled)


class FusionBlock(nn.Module):
    """All (CSI tap, beam SNR tap) concatenations, each projected to width d,
    combined as f = sum_p a_p f_p.

    ``pairs`` holds ``(i, j)`` indices into the projected tap lists; either
    side may be ``None`` for single-branch models.
    """

    def __init__(self, csi_tap_channels, bsnr_tap_channels, pairs, latent_dim, tap_width, tap_pool_bins=1):
        super().__init__()
        self.pairs = [tuple(p) for p in pairs]
        used_c = sorted({i for i, _ in self.pairs if i is not None})
        used_h = sorted({j for _, j in self.pairs if j is not None})
        self.csi_taps = nn.ModuleDict({str(i): TapProjection(csi_tap_channels[i], tap_width, tap_pool_bins) for i in used_c})
        self.bsnr_taps = nn.ModuleDict({str(j): TapProjection(bsnr_tap_channels[j], tap_width, tap_pool_bins) for j in used_h})
        self.proj = nn.ModuleList(
            nn.Linear(tap_width * ((i is not None) + (j is not None)), latent_dim) for i, j in self.pairs
        )
        self.weights = nn.Parameter(torch.full((len(self.pairs),), 1.0 / len(self.pairs)))
        self.latent_dim = latent_dim

    @property
    def pair_count(self) -> int:
        return len(self.pairs)

    def pair_features(self, taps_csi, taps_bsnr) -> torch.Tensor:
        """Stacked per-pair projections f_p, shape (P, batch, d)."""
        u = {int(i): m(taps_csi[int(i)]) for i, m in self.csi_taps.items()} if taps_csi else {}
        l = {int(j): m(taps_bsnr[int(j)]) for j, m in self.bsnr_taps.items()} if taps_bsnr else {}
        out = []
        for (i, j), proj in zip(self.pairs, self.proj):
            parts = ([u[i]] if i is not None else []) + ([l[j]] if j is not None else [])
            out.append(proj(torch.cat(parts, dim=-1)))
        return torch.stack(out)

    def forward(self, taps_csi, taps_bsnr) -> torch.Tensor:
        need_c = max((i for i, _ in self.pairs if i is not None), default=-1) + 1
        need_h = max((j for _, j in self.pairs if j is not None), default=-1) + 1
        if len(taps_csi or []) < need_c or len(taps_bsnr or []) < need_h:
            raise ValueError(
                f"fusion block needs {need_c} CSI and {need_h} beam SNR taps, "
                f"got {len(taps_csi or [])} and {len(taps_bsnr or [])}"
            )
        fp = self.pair_features(taps_csi, taps_bsnr)
        return (self.weights[:, None, None] * fp).sum(dim=0)


class OutputHead(nn.Module):
    """Fully-connected stack, ReLU between layers, identity on the last."""

    def __init__(self, in_width: int, num_classes: int, hidden: int = 64, num_layers: int = 2):
        super().__init__()
        widths = [in_width] + [hidden] * (num_layers - 1) + [num_classes]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths, widths[1:]))

    def forward(self, f):
        z = f
        for k, layer in enumerate(self.layers):
            z = layer(z)
            if k < len(self.layers) - 1:
                z = torch.relu(z)
        return z


class DecoderBranch(nn.Module):
    """Mirror of an encoder: latent -> (C_last, W_last) map -> transposed convs back to the input shape."""

    def __init__(self, encoder: EncoderBranch, latent_dim: int):
        super().__init__()
        self.c_last, self.w_last = encoder.channels[-1], encoder.widths[-1]
        self.inp = nn.Linear(latent_dim, self.c_last * self.w_last)
        blocks = []
        n = len(encoder.specs)
        for k in range(n, 0, -1):
            spec = encoder.specs[k - 1]
            w_in, w_out = encoder.widths[k], encoder.widths[k - 1]
            if spec[0] == "pool":
                blocks.append(Upsample(w_out))
            else:
                _, _, kern, stride, pad = spec
                blocks.append(DeconvBlock(encoder.channels[k], encoder.channels[k - 1], kern, stride, pad, w_in, w_out, final=(k == 1)))
        self.layers = nn.ModuleList(blocks)
        self.out_shape = (encoder.channels[0], encoder.widths[0])

    def forward(self, f):
        t = torch.relu(self.inp(f)).view(f.shape[0], self.c_last, self.w_last)
        for layer in self.layers:
            t = layer(t)
        return t


@dataclass
class Architecture:
    variant: str
    dims: ModelDims = field(default_factory=ModelDims)
    with_head: bool = True
    with_decoders: bool = False

    def to_dict(self) -> dict:
        return {"variant": self.variant, "dims": self.dims.to_dict(), "with_head": self.with_head, "with_decoders": self.with_decoders}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["variant"], ModelDims.from_dict(d["dims"]), d["with_head"], d["with_decoders"])


class FusionModel(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        if arch.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {arch.variant!r}; choose from {VARIANTS}")
        self.arch = arch
        d = arch.dims
        v = arch.variant
        csi_ch = 2 * d.num_streams
        self.uses_csi = v != "bsnr_only"
        self.uses_bsnr = v in ("bsnr_only", "feature_fusion", "granularity_matching")
        self.input_fusion = v == "input_fusion"
        self.csi_encoder = None
        self.bsnr_encoder = None
        if self.uses_csi:
            self.csi_encoder = EncoderBranch(csi_ch + (1 if self.input_fusion else 0), d.csi_width, d.csi_layers, d.csi_taps)
        if self.uses_bsnr:
            self.bsnr_encoder = EncoderBranch(1, d.bsnr_width, d.bsnr_layers, d.bsnr_taps)
        n_c, n_h = len(d.csi_taps), len(d.bsnr_taps)
        if v == "granularity_matching":
            pairs = [(i, j) for i in range(n_c) for j in range(n_h)]
        elif v == "feature_fusion":
            pairs = [(n_c - 1, n_h - 1)]
        elif v == "bsnr_only":
            pairs = [(None, n_h - 1)]
        else:
            pairs = [(n_c - 1, None)]
        self.fusion = FusionBlock(
            self.csi_encoder.tap_channels() if self.csi_encoder else [],
            self.bsnr_encoder.tap_channels() if self.bsnr_encoder else [],
            pairs, d.latent_dim, d.tap_width, d.tap_pool_bins,
        )
        self.head = OutputHead(d.latent_dim, d.num_classes, d.head_hidden, d.head_layers) if arch.with_head else None
        self.csi_decoder = DecoderBranch(self.csi_encoder, d.latent_dim) if arch.with_decoders and self.csi_encoder else None
        self.bsnr_decoder = DecoderBranch(self.bsnr_encoder, d.latent_dim) if arch.with_decoders and self.bsnr_encoder else None
        init_kaiming_uniform(self)
        with torch.no_grad():
            self.fusion.weights.fill_(1.0 / self.fusion.pair_count)

    # -- inputs -------------------------------------------------------------

    def encoder_inputs(self, csi: Optional[torch.Tensor], bsnr: Optional[torch.Tensor]):
        """Shape the raw branch inputs: csi (B, 2Ns, W), bsnr (B, M) -> per-encoder tensors."""
        d = self.arch.dims
        if csi is not None and tuple(csi.shape[1:]) != (2 * d.num_streams, d.csi_width):
            raise ValueError(f"CSI input shape {tuple(csi.shape[1:])} != {(2 * d.num_streams, d.csi_width)}")
        if bsnr is not None and bsnr.shape[-1] != d.bsnr_width:
            raise ValueError(f"beam SNR width {bsnr.shape[-1]} != {d.bsnr_width}")
        x_c = x_h = None
        if self.input_fusion:
            x_c = torch.cat([csi, self.upsample_bsnr(bsnr)], dim=1)
        elif self.uses_csi:
            x_c = csi
        if self.uses_bsnr:
            x_h = bsnr.unsqueeze(1)
        return x_c, x_h

    def upsample_bsnr(self, bsnr: torch.Tensor) -> torch.Tensor:
        return F.interpolate(bsnr.unsqueeze(1), size=self.arch.dims.csi_width, mode="nearest")

    # -- forward pieces -------------------------------------------------------

    def taps(self, csi, bsnr):
        x_c, x_h = self.encoder_inputs(csi, bsnr)
        taps_c = self.csi_encoder(x_c)[1] if self.csi_encoder is not None else []
        taps_h = self.bsnr_encoder(x_h)[1] if self.bsnr_encoder is not None else []
        return taps_c, taps_h

    def latent(self, csi, bsnr) -> torch.Tensor:
        taps_c, taps_h = self.taps(csi, bsnr)
        return self.fusion(taps_c, taps_h)

    def forward(self, csi, bsnr) -> torch.Tensor:
        if self.head is None:
            raise ValueError("model has no task head")
        return self.head(self.latent(csi, bsnr))

    def reconstruct(self, f: torch.Tensor, csi: bool = True, bsnr: bool = True):
        """Decode f into (csi_hat, bsnr_hat); a branch is None if absent or not requested.

        For input fusion the single decoder output is split back into the CSI
        channels and the upsampled beam SNR channel.
        """
        if self.csi_decoder is None and self.bsnr_decoder is None:
            raise ValueError("model has no decoders")
        csi_hat = bsnr_hat = None
        if self.input_fusion:
            if csi or bsnr:
                out = self.csi_decoder(f)
                csi_hat, bsnr_hat = out[:, :-1], out[:, -1]
            return (csi_hat if csi else None), (bsnr_hat if bsnr else None)
        if csi and self.csi_decoder is not None:
            csi_hat = self.csi_decoder(f)
        if bsnr and self.bsnr_decoder is not None:
            bsnr_hat = self.bsnr_decoder(f)[:, 0]
        return csi_hat, bsnr_hat

    def reconstruction_targets(self, csi, bsnr):
        if self.input_fusion:
            return csi, self.upsample_bsnr(bsnr)[:, 0]
        return (csi if self.uses_csi else None), (bsnr if self.uses_bsnr else None)

    # -- bookkeeping ----------------------------------------------------------

    def learning_group(self, name: str) -> str:
        return learning_group(name)

    def grouped_parameters(self):
        return [(n, p, learning_group(n)) for n, p in self.named_parameters()]

    def encoder_modules(self) -> list[nn.Module]:
        return [m for m in (self.csi_encoder, self.bsnr_encoder) if m is not None]

    def architecture_dict(self) -> dict:
        d = self.arch.to_dict()
        d["pair_count"] = self.fusion.pair_count
        d["pairs"] = [list(p) for p in self.fusion.pairs]
        return d


def learning_group(name: str) -> str:
    if name.startswith(("csi_encoder.", "bsnr_encoder.")):
        return "encoder"
    if name == "fusion.weights":
        return "fusion_weights"
    if name.startswith("fusion."):
        return "fusion_proj"
    if name.startswith("head."):
        return "head"
    if name.startswith(("csi_decoder.", "bsnr_decoder.")):
        return "decoder"
    raise ValueError(f"parameter {name} belongs to no learning group")


def encode_branch(x: torch.Tensor, branch: EncoderBranch):
    if x.shape[1] != branch.channels[0] or x.shape[-1] != branch.widths[0]:
        raise ValueError(f"input shape {tuple(x.shape[1:])} != {(branch.channels[0], branch.widths[0])}")
    return branch(x)


def fuse_granularity(taps_csi, taps_bsnr, block: FusionBlock) -> torch.Tensor:
    return block(taps_csi, taps_bsnr)


def head_forward(f: torch.Tensor, head: OutputHead) -> torch.Tensor:
    if f.shape[-1] != head.layers[0].in_features:
        raise ValueError(f"latent width {f.shape[-1]} != head input {head.layers[0].in_features}")
    return head(f)


def decode_branches(f: torch.Tensor, dec_c: DecoderBranch, dec_h: DecoderBranch):
    return dec_c(f), dec_h(f)


def build_model(
    variant: str,
    task: Optional[str] = None,
    dims: Optional[ModelDims] = None,
    *,
    with_head: bool = True,
    with_decoders: bool = False,
    dtype: torch.dtype = torch.float32,
    seed: Optional[int] = None,
) -> FusionModel:
    """Construct a model variant.  ``task`` (pose/occupancy/localization) sets the class count."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}; choose from {VARIANTS}")
    dims = dims or ModelDims()
    if task is not None:
        if task not in TASK_CLASSES:
            raise ValueError(f"unknown task {task!r}")
        dims = replace(dims, num_classes=TASK_CLASSES[task])
    if seed is not None:
        torch.manual_seed(seed)
    return FusionModel(Architecture(variant, dims, with_head, with_decoders)).to(dtype)


def model_from_architecture(arch: dict, dtype: torch.dtype = torch.float32) -> FusionModel:
    return FusionModel(Architecture.from_dict(arch)).to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
