"""
Network architectures.

All models share one compact convolutional encoder-decoder (one stride-2
level with a skip connection) that works on 2-D or 3-D grids. Inputs are
prepended with fixed sinusoidal channels for absolute position and time.
"""
import copy
import math
from typing import Any, Dict, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..utils.errors import ConfigurationError, NumericalError


def position_channels(dims: Sequence[int], n_freq: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """sin/cos(2^k pi xi) per axis on the unit cube: shape (2 * n_freq * len(dims), *dims)."""
    axes = [torch.linspace(0.0, 1.0, n, dtype=dtype) for n in dims]
    mesh = torch.meshgrid(*axes, indexing="ij")
    chans = []
    for xi in mesh:
        for k in range(n_freq):
            chans.append(torch.sin((2 ** k) * math.pi * xi))
            chans.append(torch.cos((2 ** k) * math.pi * xi))
    return torch.stack(chans)


def time_channels(t: torch.Tensor, n_freq: int, batch: int, dims: Sequence[int]) -> torch.Tensor:
    """sin/cos(2^k pi t) broadcast over the grid: shape (batch, 2 * n_freq, *dims)."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if t.numel() == 1:
        t = t.expand(batch)
    freqs = (2.0 ** torch.arange(n_freq, dtype=torch.float64)) * math.pi
    ang = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    return emb.reshape(batch, 2 * n_freq, *([1] * len(dims))).expand(batch, 2 * n_freq, *dims)


class ConvEncoderDecoder(nn.Module):
    """conv -> stride-2 down -> conv -> upsample -> skip merge -> 1x1 head."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int, ndim: int = 2, zero_head: bool = False):
        super().__init__()
        if ndim not in (2, 3):
            raise ConfigurationError("encoder-decoder supports 2-D or 3-D grids")
        Conv = nn.Conv2d if ndim == 2 else nn.Conv3d
        self.ndim = ndim
        self.mode = "bilinear" if ndim == 2 else "trilinear"
        conv = dict(kernel_size=3, padding=1, padding_mode="replicate")
        self.inc = nn.Sequential(Conv(in_channels, hidden, **conv), nn.GELU(), Conv(hidden, hidden, **conv), nn.GELU())
        self.down = nn.Sequential(Conv(hidden, 2 * hidden, stride=2, **conv), nn.GELU(),
                                  Conv(2 * hidden, 2 * hidden, **conv), nn.GELU())
        self.up = nn.Sequential(Conv(2 * hidden, hidden, **conv), nn.GELU())
        self.merge = nn.Sequential(Conv(2 * hidden, hidden, **conv), nn.GELU())
        self.head = Conv(hidden, out_channels, kernel_size=1)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        skip = self.inc(z)
        low = self.down(skip)
        up = F.interpolate(low, size=skip.shape[2:], mode=self.mode, align_corners=True)
        return self.head(self.merge(torch.cat([skip, self.up(up)], dim=1)))


def _check_finite(x: torch.Tensor, what: str):
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite {what}")


class VectorFieldModel(nn.Module):
    """Base velocity v(x, t) on standardized states of shape (B, *dims)."""

    def __init__(self, dims: Sequence[int], hidden: int = 32, n_freq: int = 2, zero_head: bool = False):
        super().__init__()
        self.dims = tuple(dims)
        self.hidden = hidden
        self.n_freq = n_freq
        self.zero_head = zero_head
        ndim = len(self.dims)
        in_ch = 1 + 2 * n_freq * ndim + 2 * n_freq
        self.net = ConvEncoderDecoder(in_ch, 1, hidden, ndim, zero_head)
        self.register_buffer("pos", position_channels(self.dims, n_freq))
        self.register_buffer("data_mean", torch.zeros((), dtype=torch.float64))
        self.register_buffer("data_std", torch.ones((), dtype=torch.float64))
        self.double()

    def descriptor(self) -> Dict[str, Any]:
        return {"kind": "vector_field", "dims": list(self.dims), "hidden": self.hidden,
                "n_freq": self.n_freq, "zero_head": self.zero_head}

    def set_standardization(self, mean: float, std: float):
        self.data_mean.fill_(float(mean))
        self.data_std.fill_(float(std))

    def standardize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.data_mean) / self.data_std

    def destandardize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.data_std + self.data_mean

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        _check_finite(x, "state")
        b = x.shape[0]
        z = torch.cat([x.unsqueeze(1), self.pos.to(x.dtype).expand(b, *self.pos.shape),
                       time_channels(t, self.n_freq, b, self.dims).to(x.dtype)], dim=1)
        return self.net(z).squeeze(1)


class InversePredictor(nn.Module):
    """phi: physical-unit state -> strictly positive parameter field on the spatial grid.

    Space-time states are folded so that frames become input channels.
    """

    def __init__(self, dims: Sequence[int], out_range: Tuple[float, float], hidden: int = 32, n_freq: int = 2,
                 input_mean: float = 0.0, input_std: float = 1.0):
        super().__init__()
        lo, hi = out_range
        if not 0 < lo < hi:
            raise ConfigurationError(f"inverse output range must satisfy 0 < lo < hi, got {out_range}")
        self.dims = tuple(dims)
        self.spatial_dims = self.dims[-2:]
        self.frames = self.dims[0] if len(self.dims) == 3 else 1
        self.hidden = hidden
        self.n_freq = n_freq
        self.out_range = (float(lo), float(hi))
        in_ch = self.frames + 4 * n_freq
        self.net = ConvEncoderDecoder(in_ch, 1, hidden, 2)
        self.register_buffer("pos", position_channels(self.spatial_dims, n_freq))
        self.register_buffer("input_mean", torch.tensor(float(input_mean), dtype=torch.float64))
        self.register_buffer("input_std", torch.tensor(float(input_std), dtype=torch.float64))
        self.double()

    def descriptor(self) -> Dict[str, Any]:
        return {"kind": "inverse", "dims": list(self.dims), "hidden": self.hidden, "n_freq": self.n_freq,
                "out_range": list(self.out_range)}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_finite(x, "inverse input")
        b = x.shape[0]
        z = ((x - self.input_mean) / self.input_std).reshape(b, self.frames, *self.spatial_dims)
        z = torch.cat([z, self.pos.to(x.dtype).expand(b, *self.pos.shape)], dim=1)
        lo, hi = self.out_range
        return lo + (hi - lo) * torch.sigmoid(self.net(z).squeeze(1))


class FinetuneModel(nn.Module):
    """Fine-tuned joint velocity (v_x, v_alpha).

    A frozen copy of the base model gives the preliminary v_x; a correction head
    sees (v_prelim, x, alpha) and a residual head for v_alpha sees
    (v_alpha_base, x, alpha). Both heads end in a zero-initialized 1x1 conv.
    """

    def __init__(self, base: VectorFieldModel, hidden: int = 16, alpha_scale: float = 1.0):
        super().__init__()
        self.base = copy.deepcopy(base)
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.dims = base.dims
        self.spatial_dims = self.dims[-2:]
        self.temporal = len(self.dims) == 3
        self.frames = self.dims[0] if self.temporal else 1
        self.hidden = hidden
        n_freq = base.n_freq
        ndim = len(self.dims)
        self.x_head = ConvEncoderDecoder(3 + 2 * n_freq * ndim + 2 * n_freq, 1, hidden, ndim, zero_head=True)
        self.alpha_head = ConvEncoderDecoder(2 + self.frames + 4 * n_freq + 2 * n_freq, 1, hidden, 2, zero_head=True)
        self.register_buffer("alpha_pos", position_channels(self.spatial_dims, n_freq))
        self.register_buffer("alpha_scale", torch.tensor(float(alpha_scale), dtype=torch.float64))
        self.double()

    def descriptor(self) -> Dict[str, Any]:
        return {"kind": "finetune", "hidden": self.hidden, "alpha_scale": float(self.alpha_scale),
                "base": self.base.descriptor()}

    def standardize(self, x):
        return self.base.standardize(x)

    def destandardize(self, x):
        return self.base.destandardize(x)

    def forward(self, x: torch.Tensor, alpha: torch.Tensor, v_alpha_base: torch.Tensor, t):
        if alpha.shape[-2:] != self.spatial_dims or v_alpha_base.shape != alpha.shape:
            raise ConfigurationError("alpha and v_alpha_base must live on the spatial grid")
        b = x.shape[0]
        n_freq = self.base.n_freq
        v_prelim = self.base(x, t)
        a = alpha / self.alpha_scale
        a_full = a.unsqueeze(1).expand(b, self.frames, *self.spatial_dims) if self.temporal else a
        zx = torch.cat([v_prelim.unsqueeze(1), x.unsqueeze(1), a_full.unsqueeze(1),
                        self.base.pos.to(x.dtype).expand(b, *self.base.pos.shape),
                        time_channels(t, n_freq, b, self.dims).to(x.dtype)], dim=1)
        v_x = v_prelim + self.x_head(zx).squeeze(1)

        x_folded = x.reshape(b, self.frames, *self.spatial_dims)
        za = torch.cat([(v_alpha_base / self.alpha_scale).unsqueeze(1), x_folded, a.unsqueeze(1),
                        self.alpha_pos.to(x.dtype).expand(b, *self.alpha_pos.shape),
                        time_channels(t, n_freq, b, self.spatial_dims).to(x.dtype)], dim=1)
        v_alpha = v_alpha_base + self.alpha_scale * self.alpha_head(za).squeeze(1)
        return v_x, v_alpha


class AnalyticGaussianFlow(nn.Module):
    """Exact OT velocity transporting N(0, 1) to N(mu, s^2) coordinate-wise."""

    def __init__(self, mu: float, s: float):
        super().__init__()
        self.mu = float(mu)
        self.s = float(s)

    def descriptor(self) -> Dict[str, Any]:
        return {"kind": "gaussian", "mu": self.mu, "s": self.s}

    def standardize(self, x):
        return x

    def destandardize(self, x):
        return x

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=x.dtype)
        s2 = self.s ** 2
        var = t ** 2 * s2 + (1 - t) ** 2
        return self.mu + (t * s2 - (1 - t)) / var * (x - t * self.mu)


class GaussianControlModel(nn.Module):
    """Base flow plus a zero-initialized MLP correction on (x, t); no parameter field."""

    def __init__(self, base: nn.Module, hidden: int = 32):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.hidden = hidden
        self.head = nn.Sequential(nn.Linear(2, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(),
                                  nn.Linear(hidden, 1))
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)
        self.double()

    def descriptor(self) -> Dict[str, Any]:
        return {"kind": "gaussian_control", "hidden": self.hidden, "base": self.base.descriptor()}

    def standardize(self, x):
        return x

    def destandardize(self, x):
        return x

    def forward(self, x: torch.Tensor, alpha=None, v_alpha_base=None, t=0.0):
        t_col = torch.as_tensor(t, dtype=x.dtype).expand(x.shape[0]).reshape(-1, *([1] * (x.dim() - 1)))
        feats = torch.stack([x, t_col.expand_as(x)], dim=-1)
        return self.base(x, t) + self.head(feats).squeeze(-1), None


def build_model(descriptor: Dict[str, Any]) -> nn.Module:
    """Instantiate an untrained model from its descriptor."""
    kind = descriptor.get("kind")
    if kind == "vector_field":
        return VectorFieldModel(descriptor["dims"], descriptor["hidden"], descriptor["n_freq"],
                                descriptor.get("zero_head", False))
    if kind == "inverse":
        return InversePredictor(descriptor["dims"], tuple(descriptor["out_range"]), descriptor["hidden"],
                                descriptor["n_freq"])
    if kind == "finetune":
        return FinetuneModel(build_model(descriptor["base"]), descriptor["hidden"], descriptor["alpha_scale"])
    if kind == "gaussian":
        return AnalyticGaussianFlow(descriptor["mu"], descriptor["s"])
    if kind == "gaussian_control":
        return GaussianControlModel(build_model(descriptor["base"]), descriptor["hidden"])
    raise ConfigurationError(f"unknown model kind '{kind}'")


def trainable_parameters(model: nn.Module):
    return [p for p in model.parameters() if p.requires_grad]


def param_gradient(model: nn.Module, closure) -> torch.Tensor:
    """Flat gradient of closure() w.r.t. trainable parameters; frozen ones are excluded."""
    params = trainable_parameters(model)
    with torch.enable_grad():
        loss = closure()
        if not torch.isfinite(loss).all():
            raise NumericalError("non-finite loss in parameter gradient")
        if not loss.requires_grad:
            return torch.cat([torch.zeros_like(p).reshape(-1) for p in params])
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])


def input_vjp(fn, inputs: Sequence[torch.Tensor], cotangent: torch.Tensor) -> Tuple[torch.Tensor, ...]:
    """Vector-Jacobian product of fn(*inputs) with a cotangent, per input."""
    xs = [i.detach().clone().requires_grad_(True) for i in inputs]
    with torch.enable_grad():
        out = fn(*xs)
        if out.shape != cotangent.shape:
            raise ConfigurationError(f"cotangent shape {tuple(cotangent.shape)} != output {tuple(out.shape)}")
        grads = torch.autograd.grad(out, xs, cotangent, allow_unused=True)
    return tuple(torch.zeros_like(x) if g is None else g for x, g in zip(xs, grads))
