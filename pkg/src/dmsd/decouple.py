"""Pre-decoupling of an input clip into scenario- and motion-relative terms.

Clips are tensors shaped ``(B, T, C, H, W)``. The motion removal module
(MRM) sees frame differences ``I_t - I_0`` and its output is subtracted from
the clip to leave the scenario-relative term ``u``. The scenario removal
module (SRM) sees the clip itself and its output is subtracted to leave the
motion-relative term ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class ShiftModuleConfig:
    expand_factor: int = 4
    shift_fraction: float = 1 / 8
    reweight: bool = True
    activation: str = "silu"

    def __post_init__(self):
        if self.expand_factor < 1:
            raise ValueError("expand_factor must be >= 1")
        if not 0.0 <= self.shift_fraction <= 0.5:
            raise ValueError("shift_fraction must lie in [0, 0.5]")


def make_activation(name: str) -> nn.Module:
    if name == "silu":
        return nn.SiLU()
    if name == "relu":
        return nn.ReLU()
    if name == "gelu":
        return nn.GELU()
    raise ValueError(f"unknown activation {name!r}")


def temporal_shift(f: torch.Tensor, fraction: float = 1 / 8) -> torch.Tensor:
    """Shift channel groups one step along time.

    ``f`` is ``(..., T, C, H, W)``. The first ``floor(fraction * C)`` channels
    take their value from ``t + 1``, the next group from ``t - 1``; vacated
    steps are zero and the remaining channels pass through.
    """
    t_dim = f.dim() - 4
    c = f.shape[-3]
    fold = int(fraction * c)
    if fold == 0:
        return f
    back, fwd, rest = f[..., :fold, :, :], f[..., fold : 2 * fold, :, :], f[..., 2 * fold :, :, :]
    zb = torch.zeros_like(back.narrow(t_dim, 0, 1))
    zf = torch.zeros_like(fwd.narrow(t_dim, 0, 1))
    t = f.shape[t_dim]
    back = torch.cat([back.narrow(t_dim, 1, t - 1), zb], dim=t_dim)
    fwd = torch.cat([zf, fwd.narrow(t_dim, 0, t - 1)], dim=t_dim)
    return torch.cat([back, fwd, rest], dim=-3)


def frame_difference(x: torch.Tensor) -> torch.Tensor:
    """``out[:, t] = x[:, t] - x[:, 0]`` for a ``(B, T, C, H, W)`` clip."""
    return x - x[:, :1]


def _per_frame(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    b, t = x.shape[:2]
    y = module(x.reshape(b * t, *x.shape[2:]))
    return y.reshape(b, t, *y.shape[1:])


class ShiftBlock(nn.Module):
    """temporal shift -> per-channel scale -> 3x3 conv -> nonlinearity."""

    def __init__(self, channels: int, cfg: ShiftModuleConfig):
        super().__init__()
        self.fraction = cfg.shift_fraction
        self.scale = nn.Parameter(torch.ones(channels)) if cfg.reweight else None
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = make_activation(cfg.activation)

    def forward(self, x):
        x = temporal_shift(x, self.fraction)
        if self.scale is not None:
            x = x * self.scale.view(-1, 1, 1)
        return self.act(_per_frame(self.conv, x))


class RemovalModule(nn.Module):
    """Shared architecture of the motion and scenario removal modules.

    1x1 expand to ``expand_factor * C`` channels, two shift blocks, 1x1 reduce
    back to ``C``. The reducing convolution starts at zero so the residual
    subtraction is initially the identity.
    """

    def __init__(self, channels: int = 3, cfg: ShiftModuleConfig = ShiftModuleConfig()):
        super().__init__()
        hidden = channels * cfg.expand_factor
        self.channels = channels
        self.expand = nn.Conv2d(channels, hidden, 1)
        self.blocks = nn.Sequential(ShiftBlock(hidden, cfg), ShiftBlock(hidden, cfg))
        self.reduce = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.reduce.weight)
        nn.init.zeros_(self.reduce.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[2] != self.channels:
            raise ValueError(f"expected (B, T, {self.channels}, H, W) input, got {tuple(x.shape)}")
        h = _per_frame(self.expand, x)
        h = self.blocks(h)
        return _per_frame(self.reduce, h)


class PreDecoupler(nn.Module):
    """Produces ``u = x - mrm(dx)`` and ``v = x - srm(x)``."""

    def __init__(self, channels: int = 3, cfg: ShiftModuleConfig = ShiftModuleConfig()):
        super().__init__()
        self.mrm = RemovalModule(channels, cfg)
        self.srm = RemovalModule(channels, cfg)

    def forward(self, x: torch.Tensor, dx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return pre_decouple(x, dx, self.mrm, self.srm)


def pre_decouple(x, dx, mrm: nn.Module, srm: nn.Module) -> tuple[torch.Tensor, torch.Tensor]:
    """Residual subtraction of the removal modules' outputs.

    ``dx`` is the (normalized) frame difference of ``x``.
    """
    u = x - mrm(dx)
    v = x - srm(x)
    return u, v
