"""Dual temporal-shift residual extractors and the fused motion predictor."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .decouple import PreDecoupler, ShiftModuleConfig, frame_difference, make_activation, temporal_shift
from .labelkit import NUM_CLASSES


class ClipNormalizer(nn.Module):
    """Fixed per-channel normalization of raw clips and their frame differences."""

    def __init__(self, channels: int = 3, norm: dict | None = None):
        super().__init__()
        norm = norm or {}
        self.register_buffer("x_mean", torch.tensor(norm.get("x_mean", [0.0] * channels), dtype=torch.float32))
        self.register_buffer("x_std", torch.tensor(norm.get("x_std", [1.0] * channels), dtype=torch.float32))
        self.register_buffer("dx_mean", torch.tensor(norm.get("dx_mean", [0.0] * channels), dtype=torch.float32))
        self.register_buffer("dx_std", torch.tensor(norm.get("dx_std", [1.0] * channels), dtype=torch.float32))

    @staticmethod
    def _standardize(t, mean, std):
        return (t - mean.view(-1, 1, 1)) / std.view(-1, 1, 1)

    def forward(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self._standardize(raw, self.x_mean, self.x_std)
        dx = self._standardize(frame_difference(raw), self.dx_mean, self.dx_std)
        return x, dx


class ShiftBasicBlock(nn.Module):
    """Residual basic block with a temporal shift at the head of the residual branch.

    Operates on ``(B*T, C, H, W)`` with ``n_segment = T``.
    """

    def __init__(self, cin: int, cout: int, stride: int, fraction: float, activation: str):
        super().__init__()
        self.fraction = fraction
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.act = make_activation(activation)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x: torch.Tensor, n_segment: int) -> torch.Tensor:
        nt, c, h, w = x.shape
        out = temporal_shift(x.view(nt // n_segment, n_segment, c, h, w), self.fraction).view(nt, c, h, w)
        out = self.act(self.bn1(self.conv1(out)))
        out = self.bn2(self.conv2(out))
        identity = x if self.downsample is None else self.downsample(x)
        return self.act(out + identity)


class FeatureExtractor(nn.Module):
    """Temporal-shift residual net producing per-segment and pooled features."""

    def __init__(self, cfg: ModelConfig, in_channels: int = 3):
        super().__init__()
        w0 = cfg.widths[0]
        if cfg.stem_stride == 4:
            self.stem = nn.Sequential(
                nn.Conv2d(in_channels, w0, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(w0),
                make_activation(cfg.activation),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        elif cfg.stem_stride in (1, 2):
            self.stem = nn.Sequential(
                nn.Conv2d(in_channels, w0, 3, stride=cfg.stem_stride, padding=1, bias=False),
                nn.BatchNorm2d(w0),
                make_activation(cfg.activation),
            )
        else:
            raise ValueError(f"stem_stride must be 1, 2 or 4, got {cfg.stem_stride}")
        blocks = []
        cin = w0
        for i, width in enumerate(cfg.widths):
            for j in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(ShiftBasicBlock(cin, width, stride, cfg.shift_fraction, cfg.activation))
                cin = width
        self.blocks = nn.ModuleList(blocks)
        self.proj = nn.Linear(cin, cfg.feature_dim, bias=False) if cin != cfg.feature_dim else None
        self.feature_dim = cfg.feature_dim
        self.in_channels = in_channels

    def forward(self, clip: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if clip.dim() != 5 or clip.shape[2] != self.in_channels:
            raise ValueError(f"expected (B, T, {self.in_channels}, H, W) input, got {tuple(clip.shape)}")
        b, t = clip.shape[:2]
        h = self.stem(clip.reshape(b * t, *clip.shape[2:]))
        for block in self.blocks:
            h = block(h, t)
        seq = h.mean(dim=(2, 3)).view(b, t, -1)
        if self.proj is not None:
            seq = self.proj(seq)
        return seq, seq.mean(dim=1)


class MotionPredictor(nn.Module):
    """Temporal shift head over the concatenated stream sequences."""

    def __init__(self, in_dim: int, hidden: int, fraction: float, activation: str):
        super().__init__()
        self.fraction = fraction
        self.fc1 = nn.Linear(in_dim, hidden, bias=False)
        self.act = make_activation(activation)
        self.fc2 = nn.Linear(hidden, NUM_CLASSES)

    def forward(self, *seqs: torch.Tensor) -> torch.Tensor:
        shapes = {(s.shape[0], s.shape[1]) for s in seqs}
        if len(shapes) != 1:
            raise ValueError(f"stream sequences disagree on (B, T): {shapes}")
        h = torch.cat(seqs, dim=-1)
        if h.shape[-1] != self.fc1.in_features:
            raise ValueError(f"predictor expects {self.fc1.in_features} channels, got {h.shape[-1]}")
        h = temporal_shift(h[..., None, None], self.fraction)[..., 0, 0]
        h = self.act(self.fc1(h)).mean(dim=1)
        return self.fc2(h)


class DMSDNet(nn.Module):
    """Pre-decoupling, two parameter-disjoint extractors and the fused predictor.

    ``arch="single"`` drops the pre-decoupling and feeds the normalized clip
    to one extractor; it serves as the single-stream ablation baseline.
    """

    def __init__(self, cfg: ModelConfig, norm: dict | None = None, channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.normalizer = ClipNormalizer(channels, norm)
        hidden = cfg.head_hidden or cfg.feature_dim
        if cfg.arch == "dmsd":
            shift_cfg = ShiftModuleConfig(cfg.expand_factor, cfg.shift_fraction, cfg.reweight, cfg.activation)
            self.decoupler = PreDecoupler(channels, shift_cfg)
            self.scenario_net = FeatureExtractor(cfg, channels)
            self.motion_net = FeatureExtractor(cfg, channels)
            self.predictor = MotionPredictor(2 * cfg.feature_dim, hidden, cfg.shift_fraction, cfg.activation)
        elif cfg.arch == "single":
            self.decoupler = None
            self.scenario_net = None
            self.motion_net = FeatureExtractor(cfg, channels)
            self.predictor = MotionPredictor(cfg.feature_dim, hidden, cfg.shift_fraction, cfg.activation)
        else:
            raise ValueError(f"unknown arch {cfg.arch!r}")

    def set_norm(self, norm: dict) -> None:
        for key in ("x_mean", "x_std", "dx_mean", "dx_std"):
            getattr(self.normalizer, key).copy_(torch.tensor(norm[key], dtype=torch.float32))

    def backbone_parameters(self) -> list[nn.Parameter]:
        """theta: everything except the predictor head."""
        head = {id(p) for p in self.predictor.parameters()}
        return [p for p in self.parameters() if id(p) not in head]

    def head_parameters(self) -> list[nn.Parameter]:
        """omega: the predictor head."""
        return list(self.predictor.parameters())

    def decoupled(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x, dx = self.normalizer(raw)
        if self.decoupler is None:
            return x, x
        return self.decoupler(x, dx)

    def features(self, raw: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-segment sequences and pooled vectors of both streams."""
        u, v = self.decoupled(raw)
        m_seq, m = self.motion_net(v)
        if self.scenario_net is None:
            return {"s_seq": m_seq, "m_seq": m_seq, "s": m, "m": m}
        s_seq, s = self.scenario_net(u)
        return {"s_seq": s_seq, "m_seq": m_seq, "s": s, "m": m}

    def predict(self, feats: dict[str, torch.Tensor]) -> torch.Tensor:
        if self.scenario_net is None:
            return self.predictor(feats["m_seq"])
        return self.predictor(feats["s_seq"], feats["m_seq"])

    def forward(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        feats = self.features(raw)
        return self.predict(feats), feats["s"], feats["m"]


def extract(net: FeatureExtractor, clip: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return net(clip)


def forward_full(model: DMSDNet, raw: torch.Tensor):
    """``(logits, (s, m))`` for a batch of raw clips."""
    logits, s, m = model(raw)
    return logits, (s, m)


def probabilities(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=-1)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def closed_form_parameter_count(cfg: ModelConfig, channels: int = 3) -> int:
    """Parameter count implied by the configuration alone."""

    def bn(c):
        return 2 * c

    def removal(c):
        hid = c * cfg.expand_factor
        block = hid * hid * 9 + hid + (hid if cfg.reweight else 0)
        return (c * hid + hid) + 2 * block + (hid * c + c)

    def extractor():
        w0 = cfg.widths[0]
        k = 7 if cfg.stem_stride == 4 else 3
        total = channels * w0 * k * k + bn(w0)
        cin = w0
        for i, width in enumerate(cfg.widths):
            for j in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                total += cin * width * 9 + bn(width) + width * width * 9 + bn(width)
                if stride != 1 or cin != width:
                    total += cin * width + bn(width)
                cin = width
        if cin != cfg.feature_dim:
            total += cin * cfg.feature_dim
        return total

    hidden = cfg.head_hidden or cfg.feature_dim
    streams = 2 if cfg.arch == "dmsd" else 1
    head = streams * cfg.feature_dim * hidden + hidden * NUM_CLASSES + NUM_CLASSES
    total = streams * extractor() + head
    if cfg.arch == "dmsd":
        total += 2 * removal(channels)
    return total
