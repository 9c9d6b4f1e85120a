"""Action detection network: class prediction plus a per-frame localization map.

The encoder is a stack of strided spatio-temporal convolutions. The classifier
pools the deepest features over time and either routes capsules on the
resulting 2D map (``capsule2d``) or applies a small MLP (``dense``). The
decoder starts from the deepest features shifted by a projection of the
predicted class capsule (the pose of the argmax class, other capsules
zeroed) and climbs back to half the input resolution through skip
connections; its logits are bilinearly upsampled to the input grid before the sigmoid.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    num_classes: int = 5
    in_channels: int = 3
    encoder_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    temporal_kernel: int = 3
    head: str = "capsule2d"
    primary_capsules: int = 8
    primary_dim: int = 8
    capsule_dim: int = 16
    routing_iters: int = 3
    dense_hidden: int = 64
    decoder_channels: list[int] = field(default_factory=lambda: [16, 8])
    decoder_condition: bool = True
    output_size: list[int] = field(default_factory=lambda: [8, 64, 64])

    def __post_init__(self):
        if self.head not in ("capsule2d", "dense"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.routing_iters < 1:
            raise ValueError("routing_iters must be >= 1")
        if len(self.decoder_channels) != len(self.encoder_channels) - 1:
            raise ValueError("decoder_channels needs one entry per encoder level but the first")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.temporal_kernel % 2 != 1:
            raise ValueError("temporal_kernel must be odd")
        factor = 2 ** len(self.encoder_channels)
        t, h, w = self.output_size
        if h % factor or w % factor:
            raise ValueError(f"output size {h}x{w} must be divisible by {factor}")
        self.encoder_channels = list(self.encoder_channels)
        self.decoder_channels = list(self.decoder_channels)
        self.output_size = list(self.output_size)

    def to_dict(self) -> dict:
        return asdict(self)


class ModelOutput(NamedTuple):
    class_scores: torch.Tensor  # B x K in [0, 1]
    penultimate: torch.Tensor  # B x D
    loc: torch.Tensor  # B x T x H x W in [0, 1]


def squash(s: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    """Shrink ``s`` to length ``|s|^2 / (1 + |s|^2)`` keeping its direction."""
    n2 = (s * s).sum(dim=dim, keepdim=True)
    return s * (n2 / (1.0 + n2) / torch.sqrt(n2 + eps))


def route_capsules_2d(u_hat: torch.Tensor, routing_iters: int):
    """Dynamic routing by agreement.

    ``u_hat`` holds the prediction vectors with shape (B, N_in, K, D). Returns
    the output capsules (B, K, D) and the final coupling coefficients
    (B, N_in, K), which sum to one over K for every input capsule.
    """
    if routing_iters < 1:
        raise ValueError("routing_iters must be >= 1")
    b = torch.zeros(u_hat.shape[:3], dtype=u_hat.dtype, device=u_hat.device)
    for it in range(routing_iters):
        c = torch.softmax(b, dim=2)
        s = (c.unsqueeze(-1) * u_hat).sum(dim=1)
        v = squash(s)
        if it + 1 < routing_iters:
            b = b + (u_hat * v.unsqueeze(1)).sum(dim=-1)
    return v, c


class CapsuleHead(nn.Module):
    def __init__(self, cfg: ModelConfig, in_channels: int):
        super().__init__()
        self.p, self.dp = cfg.primary_capsules, cfg.primary_dim
        self.k, self.d = cfg.num_classes, cfg.capsule_dim
        self.iters = cfg.routing_iters
        self.primary = nn.Conv2d(in_channels, self.p * self.dp, 3, stride=2, padding=1)
        # transform matrices are shared across spatial positions, one per capsule type
        self.weight = nn.Parameter(torch.empty(self.p, self.k, self.d, self.dp))

    def forward(self, feat2d):
        bsz = feat2d.shape[0]
        u = self.primary(feat2d)  # B x P*dp x h x w
        u = u.reshape(bsz, self.p, self.dp, -1).permute(0, 3, 1, 2)  # B x S x P x dp
        u = squash(u)
        u_hat = torch.einsum("bspi,pkoi->bspko", u, self.weight)
        u_hat = u_hat.reshape(bsz, -1, self.k, self.d)
        v, _ = route_capsules_2d(u_hat, self.iters)
        scores = torch.sqrt((v * v).sum(-1) + 1e-12)
        # the decoder only sees the pose of the predicted class
        keep = F.one_hot(scores.detach().argmax(-1), self.k).to(v.dtype)
        return scores, v.reshape(bsz, -1), (v * keep[..., None]).reshape(bsz, -1)


class DenseHead(nn.Module):
    def __init__(self, cfg: ModelConfig, in_channels: int):
        super().__init__()
        self.hidden = nn.Linear(in_channels, cfg.dense_hidden)
        self.out = nn.Linear(cfg.dense_hidden, cfg.num_classes)

    def forward(self, feat2d):
        h = F.relu(self.hidden(feat2d.mean(dim=(2, 3))))
        return torch.sigmoid(self.out(h)), h, h


class ActionDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        kt = cfg.temporal_kernel
        chans = [cfg.in_channels] + cfg.encoder_channels
        self.encoder = nn.ModuleList(
            nn.Conv3d(cin, cout, (kt, 3, 3), stride=(1, 2, 2), padding=(kt // 2, 1, 1))
            for cin, cout in zip(chans[:-1], chans[1:])
        )
        head_cls = CapsuleHead if cfg.head == "capsule2d" else DenseHead
        self.head = head_cls(cfg, chans[-1])
        cond_dim = cfg.num_classes * cfg.capsule_dim if cfg.head == "capsule2d" else cfg.dense_hidden
        self.condition = nn.Linear(cond_dim, chans[-1]) if cfg.decoder_condition else None
        # decoder convs are purely spatial; temporal context comes from the encoder
        self.decoder = nn.ModuleList()
        prev = chans[-1]
        for level, cout in enumerate(cfg.decoder_channels):
            skip = chans[-2 - level]
            self.decoder.append(nn.Conv3d(prev + skip, cout, (1, 3, 3), padding=(0, 1, 1)))
            prev = cout
        self.out = nn.Conv3d(prev, 1, 1)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        """``x`` is B x C x T x H x W."""
        expected = (self.cfg.in_channels, *self.cfg.output_size)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input of shape (B, {', '.join(map(str, expected))}), "
                             f"got {tuple(x.shape)}")
        skips = [x]
        h = x
        for conv in self.encoder:
            h = F.relu(conv(h))
            skips.append(h)
        scores, penultimate, cond = self.head(h.mean(dim=2))
        if self.condition is not None:
            h = F.relu(h + self.condition(cond)[:, :, None, None, None])
        for level, conv in enumerate(self.decoder):
            h = F.interpolate(h, scale_factor=(1, 2, 2), mode="nearest")
            h = F.relu(conv(torch.cat([h, skips[-2 - level]], dim=1)))
        # logits leave the decoder at half resolution
        logits = self.out(h)[:, 0]
        logits = F.interpolate(logits, size=tuple(x.shape[-2:]), mode="bilinear", align_corners=False)
        return ModelOutput(scores, penultimate, torch.sigmoid(logits))


def init_bound(param_shape) -> float:
    """He-uniform bound ``sqrt(6 / fan_in)`` for a weight of the given shape."""
    fan_in = math.prod(param_shape[1:]) if len(param_shape) > 1 else param_shape[0]
    return math.sqrt(6.0 / fan_in)


def num_input_capsules(cfg: ModelConfig) -> int:
    factor = 2 ** len(cfg.encoder_channels)
    h, w = (math.ceil(n / factor / 2) for n in cfg.output_size[1:])
    return h * w * cfg.primary_capsules


def init_params(cfg: ModelConfig, seed: int, dtype=torch.float32) -> ActionDetector:
    """Build a model with seeded He-uniform weights and zero biases."""
    model = ActionDetector(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif name == "head.weight":
                # every class capsule sums predictions from all routed input capsules
                bound = math.sqrt(6.0 / (p.shape[-1] * num_input_capsules(cfg)))
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            else:
                bound = init_bound(tuple(p.shape))
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return model.to(dtype)


def clips_to_tensor(clips, dtype=torch.float32) -> torch.Tensor:
    """Stack clips (T x H x W x C pixels) into a B x C x T x H x W tensor."""
    arr = np.stack([c.pixels for c in clips]).transpose(0, 4, 1, 2, 3)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def param_digest(model: nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
