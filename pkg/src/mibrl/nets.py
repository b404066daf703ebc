"""Encoders, fusion, stochastic encoder, contrastive heads and EMA targets."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterable, Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

STD_FLOOR = 1e-4
MODALITIES = ("both", "image", "proprio")


@dataclass
class NetConfig:
    """Sizes of every network in the representation model.

    Defaults are the full-size architecture; the miniature gradient-check
    bundle and the desk-scale smoke runs only override widths.
    """

    proprio_dim: int
    action_dim: int
    frame_stack: int = 3
    image_size: int = 84
    latent_dim: int = 50
    conv_layers: int = 4
    conv_channels: int = 32
    first_stride: int = 2
    proprio_hidden: int = 512
    fusion_hidden: int = 1024
    stochastic_hidden: int = 1024
    projection_hidden: int = 1024
    modalities: str = "both"

    def __post_init__(self):
        if self.modalities not in MODALITIES:
            raise ValueError(f"modalities must be one of {MODALITIES}, got {self.modalities!r}")
        for name in ("proprio_dim", "action_dim", "frame_stack", "image_size", "latent_dim", "conv_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def image_channels(self) -> int:
        return 3 * self.frame_stack


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the bottleneck variable."""

    mean: torch.Tensor
    stddev: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.stddev.shape:
            raise ValueError("mean and stddev shapes differ")


def weight_init(m: nn.Module) -> None:
    """Orthogonal init for linear layers, delta-orthogonal for convolutions."""
    if isinstance(m, nn.Linear):
        nn.init.orthogonal_(m.weight.data)
        m.bias.data.fill_(0.0)
    elif isinstance(m, nn.Conv2d):
        m.weight.data.fill_(0.0)
        m.bias.data.fill_(0.0)
        mid = m.kernel_size[0] // 2
        gain = nn.init.calculate_gain("relu")
        nn.init.orthogonal_(m.weight.data[:, :, mid, mid], gain)


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


def _check_last_dim(x: torch.Tensor, dim: int, what: str) -> None:
    if x.shape[-1] != dim:
        raise ValueError(f"{what}: expected last dim {dim}, got {tuple(x.shape)}")


class ImageEncoder(nn.Module):
    """Conv stack -> linear -> LayerNorm -> tanh."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.in_shape = (cfg.image_channels, cfg.image_size, cfg.image_size)
        layers: list[nn.Module] = []
        channels = cfg.image_channels
        for k in range(cfg.conv_layers):
            stride = cfg.first_stride if k == 0 else 1
            layers += [nn.Conv2d(channels, cfg.conv_channels, 3, stride=stride), nn.ReLU()]
            channels = cfg.conv_channels
        self.convs = nn.Sequential(*layers)
        with torch.no_grad():
            flat = self.convs(torch.zeros(1, *self.in_shape)).numel()
        self.fc = nn.Linear(flat, cfg.latent_dim)
        self.ln = nn.LayerNorm(cfg.latent_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if tuple(image.shape[-3:]) != self.in_shape:
            raise ValueError(f"image encoder expects {self.in_shape}, got {tuple(image.shape)}")
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        h = self.convs(image).flatten(1)
        out = torch.tanh(self.ln(self.fc(h)))
        return out.squeeze(0) if squeeze else out


class ProprioEncoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.in_dim = cfg.proprio_dim
        self.net = mlp(cfg.proprio_dim, cfg.proprio_hidden, cfg.latent_dim)

    def forward(self, proprio: torch.Tensor) -> torch.Tensor:
        _check_last_dim(proprio, self.in_dim, "proprio encoder")
        return self.net(proprio)


def concat_embeddings(modalities: str, c_image: torch.Tensor | None, c_proprio: torch.Tensor | None) -> torch.Tensor:
    """``[c_image; c_proprio]`` (image first), or the single enabled embedding."""
    if modalities == "both":
        return torch.cat([c_image, c_proprio], dim=-1)
    return c_image if modalities == "image" else c_proprio


class FusionModel(nn.Module):
    """Maps ``[c_image; c_proprio]`` (image first) to the joint representation.

    With a single modality enabled the MLP consumes only that embedding.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.modalities = cfg.modalities
        n_in = 2 if cfg.modalities == "both" else 1
        self.in_dim = n_in * cfg.latent_dim
        self.net = mlp(self.in_dim, cfg.fusion_hidden, cfg.latent_dim)

    def forward(self, c_image: torch.Tensor | None, c_proprio: torch.Tensor | None) -> torch.Tensor:
        x = concat_embeddings(self.modalities, c_image, c_proprio)
        _check_last_dim(x, self.in_dim, "fusion")
        return self.net(x)


class StochasticEncoder(nn.Module):
    """Joint representation ``j`` -> diagonal Gaussian (softplus stddev, floored).

    The posterior is conditioned on the modality embeddings through ``j``.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.in_dim = cfg.latent_dim
        self.net = mlp(cfg.latent_dim, cfg.stochastic_hidden, 2 * cfg.latent_dim)

    def forward(self, j: torch.Tensor) -> GaussianPosterior:
        _check_last_dim(j, self.in_dim, "stochastic encoder")
        return posterior_from_raw(self.net(j))


def posterior_from_raw(raw: torch.Tensor) -> GaussianPosterior:
    mean, raw_std = raw.chunk(2, dim=-1)
    return GaussianPosterior(mean, F.softplus(raw_std) + STD_FLOOR)


def sample_posterior(post: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mean + stddev * noise``."""
    return post.mean + post.stddev * noise


class PredictionHead(nn.Module):
    """Single linear map of ``[z; a]``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.in_dim = cfg.latent_dim + cfg.action_dim
        self.fc = nn.Linear(self.in_dim, cfg.latent_dim)

    def forward(self, z: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        x = torch.cat([z, action], dim=-1)
        _check_last_dim(x, self.in_dim, "prediction head")
        return self.fc(x)


class ProjectionHead(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.in_dim = cfg.latent_dim
        self.net = mlp(cfg.latent_dim, cfg.projection_hidden, cfg.latent_dim)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        _check_last_dim(v, self.in_dim, "projection head")
        return self.net(v)


@torch.no_grad()
def ema_update(online: nn.Module | Iterable[torch.Tensor], target: nn.Module | Iterable[torch.Tensor], tau: float) -> None:
    """In-place ``target <- (1 - tau) * target + tau * online``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    src = list(online.parameters()) if isinstance(online, nn.Module) else list(online)
    dst = list(target.parameters()) if isinstance(target, nn.Module) else list(target)
    if len(src) != len(dst):
        raise ValueError("online and target parameter lists differ in length")
    for p, tp in zip(src, dst):
        if p.shape != tp.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(tp.shape)}")
        if tau == 1.0:
            tp.copy_(p)
        else:
            tp.mul_(1.0 - tau).add_(p, alpha=tau)


TARGETED = ("image_encoder", "proprio_encoder", "fusion", "stochastic", "projection")


class RepresentationModel(nn.Module):
    """Online representation networks, the score matrix and their EMA targets.

    The prediction head and ``omega`` have no target copies.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.proprio_encoder = ProprioEncoder(cfg)
        self.fusion = FusionModel(cfg)
        self.stochastic = StochasticEncoder(cfg)
        self.prediction = PredictionHead(cfg)
        self.projection = ProjectionHead(cfg)
        self.apply(weight_init)
        self.omega = nn.Parameter(torch.empty(cfg.latent_dim, cfg.latent_dim).uniform_(-0.05, 0.05))
        self.target = nn.ModuleDict({name: copy.deepcopy(getattr(self, name)) for name in TARGETED})
        for p in self.target.parameters():
            p.requires_grad_(False)

    @property
    def uses_image(self) -> bool:
        return self.cfg.modalities in ("both", "image")

    @property
    def uses_proprio(self) -> bool:
        return self.cfg.modalities in ("both", "proprio")

    def _nets(self, target: bool):
        return self.target if target else self._modules

    def embed(self, image: torch.Tensor, proprio: torch.Tensor, target: bool = False):
        """Return ``(c_image, c_proprio)``; a disabled modality yields ``None``."""
        nets = self._nets(target)
        c_i = nets["image_encoder"](image) if self.uses_image else None
        c_p = nets["proprio_encoder"](proprio) if self.uses_proprio else None
        return c_i, c_p

    def joint(self, image: torch.Tensor, proprio: torch.Tensor, target: bool = False) -> torch.Tensor:
        c_i, c_p = self.embed(image, proprio, target)
        return self._nets(target)["fusion"](c_i, c_p)

    def posterior(self, j: torch.Tensor, target: bool = False) -> GaussianPosterior:
        return self._nets(target)["stochastic"](j)

    def project(self, v: torch.Tensor, target: bool = False) -> torch.Tensor:
        return self._nets(target)["projection"](v)

    def encoder_parameters(self) -> Iterator[nn.Parameter]:
        """Parameters on the observation -> joint-representation path."""
        for name in ("image_encoder", "proprio_encoder", "fusion"):
            yield from getattr(self, name).parameters()

    def online_parameters(self) -> Iterator[nn.Parameter]:
        """Everything optimized by the bottleneck objective."""
        yield from self.encoder_parameters()
        for name in ("stochastic", "prediction", "projection"):
            yield from getattr(self, name).parameters()
        yield self.omega

    @torch.no_grad()
    def update_targets(self, tau: float) -> None:
        for name in TARGETED:
            ema_update(getattr(self, name), self.target[name], tau)
