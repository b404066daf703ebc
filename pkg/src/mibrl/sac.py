"""Soft Actor-Critic on the joint representation.

Gradient routing: the critic loss reaches the observation encoders and the
fusion model; the actor and temperature see a detached joint representation.
The bottleneck loss is applied as its own optimizer step after the critic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import copy
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mib import LossBreakdown, mib_loss
from .nets import NetConfig, RepresentationModel, ema_update, weight_init

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0


@dataclass
class AgentConfig:
    net: NetConfig
    actor_hidden: int = 1024
    critic_hidden: int = 1024
    discount: float = 0.99
    alpha: float = 1e-4  # bottleneck KL weight
    init_temperature: float = 0.1
    critic_lr: float = 1e-3
    actor_lr: float = 1e-3
    temperature_lr: float = 1e-3
    mib_lr: float = 1e-4
    encoder_tau: float = 0.05
    critic_tau: float = 0.01
    actor_update_freq: int = 2
    critic_target_update_freq: int = 2
    use_mib: bool = True
    target_entropy: float | None = field(default=None)

    def __post_init__(self):
        if self.target_entropy is None:
            self.target_entropy = -float(self.net.action_dim)


def gaussian_log_prob(noise: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    residual = (-0.5 * noise.pow(2) - log_std).sum(-1, keepdim=True)
    return residual - 0.5 * math.log(2 * math.pi) * noise.shape[-1]


class Actor(nn.Module):
    """Tanh-squashed diagonal Gaussian policy over ``j``."""

    def __init__(self, latent_dim: int, action_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 2 * action_dim),
        )
        self.apply(weight_init)

    def distribution(self, j: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, raw_log_std = self.net(j).chunk(2, dim=-1)
        return mu, clamp_log_std(raw_log_std)

    def forward(self, j: torch.Tensor, generator: torch.Generator | None = None, deterministic: bool = False):
        """Return ``(action, log_prob, mu, log_std)``; ``log_prob`` is None if deterministic."""
        mu, log_std = self.distribution(j)
        if deterministic:
            return torch.tanh(mu), None, mu, log_std
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        u = mu + noise * log_std.exp()
        action = torch.tanh(u)
        log_prob = gaussian_log_prob(noise, log_std)
        log_prob = log_prob - torch.log(F.relu(1 - action.pow(2)) + 1e-6).sum(-1, keepdim=True)
        return action, log_prob, mu, log_std


def clamp_log_std(raw: torch.Tensor) -> torch.Tensor:
    return raw.clamp(LOG_STD_MIN, LOG_STD_MAX)


class QFunction(nn.Module):
    def __init__(self, latent_dim: int, action_dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim + action_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )

    def forward(self, j: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([j, action], dim=-1))


class Critic(nn.Module):
    def __init__(self, latent_dim: int, action_dim: int, hidden: int):
        super().__init__()
        self.q1 = QFunction(latent_dim, action_dim, hidden)
        self.q2 = QFunction(latent_dim, action_dim, hidden)
        self.apply(weight_init)

    def forward(self, j: torch.Tensor, action: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.q1(j, action), self.q2(j, action)


class MIBAgent:
    """Representation model + SAC actor/critic/temperature with their optimizers."""

    def __init__(self, cfg: AgentConfig):
        self.cfg = cfg
        latent, adim = cfg.net.latent_dim, cfg.net.action_dim
        self.model = RepresentationModel(cfg.net)
        self.actor = Actor(latent, adim, cfg.actor_hidden)
        self.critic = Critic(latent, adim, cfg.critic_hidden)
        self.critic_target = copy.deepcopy(self.critic)
        for p in self.critic_target.parameters():
            p.requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(cfg.init_temperature)))

        self.critic_optimizer = torch.optim.Adam(
            [*self.critic.parameters(), *self.model.encoder_parameters()], lr=cfg.critic_lr
        )
        self.mib_optimizer = torch.optim.Adam(self.model.online_parameters(), lr=cfg.mib_lr)
        self.actor_optimizer = torch.optim.Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.temperature_optimizer = torch.optim.Adam([self.log_alpha], lr=cfg.temperature_lr, betas=(0.5, 0.999))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def modules(self) -> dict[str, nn.Module]:
        return {"model": self.model, "actor": self.actor, "critic": self.critic, "critic_target": self.critic_target}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {
            "critic_optimizer": self.critic_optimizer,
            "mib_optimizer": self.mib_optimizer,
            "actor_optimizer": self.actor_optimizer,
            "temperature_optimizer": self.temperature_optimizer,
        }

    @torch.no_grad()
    def act(self, image: torch.Tensor, proprio: torch.Tensor, deterministic: bool = False,
            generator: torch.Generator | None = None) -> np.ndarray:
        """Action for a single preprocessed observation (no batch dim)."""
        j = self.model.joint(image.unsqueeze(0), proprio.unsqueeze(0))
        action, _, _, _ = self.actor(j, generator=generator, deterministic=deterministic)
        return action.squeeze(0).numpy().astype(np.float32)

    # -- individual updates -------------------------------------------------

    def bellman_target(self, reward, done, j_next, generator=None) -> torch.Tensor:
        with torch.no_grad():
            next_action, log_prob, _, _ = self.actor(j_next, generator=generator)
            tq1, tq2 = self.critic_target(j_next, next_action)
            soft_v = torch.min(tq1, tq2) - self.temperature.detach() * log_prob
            return reward + self.cfg.discount * (1.0 - done) * soft_v

    def critic_update(self, obs, action, reward, next_obs, done, generator=None, j_next=None) -> dict:
        """One critic step; gradients also reach encoders + fusion.

        ``obs``/``next_obs`` are ``(image, proprio)`` tuples of preprocessed
        tensors; ``reward``/``done`` have shape ``(B, 1)``.
        """
        if j_next is None:
            with torch.no_grad():
                j_next = self.model.joint(*next_obs, target=True)
        target_q = self.bellman_target(reward, done, j_next, generator)
        if not torch.all(torch.isfinite(target_q)):
            raise FloatingPointError("non-finite Bellman target")
        j = self.model.joint(*obs)
        q1, q2 = self.critic(j, action)
        q1_loss = F.mse_loss(q1, target_q)
        q2_loss = F.mse_loss(q2, target_q)
        loss = q1_loss + q2_loss
        self.critic_optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.critic_optimizer.step()
        return {"critic_loss": loss.item(), "q1_loss": q1_loss.item(), "q2_loss": q2_loss.item(),
                "target_q": target_q.mean().item()}

    def mib_update(self, obs, action, next_obs, alpha, generator=None, j_next=None) -> LossBreakdown:
        total, info = mib_loss(self.model, *obs, action, *next_obs, alpha, generator=generator, j_next=j_next)
        if not math.isfinite(info.total):
            raise FloatingPointError("non-finite bottleneck loss")
        self.mib_optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.mib_optimizer.step()
        return info

    def actor_update(self, obs, generator=None) -> tuple[dict, torch.Tensor]:
        """Actor step on a detached joint representation; returns log-probs for the temperature."""
        with torch.no_grad():
            j = self.model.joint(*obs)
        action, log_prob, _, log_std = self.actor(j, generator=generator)
        q1, q2 = self.critic(j, action)
        loss = (self.temperature.detach() * log_prob - torch.min(q1, q2)).mean()
        self.actor_optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.actor_optimizer.step()
        # critic grads from this backward must not leak into the next critic step
        self.critic_optimizer.zero_grad(set_to_none=True)
        entropy = 0.5 * log_std.shape[1] * (1.0 + math.log(2 * math.pi)) + log_std.sum(-1)
        return {"actor_loss": loss.item(), "entropy": entropy.mean().item()}, log_prob.detach()

    def temperature_update(self, log_prob: torch.Tensor) -> dict:
        loss = -(self.log_alpha * (log_prob + self.cfg.target_entropy).detach()).mean()
        self.temperature_optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.temperature_optimizer.step()
        return {"alpha_loss": loss.item(), "temperature": self.temperature.item()}

    # -- one gradient step --------------------------------------------------

    def update(self, obs, action, reward, next_obs, done, step: int, generator=None) -> dict:
        """Critic -> bottleneck -> actor/temperature -> EMA targets."""
        with torch.no_grad():
            j_next = self.model.joint(*next_obs, target=True)
        logs = self.critic_update(obs, action, reward, next_obs, done, generator, j_next=j_next)
        if self.cfg.use_mib:
            info = self.mib_update(obs, action, next_obs, self.cfg.alpha, generator, j_next=j_next)
            logs.update(info.as_dict())
        else:
            logs.update(LossBreakdown(0.0, 0.0, 0.0, self.cfg.alpha).as_dict())
        if step % self.cfg.actor_update_freq == 0:
            actor_logs, log_prob = self.actor_update(obs, generator)
            logs.update(actor_logs)
            logs.update(self.temperature_update(log_prob))
        if step % self.cfg.critic_target_update_freq == 0:
            ema_update(self.critic, self.critic_target, self.cfg.critic_tau)
        self.model.update_targets(self.cfg.encoder_tau)
        return logs
