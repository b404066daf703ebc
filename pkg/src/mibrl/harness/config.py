"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from ..envs import BACKGROUND_MODES, PerturbationConfig
from ..nets import NetConfig
from ..sac import AgentConfig

ABLATIONS = ("full", "non-kl", "non-loss", "non-img", "non-prop")


@dataclass
class RunConfig:
    task: str = "corridor-pointmass"
    seed: int = 0
    steps: int = 100_000  # environment (simulator) steps, action repeat included
    init_steps: int = 1000  # same unit as ``steps``
    batch_size: int = 128
    replay_capacity: int = 100_000
    discount: float = 0.99
    alpha: float = 1e-4
    init_temperature: float = 0.1
    critic_lr: float = 1e-3
    actor_lr: float = 1e-3
    temperature_lr: float = 1e-3
    mib_lr: float = 1e-4
    encoder_tau: float = 0.05
    critic_tau: float = 0.01
    actor_update_freq: int = 2
    critic_target_update_freq: int = 2
    action_repeat: int = 2
    episode_length: int = 500
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
    actor_hidden: int = 1024
    critic_hidden: int = 1024
    ablation: str = "full"
    eval_interval: int = 10_000  # 0 -> evaluate only at the end
    eval_episodes: int = 10
    log_interval: int = 250  # gradient steps between training records
    checkpoint_interval: int = 0  # 0 -> checkpoint only at the end
    noise_std: float = 0.1
    background: str = "none"
    work_dir: str = "runs/default"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.background not in BACKGROUND_MODES:
            raise ValueError(f"background must be one of {BACKGROUND_MODES}")
        for name in ("steps", "batch_size", "replay_capacity", "action_repeat", "episode_length",
                     "actor_update_freq", "critic_target_update_freq", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.init_steps < 0:
            raise ValueError("init_steps must be >= 0")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @property
    def perturbation(self) -> PerturbationConfig:
        return PerturbationConfig(self.noise_std, self.background)


def ablation_wiring(cfg: RunConfig) -> dict[str, Any]:
    """Effective component graph for an ablation.

    ``alpha`` is the KL weight actually used, ``mib_update`` whether the
    bottleneck loss is optimized, ``modalities`` what the fusion model sees.
    """
    wiring = {"alpha": cfg.alpha, "mib_update": True, "modalities": "both"}
    if cfg.ablation == "non-kl":
        wiring["alpha"] = 0.0
    elif cfg.ablation == "non-loss":
        wiring["mib_update"] = False
    elif cfg.ablation == "non-img":
        wiring["modalities"] = "proprio"
    elif cfg.ablation == "non-prop":
        wiring["modalities"] = "image"
    return wiring


def agent_config(cfg: RunConfig, proprio_dim: int, action_dim: int) -> AgentConfig:
    wiring = ablation_wiring(cfg)
    net = NetConfig(
        proprio_dim=proprio_dim,
        action_dim=action_dim,
        frame_stack=cfg.frame_stack,
        image_size=cfg.image_size,
        latent_dim=cfg.latent_dim,
        conv_layers=cfg.conv_layers,
        conv_channels=cfg.conv_channels,
        first_stride=cfg.first_stride,
        proprio_hidden=cfg.proprio_hidden,
        fusion_hidden=cfg.fusion_hidden,
        stochastic_hidden=cfg.stochastic_hidden,
        projection_hidden=cfg.projection_hidden,
        modalities=wiring["modalities"],
    )
    return AgentConfig(
        net=net,
        actor_hidden=cfg.actor_hidden,
        critic_hidden=cfg.critic_hidden,
        discount=cfg.discount,
        alpha=wiring["alpha"],
        init_temperature=cfg.init_temperature,
        critic_lr=cfg.critic_lr,
        actor_lr=cfg.actor_lr,
        temperature_lr=cfg.temperature_lr,
        mib_lr=cfg.mib_lr,
        encoder_tau=cfg.encoder_tau,
        critic_tau=cfg.critic_tau,
        actor_update_freq=cfg.actor_update_freq,
        critic_target_update_freq=cfg.critic_target_update_freq,
        use_mib=wiring["mib_update"],
    )


def _coerce(value: str, kind: type) -> Any:
    if kind is bool:
        return value.lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(float(value)) if "e" in value.lower() else int(value)
    return kind(value)


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def field_types() -> dict[str, type]:
    return {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(RunConfig)}


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``-`` in keys is accepted."""
    types = field_types()
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        elif ":" in line:
            key, value = line.split(":", 1)
        else:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key = key.strip().replace("-", "_")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(value.strip(), types[key])
    return out


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
