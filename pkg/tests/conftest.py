import numpy as np
import pytest
import torch

from mibrl.core import MultimodalObservation, Transition
from mibrl.harness.config import RunConfig
from mibrl.nets import NetConfig, RepresentationModel
from mibrl.sac import AgentConfig, MIBAgent


def mini_net_config(**overrides) -> NetConfig:
    """2-frame 8x8 images, one conv layer, latent dim 4."""
    kw = dict(
        proprio_dim=3, action_dim=2, frame_stack=2, image_size=8, latent_dim=4,
        conv_layers=1, conv_channels=4, first_stride=2,
        proprio_hidden=8, fusion_hidden=8, stochastic_hidden=8, projection_hidden=8,
    )
    kw.update(overrides)
    return NetConfig(**kw)


def mini_agent_config(**overrides) -> AgentConfig:
    net_kw = {k: overrides.pop(k) for k in list(overrides) if k in NetConfig.__dataclass_fields__}
    return AgentConfig(net=mini_net_config(**net_kw), actor_hidden=16, critic_hidden=16, **overrides)


def tiny_run_config(**overrides) -> RunConfig:
    """Small enough to train a few thousand env steps in seconds."""
    kw = dict(
        steps=1600, init_steps=1000, batch_size=16, image_size=16, conv_layers=1, conv_channels=4,
        latent_dim=8, proprio_hidden=16, fusion_hidden=16, stochastic_hidden=16,
        projection_hidden=16, actor_hidden=16, critic_hidden=16, episode_length=100,
        action_repeat=2, eval_interval=0, eval_episodes=2, log_interval=20,
    )
    kw.update(overrides)
    return RunConfig(**kw)


def random_mini_batch(cfg: NetConfig, batch: int, seed: int = 0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    shape = (batch, cfg.image_channels, cfg.image_size, cfg.image_size)
    image = torch.rand(shape, generator=g, dtype=dtype)
    next_image = torch.rand(shape, generator=g, dtype=dtype)
    proprio = torch.randn(batch, cfg.proprio_dim, generator=g, dtype=dtype)
    next_proprio = torch.randn(batch, cfg.proprio_dim, generator=g, dtype=dtype)
    action = torch.rand(batch, cfg.action_dim, generator=g, dtype=dtype) * 2 - 1
    reward = torch.randn(batch, 1, generator=g, dtype=dtype)
    done = torch.zeros(batch, 1, dtype=dtype)
    return (image, proprio), action, reward, (next_image, next_proprio), done


def make_transition(rng: np.random.Generator, channels=9, size=8, proprio_dim=3, action_dim=2, tag=0.0):
    def obs():
        return MultimodalObservation(
            rng.integers(0, 256, size=(channels, size, size), dtype=np.uint8),
            rng.normal(size=proprio_dim).astype(np.float32),
        )
    return Transition(obs(), rng.uniform(-1, 1, action_dim).astype(np.float32), float(tag), obs(), False)


def snapshot(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def changed(before: dict, after: dict) -> set[str]:
    return {k for k in before if not torch.equal(before[k], after[k])}


@pytest.fixture
def mini_model():
    torch.manual_seed(0)
    return RepresentationModel(mini_net_config())


@pytest.fixture
def mini_agent():
    torch.manual_seed(0)
    return MIBAgent(mini_agent_config())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
