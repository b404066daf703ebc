"""Training loop, evaluation and zero-shot robustness protocols."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..core import MultimodalObservation, ReplayBuffer, Transition
from ..envs import (
    Env,
    PerturbationConfig,
    RunningMeanStd,
    apply_perturbation,
    images_to_tensor,
    make_env,
    random_shift,
)
from ..sac import MIBAgent
from . import checkpoint as ckpt
from .config import RunConfig, agent_config
from .metrics import MetricsLogger

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoint"
METRICS_FILE = "metrics.jsonl"


def make_task(cfg: RunConfig, seed: int | None = None, **kwargs) -> Env:
    return make_env(
        cfg.task,
        image_size=cfg.image_size,
        frame_stack=cfg.frame_stack,
        action_repeat=cfg.action_repeat,
        episode_length=cfg.episode_length,
        seed=seed,
        **kwargs,
    )


def build_agent(cfg: RunConfig, env: Env) -> MIBAgent:
    torch.manual_seed(cfg.seed)
    return MIBAgent(agent_config(cfg, env.spec.proprio_dim, env.spec.action_dim))


def obs_tensors(obs: MultimodalObservation) -> tuple[torch.Tensor, torch.Tensor]:
    return images_to_tensor(obs.image), torch.from_numpy(np.asarray(obs.proprio, dtype=np.float32))


def batch_tensors(batch, generator: torch.Generator, augment: bool = True):
    """Preprocess a uint8 replay batch into tensors, shift-augmenting both images."""
    image = images_to_tensor(batch.image)
    next_image = images_to_tensor(batch.next_image)
    if augment:
        image = random_shift(image, generator)
        next_image = random_shift(next_image, generator)
    obs = (image, torch.from_numpy(batch.proprio))
    next_obs = (next_image, torch.from_numpy(batch.next_proprio))
    action = torch.from_numpy(batch.action)
    reward = torch.from_numpy(batch.reward).unsqueeze(1)
    done = torch.from_numpy(batch.done).unsqueeze(1)
    return obs, action, reward, next_obs, done


# -- checkpoint glue ------------------------------------------------------------


def agent_tensors(agent: MIBAgent) -> tuple[dict[str, torch.Tensor], dict]:
    tensors: dict[str, torch.Tensor] = {}
    for prefix, module in agent.modules().items():
        for k, v in module.state_dict().items():
            tensors[f"{prefix}/{k}"] = v
    tensors["log_alpha"] = agent.log_alpha.detach()
    opt_meta = {}
    for name, opt in agent.optimizers().items():
        t, meta = ckpt.flatten_optimizer(name, opt)
        tensors.update(t)
        opt_meta[name] = meta
    return tensors, opt_meta


def load_agent_tensors(agent: MIBAgent, tensors: dict[str, torch.Tensor], opt_meta: dict) -> None:
    for prefix, module in agent.modules().items():
        sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
        expected = module.state_dict()
        for k, v in expected.items():
            if k not in sd:
                raise ckpt.CheckpointError(f"checkpoint lacks tensor {prefix}/{k}")
            if tuple(sd[k].shape) != tuple(v.shape):
                raise ckpt.CheckpointError(f"shape mismatch for {prefix}/{k}")
        module.load_state_dict(sd)
    with torch.no_grad():
        agent.log_alpha.copy_(tensors["log_alpha"])
    for name, opt in agent.optimizers().items():
        if name in opt_meta:
            opt.load_state_dict(ckpt.unflatten_optimizer(name, tensors, opt_meta[name]))


def save_checkpoint(path: str | Path, agent: MIBAgent, cfg: RunConfig, step: int, extra: dict | None = None) -> Path:
    tensors, opt_meta = agent_tensors(agent)
    return ckpt.save(path, tensors, config=cfg.to_dict(), step=step, optimizers=opt_meta, extra=extra)


def load_checkpoint(path: str | Path) -> tuple[MIBAgent, RunConfig, dict]:
    manifest, tensors = ckpt.load(path)
    cfg = RunConfig(**manifest["config"])
    env = make_task(cfg)
    agent = build_agent(cfg, env)
    load_agent_tensors(agent, tensors, manifest["optimizers"])
    return agent, cfg, manifest


def _generator_state(gen: torch.Generator) -> list[int]:
    return gen.get_state().tolist()


def _set_generator_state(gen: torch.Generator, state: list[int]) -> None:
    gen.set_state(torch.tensor(state, dtype=torch.uint8))


# -- evaluation -----------------------------------------------------------------


def run_episode(agent: MIBAgent, env: Env, seed: int, deterministic: bool = True,
                perturb: Callable[[MultimodalObservation, int], MultimodalObservation] | None = None,
                generator: torch.Generator | None = None) -> float:
    obs = env.reset(seed=seed)
    total, t, done = 0.0, 0, False
    while not done:
        seen = perturb(obs, t) if perturb else obs
        action = agent.act(*obs_tensors(seen), deterministic=deterministic, generator=generator)
        obs, reward, done = env.step(action)
        total += reward
        t += 1
    return total


def evaluate(agent: MIBAgent, env: Env, episodes: int = 10, deterministic: bool = True,
             seed: int = 10_000) -> tuple[float, float]:
    """Mean and std of episode returns; episode ``k`` resets with ``seed + k``."""
    return robustness_eval(agent, env, PerturbationConfig(), episodes, deterministic, seed)


def calibrate_proprio_std(env: Env, seed: int, episodes: int = 2) -> np.ndarray:
    """Per-dimension proprio std under a uniform random policy."""
    rng = np.random.default_rng(seed)
    stats = RunningMeanStd(env.spec.proprio_dim)
    for k in range(episodes):
        obs = env.reset(seed=seed + k)
        stats.update(obs.proprio)
        done = False
        while not done:
            obs, _, done = env.step(rng.uniform(-1, 1, env.spec.action_dim))
            stats.update(obs.proprio)
    return stats.std


def robustness_eval(agent: MIBAgent, env: Env, perturbation: PerturbationConfig, episodes: int = 10,
                    deterministic: bool = True, seed: int = 10_000,
                    proprio_std: np.ndarray | None = None,
                    calibration_env: Env | None = None) -> tuple[float, float]:
    """``evaluate`` with perturbed observations fed to the policy; no updates.

    The environment and the policy see the same episode seeds as
    :func:`evaluate`; perturbation noise comes from its own stream, so the
    identity perturbation reproduces ``evaluate`` exactly.
    """
    perturb = None
    if not perturbation.is_identity:
        if perturbation.proprio_noise_std > 0 and proprio_std is None:
            proprio_std = calibrate_proprio_std(calibration_env or env, seed + 500_000)
        perturb_rng = np.random.default_rng(seed + 1_000_000)

        def perturb(obs, t):
            return apply_perturbation(obs, perturbation, perturb_rng, proprio_std=proprio_std, t=t)

    generator = torch.Generator().manual_seed(seed)
    returns = [run_episode(agent, env, seed + k, deterministic, perturb, generator) for k in range(episodes)]
    return float(np.mean(returns)), float(np.std(returns))


def random_policy_return(env: Env, episodes: int = 10, seed: int = 10_000) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    returns = []
    for k in range(episodes):
        env.reset(seed=seed + k)
        done, total = False, 0.0
        while not done:
            _, r, done = env.step(rng.uniform(-1, 1, env.spec.action_dim))
            total += r
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    agent: MIBAgent
    metrics: MetricsLogger
    checkpoint: Path | None
    final_return: tuple[float, float]
    updates: int


def train(cfg: RunConfig, work_dir: str | Path | None = None, resume: bool = False,
          write_files: bool = True) -> TrainResult:
    """Collect with the current policy, one gradient step per transition after warmup."""
    work = Path(work_dir or cfg.work_dir)
    metrics = MetricsLogger(work / METRICS_FILE if write_files else None)
    env = make_task(cfg, seed=cfg.seed)
    eval_env = make_task(cfg)
    agent = build_agent(cfg, env)
    buffer = ReplayBuffer(min(cfg.replay_capacity, max(1, cfg.steps // cfg.action_repeat + 1)))
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    env_step, updates, episode = 0, 0, 0
    warmup_until = cfg.init_steps
    random_warmup = True

    ckpt_path = work / CHECKPOINT_DIR
    if resume and (ckpt_path / ckpt.MANIFEST).exists():
        manifest, tensors = ckpt.load(ckpt_path)
        load_agent_tensors(agent, tensors, manifest["optimizers"])
        extra = manifest["extra"]
        env_step, updates, episode = manifest["step"], extra["updates"], extra["episode"]
        rng.bit_generator.state = extra["rng_state"]
        _set_generator_state(gen, extra["torch_generator"])
        # replay contents are not checkpointed: refill before updating again
        warmup_until = env_step + cfg.init_steps
        random_warmup = False
        log.info("resumed from %s at env step %d", ckpt_path, env_step)

    obs = env.reset(seed=cfg.seed + episode)
    episode_return, episode_steps = 0.0, 0
    last_return = float("nan")
    start = time.time()
    next_eval = cfg.eval_interval if cfg.eval_interval > 0 else None
    if next_eval is not None:
        next_eval = (env_step // cfg.eval_interval + 1) * cfg.eval_interval
    next_ckpt = None
    if cfg.checkpoint_interval > 0:
        next_ckpt = (env_step // cfg.checkpoint_interval + 1) * cfg.checkpoint_interval
    update_logs: dict = {}

    while env_step < cfg.steps:
        if env_step < warmup_until and random_warmup:
            action = rng.uniform(-1.0, 1.0, env.spec.action_dim).astype(np.float32)
        else:
            action = agent.act(*obs_tensors(obs), deterministic=False, generator=gen)
        next_obs, reward, done = env.step(action)
        episode_steps += 1
        # time-limit ends are bootstrapped through
        terminal = done and episode_steps < env.spec.agent_steps
        buffer.push(Transition(obs, action, reward, next_obs, terminal))
        episode_return += reward

        if env_step >= warmup_until:
            batch = buffer.sample(cfg.batch_size, rng)
            try:
                update_logs = agent.update(*batch_tensors(batch, gen), step=updates, generator=gen)
            except FloatingPointError as exc:
                raise RuntimeError(f"non-finite loss at env step {env_step}, update {updates}: {exc}") from exc
            updates += 1
            if updates % cfg.log_interval == 0:
                metrics.record("train", env_step, updates=updates, episode=episode,
                               episode_return=last_return, wall_clock=time.time() - start, **update_logs)

        env_step += cfg.action_repeat
        obs = next_obs
        if done:
            last_return = episode_return
            episode += 1
            obs = env.reset(seed=cfg.seed + episode)
            episode_return, episode_steps = 0.0, 0

        if next_eval is not None and env_step >= next_eval and env_step < cfg.steps:
            mean, std = evaluate(agent, eval_env, cfg.eval_episodes)
            metrics.record("eval", env_step, episode_return_mean=mean, episode_return_std=std,
                           updates=updates, wall_clock=time.time() - start)
            next_eval += cfg.eval_interval
        if next_ckpt is not None and env_step >= next_ckpt and write_files:
            save_checkpoint(ckpt_path, agent, cfg, env_step, _extra(rng, gen, buffer, updates, episode))
            next_ckpt += cfg.checkpoint_interval

    mean, std = evaluate(agent, eval_env, cfg.eval_episodes)
    metrics.record("eval", env_step, episode_return_mean=mean, episode_return_std=std,
                   updates=updates, wall_clock=time.time() - start)
    path = None
    if write_files:
        path = save_checkpoint(ckpt_path, agent, cfg, env_step, _extra(rng, gen, buffer, updates, episode))
    return TrainResult(agent, metrics, path, (mean, std), updates)


def _extra(rng, gen, buffer: ReplayBuffer, updates: int, episode: int) -> dict:
    return {
        "updates": updates,
        "episode": episode,
        "rng_state": rng.bit_generator.state,
        "torch_generator": _generator_state(gen),
        "buffer": {"cursor": buffer.cursor, "count": buffer.count, "capacity": buffer.capacity},
    }

