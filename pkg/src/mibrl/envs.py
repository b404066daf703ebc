"""Environment interface, the built-in corridor task, preprocessing and perturbations."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .core import MultimodalObservation

log = logging.getLogger(__name__)

SHIFT_PAD = 4
BACKGROUND_MODES = ("none", "moving_pattern")


@dataclass(frozen=True)
class EnvSpec:
    proprio_dim: int
    action_dim: int
    action_repeat: int = 2
    frame_stack: int = 3
    episode_length: int = 500  # in simulator steps
    image_size: int = 84

    def __post_init__(self):
        for name in ("proprio_dim", "action_dim", "action_repeat", "frame_stack", "episode_length", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def agent_steps(self) -> int:
        return -(-self.episode_length // self.action_repeat)


class Env(Protocol):
    spec: EnvSpec

    def reset(self, seed: int | None = None) -> MultimodalObservation: ...

    def step(self, action: np.ndarray) -> tuple[MultimodalObservation, float, bool]: ...


class FrameStack:
    """Fixed-depth FIFO of rendered ``(3, H, W)`` frames, oldest first."""

    def __init__(self, depth: int):
        self.depth = depth
        self.frames: list[np.ndarray] = []
        self.masks: list[np.ndarray] = []

    def fill(self, frame: np.ndarray, mask: np.ndarray) -> None:
        self.frames = [frame] * self.depth
        self.masks = [mask] * self.depth

    def push(self, frame: np.ndarray, mask: np.ndarray) -> None:
        self.frames = self.frames[1:] + [frame]
        self.masks = self.masks[1:] + [mask]

    def image(self) -> np.ndarray:
        return np.concatenate(self.frames, axis=0)

    def background(self) -> np.ndarray:
        return np.stack(self.masks, axis=0)


FLOOR_DARK = np.array([70, 70, 70], dtype=np.uint8)
FLOOR_LIGHT = np.array([110, 110, 110], dtype=np.uint8)
WALL = np.array([30, 40, 120], dtype=np.uint8)
OBSTACLE = np.array([220, 40, 40], dtype=np.uint8)


class CorridorPointMass:
    """A 2-D point mass driving down a walled corridor past obstacles.

    Each obstacle spans the corridor from one wall and leaves a single gap on
    the other side. Where the gap is can only be seen in the egocentric image;
    proprioception is ``[x / 10, y, vx, vy, last_action(2)]``.

    Per simulator step the reward is ``clip(vx / target_speed, 0, 1)``; a step
    that runs into an obstacle face instead pays ``collision_penalty`` scaled
    by the impact speed (relative to ``target_speed``, capped at 1).
    """

    dt = 0.1
    accel = 1.5
    drag = 0.5
    radius = 0.1
    half_width = 1.0
    target_speed = 2.0
    collision_penalty = 1.0
    obstacle_depth = 0.3
    gap_width = 0.7
    spacing = 5.0
    first_obstacle = 4.0
    view_behind = 0.5
    view_ahead = 6.0
    view_half_width = 1.5
    checker = 0.5

    def __init__(
        self,
        image_size: int = 84,
        frame_stack: int = 3,
        action_repeat: int = 2,
        episode_length: int = 500,
        obstacles: bool = True,
        seed: int | None = None,
    ):
        self.spec = EnvSpec(
            proprio_dim=6,
            action_dim=2,
            action_repeat=action_repeat,
            frame_stack=frame_stack,
            episode_length=episode_length,
            image_size=image_size,
        )
        self.obstacles_enabled = obstacles
        self.rng = np.random.default_rng(seed)
        self.stack = FrameStack(frame_stack)
        n = image_size
        rows = (np.arange(n) + 0.5) / n
        cols = (np.arange(n) + 0.5) / n
        # top row is the far end of the view; left column is +y (agent's left)
        self._dx = (self.view_ahead - rows * (self.view_ahead + self.view_behind))[:, None] * np.ones((1, n))
        self._dy = np.ones((n, 1)) * (self.view_half_width - cols * 2 * self.view_half_width)[None, :]
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.last_action = np.zeros(2)
        self.t = 0
        self.obstacle_x = np.zeros(0)
        self.obstacle_side = np.zeros(0)

    # -- dynamics -------------------------------------------------------------

    def _place_obstacles(self) -> None:
        if not self.obstacles_enabled:
            self.obstacle_x = np.zeros(0)
            self.obstacle_side = np.zeros(0)
            return
        reach = self.spec.episode_length * self.dt * (self.accel / self.drag) + self.view_ahead
        count = int(reach // self.spacing) + 2
        jitter = self.rng.uniform(-1.0, 1.0, size=count)
        self.obstacle_x = self.first_obstacle + self.spacing * np.arange(count) + jitter
        # side = +1: obstacle attached to the +y wall, gap near -y
        self.obstacle_side = self.rng.choice([-1.0, 1.0], size=count)

    def _blocked_y(self, side: float) -> tuple[float, float]:
        w = self.half_width
        if side > 0:
            return -w + self.gap_width, w
        return -w, w - self.gap_width

    def _physics_step(self, action: np.ndarray) -> float:
        old_x = self.pos[0]
        self.vel = self.vel + self.dt * (self.accel * action - self.drag * self.vel)
        new = self.pos + self.dt * self.vel
        lim = self.half_width - self.radius
        if abs(new[1]) > lim:
            new[1] = np.clip(new[1], -lim, lim)
            self.vel[1] = 0.0
        collided = False
        for ox, side in zip(self.obstacle_x, self.obstacle_side):
            if ox > new[0] + self.radius + 1.0:
                break
            lo, hi = self._blocked_y(side)
            overlaps_y = (new[1] + self.radius > lo) and (new[1] - self.radius < hi)
            front = ox - self.radius
            if overlaps_y and old_x <= front + 1e-9 and new[0] > front:
                new[0] = front
                impact = max(self.vel[0], 0.0)
                self.vel[0] = min(self.vel[0], 0.0)
                collided = True
        self.pos = new
        forward = np.clip(self.vel[0] / self.target_speed, 0.0, 1.0)
        penalty = self.collision_penalty * min(impact / self.target_speed, 1.0) if collided else 0.0
        return float(forward - penalty)

    # -- observations ---------------------------------------------------------

    def render(self) -> tuple[np.ndarray, np.ndarray]:
        """Egocentric ``(3, H, W)`` uint8 frame and its floor mask."""
        X = self.pos[0] + self._dx
        Y = self.pos[1] + self._dy
        floor = np.abs(Y) <= self.half_width
        cell = (np.floor(X / self.checker) + np.floor(Y / self.checker)).astype(np.int64) % 2
        img = np.where(cell[..., None] == 0, FLOOR_DARK, FLOOR_LIGHT)
        img = np.where(floor[..., None], img, WALL)
        lo_x, hi_x = X.min() - self.obstacle_depth, X.max()
        for ox, side in zip(self.obstacle_x, self.obstacle_side):
            if ox < lo_x:
                continue
            if ox > hi_x:
                break
            lo, hi = self._blocked_y(side)
            hit = (X >= ox) & (X <= ox + self.obstacle_depth) & (Y >= lo) & (Y <= hi)
            img[hit] = OBSTACLE
            floor = floor & ~hit
        return np.ascontiguousarray(img.transpose(2, 0, 1)), floor

    def proprio(self) -> np.ndarray:
        return np.array(
            [self.pos[0] / 10.0, self.pos[1], self.vel[0], self.vel[1], *self.last_action],
            dtype=np.float32,
        )

    def _observation(self) -> MultimodalObservation:
        return MultimodalObservation(self.stack.image(), self.proprio(), self.stack.background())

    def reset(self, seed: int | None = None) -> MultimodalObservation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.pos = np.array([0.0, self.rng.uniform(-0.5, 0.5)])
        self.vel = np.zeros(2)
        self.last_action = np.zeros(2)
        self.t = 0
        self._place_obstacles()
        self.stack.fill(*self.render())
        return self._observation()

    def step(self, action: np.ndarray) -> tuple[MultimodalObservation, float, bool]:
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim)
        if np.any(np.abs(action) > 1.0):
            log.warning("action %s outside [-1, 1]; clipping", action)
            action = np.clip(action, -1.0, 1.0)
        reward = 0.0
        for _ in range(self.spec.action_repeat):
            reward += self._physics_step(action)
            self.t += 1
            if self.t >= self.spec.episode_length:
                break
        self.last_action = action.copy()
        self.stack.push(*self.render())
        return self._observation(), reward, self.t >= self.spec.episode_length


ENV_REGISTRY: dict[str, Callable[..., Env]] = {"corridor-pointmass": CorridorPointMass}


def register_env(name: str, factory: Callable[..., Env]) -> None:
    ENV_REGISTRY[name] = factory


def make_env(name: str, **kwargs) -> Env:
    try:
        factory = ENV_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; known: {sorted(ENV_REGISTRY)}") from None
    return factory(**kwargs)


# -- preprocessing ------------------------------------------------------------


def preprocess(obs: MultimodalObservation) -> MultimodalObservation:
    """Scale a raw uint8 image to float32 in [0, 1]; proprio unchanged."""
    image = np.asarray(obs.image)
    if image.dtype != np.uint8:
        raise TypeError(f"expected a uint8 image, got {image.dtype}")
    return MultimodalObservation(image.astype(np.float32) / 255.0, obs.proprio, obs.background)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """Batched uint8 ``(..., C, H, W)`` -> float32 tensor in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images)).float().div_(255.0)


def random_shift(
    images: torch.Tensor,
    generator: torch.Generator | None = None,
    offsets: torch.Tensor | None = None,
    pad: int = SHIFT_PAD,
) -> torch.Tensor:
    """Replicate-pad by ``pad`` and crop back, one integer shift per image.

    ``offsets`` has shape ``(B, 2)`` holding ``(dy, dx)`` in ``[-pad, pad]``;
    output pixel ``(i, j)`` reads input ``(i + dy, j + dx)`` clamped to the
    border. All channels of an image share one shift.
    """
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    b, _, h, w = images.shape
    if offsets is None:
        offsets = torch.randint(-pad, pad + 1, (b, 2), generator=generator)
    offsets = torch.as_tensor(offsets).reshape(b, 2)
    if torch.any(offsets.abs() > pad):
        raise ValueError(f"offsets must lie in [-{pad}, {pad}]")
    padded = F.pad(images, (pad, pad, pad, pad), mode="replicate")
    windows = padded.unfold(2, h, 1).unfold(3, w, 1)  # (B, C, 2p+1, 2p+1, H, W) view
    out = windows[torch.arange(b), :, offsets[:, 0] + pad, offsets[:, 1] + pad]
    return out.squeeze(0) if single else out


# -- perturbations ------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationConfig:
    proprio_noise_std: float = 0.0  # fraction of the per-dimension running std
    background_mode: str = "none"

    def __post_init__(self):
        if self.proprio_noise_std < 0:
            raise ValueError("proprio_noise_std must be >= 0")
        if self.background_mode not in BACKGROUND_MODES:
            raise ValueError(f"background_mode must be one of {BACKGROUND_MODES}")

    @property
    def is_identity(self) -> bool:
        return self.proprio_noise_std == 0 and self.background_mode == "none"


class RunningMeanStd:
    """Per-dimension running moments (parallel Welford merge)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.zeros(dim)
        self.count = 0

    def update(self, x: np.ndarray) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        batch_mean, batch_var = x.mean(0), x.var(0)
        total = self.count + n
        delta = batch_mean - self.mean
        m2 = self.var * self.count + batch_var * n + delta**2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def moving_pattern(t: float, height: int, width: int, period: float = 12.0, speed: float = 0.7) -> np.ndarray:
    """Drifting sinusoidal grid in [0, 1], shape ``(3, H, W)``."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    phase = speed * t
    a = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + phase) / period)
    b = 0.5 + 0.5 * np.sin(2 * np.pi * (yy - 0.6 * phase) / (1.5 * period))
    return np.stack([a, b, a * b], axis=0)


def apply_perturbation(
    obs: MultimodalObservation,
    cfg: PerturbationConfig,
    rng: np.random.Generator,
    proprio_std: np.ndarray | None = None,
    t: int = 0,
    blend: float = 0.5,
) -> MultimodalObservation:
    """Return a perturbed copy of ``obs`` (evaluation only).

    Proprio gets ``N(0, (noise_std * proprio_std)^2)`` noise. The moving
    pattern is alpha-blended over background pixels of every stacked frame;
    frame ``k`` of ``K`` is drawn at time ``t - (K - 1) + k``. Works on raw
    uint8 or preprocessed float images and keeps the dtype.
    """
    if cfg.is_identity:
        return obs
    proprio = obs.proprio
    if cfg.proprio_noise_std > 0:
        if proprio_std is None:
            raise ValueError("proprio noise needs a per-dimension std")
        scale = cfg.proprio_noise_std * np.asarray(proprio_std, dtype=np.float64)
        proprio = (proprio + rng.normal(size=proprio.shape) * scale).astype(obs.proprio.dtype)
    image = obs.image
    if cfg.background_mode == "moving_pattern":
        c, h, w = image.shape
        k = c // 3
        peak = 255.0 if image.dtype == np.uint8 else 1.0
        frames = image.reshape(k, 3, h, w).astype(np.float64)
        if obs.background is not None:
            mask = obs.background.reshape(k, 1, h, w).astype(np.float64)
        else:
            mask = np.ones((k, 1, h, w))
        for i in range(k):
            pattern = peak * moving_pattern(t - (k - 1) + i, h, w)
            weight = blend * mask[i]
            frames[i] = (1.0 - weight) * frames[i] + weight * pattern
        frames = frames.reshape(c, h, w)
        image = np.rint(frames).astype(np.uint8) if image.dtype == np.uint8 else frames.astype(image.dtype)
    return MultimodalObservation(image, proprio, obs.background)


# -- recordings ---------------------------------------------------------------


def save_recording(path: str | Path, images, proprios, actions, rewards) -> Path:
    """Write an episode as ``.npz`` with keys ``images`` (T, 3K, H, W) uint8,
    ``proprio`` (T, D_p), ``actions`` (T-1, D_a), ``rewards`` (T-1,)."""
    path = Path(path)
    np.savez_compressed(
        path,
        images=np.asarray(images, dtype=np.uint8),
        proprio=np.asarray(proprios, dtype=np.float32),
        actions=np.asarray(actions, dtype=np.float32),
        rewards=np.asarray(rewards, dtype=np.float32),
    )
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_recording(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
