"""Observation/transition containers and a uniform ring replay buffer.

Images are kept as raw ``uint8`` arrays (channels-first, ``3 * frame_stack``
channels); conversion to floats happens in :func:`mibrl.envs.preprocess`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class MultimodalObservation:
    """Paired stacked image frames and proprioception vector.

    Attributes:
        image: ``uint8`` array of shape ``(3 * K, H, W)``, oldest frame first.
        proprio: ``float32`` vector of joint positions/velocities.
        background: optional boolean mask ``(K, H, W)`` marking pixels that
            belong to the scene background. Only used by distractor
            perturbations; never stored in replay.
    """

    image: np.ndarray
    proprio: np.ndarray
    background: Optional[np.ndarray] = None

    def validate(self, frame_stack: int | None = None, proprio_dim: int | None = None) -> None:
        if self.image.ndim != 3 or self.image.shape[0] % 3 != 0:
            raise ValueError(f"image must be (3K, H, W), got {self.image.shape}")
        if frame_stack is not None and self.image.shape[0] != 3 * frame_stack:
            raise ValueError(
                f"expected {3 * frame_stack} image channels, got {self.image.shape[0]}"
            )
        if self.proprio.ndim != 1:
            raise ValueError(f"proprio must be a vector, got shape {self.proprio.shape}")
        if proprio_dim is not None and self.proprio.shape[0] != proprio_dim:
            raise ValueError(f"expected proprio dim {proprio_dim}, got {self.proprio.shape[0]}")
        if not np.all(np.isfinite(self.proprio)):
            raise ValueError("proprio contains non-finite values")


@dataclass
class Transition:
    obs: MultimodalObservation
    action: np.ndarray
    reward: float
    next_obs: MultimodalObservation
    done: bool


@dataclass
class Batch:
    """Stacked transitions. ``image``/``next_image`` stay ``uint8``."""

    image: np.ndarray
    proprio: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_image: np.ndarray
    next_proprio: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.action.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer sampled uniformly with replacement.

    Storage arrays are allocated lazily on the first push, so shapes are taken
    from the first transition and every later push must match them.
    """

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.cursor = 0
        self.count = 0
        self._store: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.count

    def _allocate(self, t: Transition) -> None:
        n = self.capacity
        self._store = {
            "image": np.empty((n, *t.obs.image.shape), dtype=np.uint8),
            "proprio": np.empty((n, *t.obs.proprio.shape), dtype=np.float32),
            "action": np.empty((n, *np.shape(t.action)), dtype=np.float32),
            "reward": np.empty((n,), dtype=np.float32),
            "next_image": np.empty((n, *t.next_obs.image.shape), dtype=np.uint8),
            "next_proprio": np.empty((n, *t.next_obs.proprio.shape), dtype=np.float32),
            "done": np.empty((n,), dtype=np.float32),
        }

    def _check(self, t: Transition) -> None:
        if t.obs.image.shape != t.next_obs.image.shape:
            raise ValueError("obs and next_obs image shapes differ")
        if t.obs.proprio.shape != t.next_obs.proprio.shape:
            raise ValueError("obs and next_obs proprio shapes differ")
        t.obs.validate()
        t.next_obs.validate()
        action = np.asarray(t.action)
        if not np.all(np.isfinite(action)):
            raise ValueError("action contains non-finite values")
        if np.any(np.abs(action) > 1.0):
            raise ValueError("action outside [-1, 1]")
        if not np.isfinite(t.reward):
            raise ValueError("reward is not finite")
        if self._store is not None:
            s = self._store
            if (
                s["image"].shape[1:] != t.obs.image.shape
                or s["proprio"].shape[1:] != t.obs.proprio.shape
                or s["action"].shape[1:] != action.shape
            ):
                raise ValueError("transition shape does not match buffer contents")

    def push(self, t: Transition) -> None:
        self._check(t)
        if self._store is None:
            self._allocate(t)
        s, i = self._store, self.cursor
        s["image"][i] = t.obs.image
        s["proprio"][i] = t.obs.proprio
        s["action"][i] = t.action
        s["reward"][i] = t.reward
        s["next_image"][i] = t.next_obs.image
        s["next_proprio"][i] = t.next_obs.proprio
        s["done"][i] = float(t.done)
        self.cursor = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.count == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return rng.integers(0, self.count, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        return Batch(**{k: v[idx] for k, v in self._store.items()})

    def transition(self, index: int) -> Transition:
        """Return the stored transition at ``index`` (0 is the oldest)."""
        if not 0 <= index < self.count:
            raise IndexError(index)
        start = self.cursor if self.count == self.capacity else 0
        i = (start + index) % self.capacity
        s = self._store
        return Transition(
            obs=MultimodalObservation(s["image"][i].copy(), s["proprio"][i].copy()),
            action=s["action"][i].copy(),
            reward=float(s["reward"][i]),
            next_obs=MultimodalObservation(s["next_image"][i].copy(), s["next_proprio"][i].copy()),
            done=bool(s["done"][i]),
        )
