"""Discrete-time particle tasks: coverage of landmarks and ring formation.

Agents are damped double integrators on the plane. Every step all agents
receive the same scalar control reward; the two tasks differ only in how
that reward is computed and in the local observation layout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

TASK_COVERAGE = "coverage"
TASK_FORMATION = "formation"

# Agents and landmarks spawn uniformly in +-SPAWN_HALF; the clamping box
# (world_half) is wider so dynamics are not pinned to the spawn region.
SPAWN_HALF = 1.0

FORMATION_RADIUS = 0.5


@dataclass(frozen=True)
class EnvConfig:
    task: str
    n_agents: int
    n_landmarks: int
    episode_length: int = 50
    dt: float = 0.1
    damping: float = 0.25
    max_speed: float = 1.0
    world_half: float = 1.5
    noise_std: float = 0.0
    angle_weight: float = 1.0

    def __post_init__(self):
        if self.task not in (TASK_COVERAGE, TASK_FORMATION):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_agents < 2:
            raise ConfigError("n_agents must be >= 2")
        if self.task == TASK_COVERAGE and self.n_landmarks < 1:
            raise ConfigError("coverage needs at least one landmark")
        if self.task == TASK_FORMATION and self.n_landmarks != 1:
            raise ConfigError("formation uses exactly one landmark")
        if self.episode_length < 1 or self.dt <= 0.0:
            raise ConfigError("episode_length must be >= 1 and dt > 0")
        if not (0.0 <= self.damping <= 1.0):
            raise ConfigError("damping must lie in [0, 1]")
        if self.max_speed <= 0.0 or self.world_half <= 0.0 or self.noise_std < 0.0:
            raise ConfigError("max_speed/world_half must be positive, noise_std >= 0")

    @property
    def obs_dim(self) -> int:
        # [p (2), v (2), landmark_j - p for each landmark (2M)]
        return 4 + 2 * self.n_landmarks


@dataclass
class WorldState:
    positions: np.ndarray   # (N, 2)
    velocities: np.ndarray  # (N, 2)
    landmarks: np.ndarray   # (M, 2), static within an episode
    step: int = 0

    def copy(self) -> "WorldState":
        return WorldState(self.positions.copy(), self.velocities.copy(),
                          self.landmarks.copy(), self.step)


def coverage_reward(state: WorldState) -> float:
    """Negative mean distance from each landmark to its nearest agent."""
    diff = state.landmarks[:, None, :] - state.positions[None, :, :]
    dists = np.sqrt(np.sum(diff * diff, axis=2))
    return float(-np.mean(np.min(dists, axis=1)))


def formation_reward(state: WorldState, angle_weight: float = 1.0) -> float:
    """Penalties for radius error (target 0.5) and uneven angular spacing.

    Agents are sorted by polar angle around the landmark; the N consecutive
    gaps (wrapping through 2*pi) are compared against the ideal 2*pi/N.
    An agent exactly on the landmark takes angle 0 by convention (arctan2).
    """
    center = state.landmarks[0]
    rel = state.positions - center
    radii = np.sqrt(np.sum(rel * rel, axis=1))
    radius_pen = float(np.mean(np.abs(radii - FORMATION_RADIUS)))
    angles = np.sort(np.arctan2(rel[:, 1], rel[:, 0]))
    gaps = np.diff(angles, append=angles[0] + 2.0 * math.pi)
    target = 2.0 * math.pi / len(angles)
    angle_pen = float(np.mean(np.abs(gaps - target)))
    return -(radius_pen + angle_weight * angle_pen)


def broadcast_payload(state: WorldState, agent: int) -> np.ndarray:
    """What an agent puts on the wire: [px, py, vx, vy]."""
    if not (0 <= agent < state.positions.shape[0]):
        raise InputError(f"agent index {agent} out of range")
    return np.concatenate([state.positions[agent], state.velocities[agent]])


class ParticleEnv:
    """State-machine environment; all mutation flows through explicit states."""

    def __init__(self, config: EnvConfig):
        self.config = config

    @property
    def obs_dim(self) -> int:
        return self.config.obs_dim

    def reset(self, rng: np.random.Generator) -> tuple[WorldState, np.ndarray]:
        cfg = self.config
        half = min(SPAWN_HALF, cfg.world_half)
        positions = rng.uniform(-half, half, size=(cfg.n_agents, 2))
        landmarks = rng.uniform(-half, half, size=(cfg.n_landmarks, 2))
        state = WorldState(positions, np.zeros((cfg.n_agents, 2)), landmarks, step=0)
        return state, self.observe(state)

    def observe(self, state: WorldState) -> np.ndarray:
        """Per-agent local observations, stacked (N, obs_dim)."""
        rel = state.landmarks[None, :, :] - state.positions[:, None, :]
        n = self.config.n_agents
        return np.concatenate(
            [state.positions, state.velocities, rel.reshape(n, -1)], axis=1)

    def reward(self, state: WorldState) -> float:
        if self.config.task == TASK_COVERAGE:
            return coverage_reward(state)
        return formation_reward(state, self.config.angle_weight)

    def step(self, state: WorldState, actions, rng: np.random.Generator
             ) -> tuple[WorldState, np.ndarray, float, bool]:
        """Advance one step; returns (state', observations, shared reward, done)."""
        cfg = self.config
        a = np.asarray(actions, dtype=np.float64)
        if a.shape != (cfg.n_agents, 2):
            raise InputError(f"actions must be ({cfg.n_agents}, 2), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InputError("actions contain non-finite entries")
        a = np.clip(a, -1.0, 1.0)

        vel = (1.0 - cfg.damping) * state.velocities + a * cfg.dt
        if cfg.noise_std > 0.0:
            vel = vel + rng.normal(0.0, cfg.noise_std, size=vel.shape)
        speed = np.sqrt(np.sum(vel * vel, axis=1, keepdims=True))
        over = speed > cfg.max_speed
        if np.any(over):
            vel = np.where(over, vel * (cfg.max_speed / speed), vel)
        pos = np.clip(state.positions + vel * cfg.dt, -cfg.world_half, cfg.world_half)

        nxt = WorldState(pos, vel, state.landmarks, state.step + 1)
        done = nxt.step >= cfg.episode_length
        return nxt, self.observe(nxt), self.reward(nxt), done


def write_trace_csv(path, rows) -> None:
    """Dump an episode trace: (step, agent, px, py, vx, vy, ax, ay, reward)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "agent", "px", "py", "vx", "vy", "ax", "ay", "reward"])
        writer.writerows(rows)
