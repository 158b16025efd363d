"""Synthetic articulated depth sequences with exact joint ground truth.

Each joint is a Gaussian depth bump whose width grows with the joint
index. Joints sit around a palm like fingers: joint k wanders in a box
centred on its own anchor on a circle, which keeps joints identifiable
and limits overlap. Joint centres follow a bounded random walk; the
per-frame step never exceeds ``smoothness * cube side``. Everything is
generated directly in the normalized cube frame (cube side = 2).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import ParameterError

ANCHOR_RADIUS = 0.3
XY_RANGE = 0.25  # half-width of each joint's box around its anchor
Z_BOUND = 0.3
BUMP_HEIGHT = 0.2
SUPPORT = 2.5  # bump radius in units of its sigma


@dataclass
class SynthConfig:
    M: int = 64
    K: int = 6
    L: int = 8
    T: int = 16
    n_sequences: int = 256
    smoothness: float = 0.05
    seed: int = 0
    occlusion: float = 0.0  # per-frame, per-joint probability of hiding the bump
    noise: float = 0.0  # std of additive depth noise, normalized units

    def validate(self) -> None:
        if self.K < 2:
            raise ParameterError("K must be >= 2")
        if self.T < 2:
            raise ParameterError("T must be >= 2")
        if not 0.0 < self.smoothness < 0.5:
            raise ParameterError("smoothness must lie in (0, 0.5)")
        if not 0.0 <= self.occlusion < 1.0:
            raise ParameterError("occlusion must lie in [0, 1)")
        if self.M < 8 or self.n_sequences < 1 or self.L < 1:
            raise ParameterError("M >= 8, n_sequences >= 1 and L >= 1 required")


def joint_sigmas(K: int) -> np.ndarray:
    return 0.06 + 0.125 * np.arange(K) / max(K - 1, 1)


def _reflect(x: np.ndarray, bound: float) -> np.ndarray:
    x = np.where(x > bound, 2 * bound - x, x)
    return np.where(x < -bound, -2 * bound - x, x)


def anchors(K: int) -> np.ndarray:
    angle = 2 * np.pi * np.arange(K) / K
    return np.stack([ANCHOR_RADIUS * np.cos(angle), ANCHOR_RADIUS * np.sin(angle), np.zeros(K)], -1)


def random_walk(rng: np.random.Generator, K: int, T: int, smoothness: float) -> np.ndarray:
    """(T, K, 3) joint centres; consecutive frames differ by at most 2*smoothness per joint.

    The walk runs in offsets from each joint's anchor and reflects off the
    box walls; reflection never lengthens a step.
    """
    bounds = np.array([XY_RANGE, XY_RANGE, Z_BOUND])
    pos = np.empty((T, K, 3))
    pos[0] = rng.uniform(-bounds, bounds, size=(K, 3))
    max_step = 2.0 * smoothness
    for t in range(1, T):
        direction = rng.normal(size=(K, 3))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        length = rng.uniform(0.0, max_step, size=(K, 1))
        nxt = pos[t - 1] + direction * length
        for a in range(3):
            nxt[:, a] = _reflect(nxt[:, a], bounds[a])
        pos[t] = nxt
    return pos + anchors(K)


def render(joints: np.ndarray, M: int, visible: np.ndarray | None = None) -> np.ndarray:
    """Normalized depth image of the bumps at ``joints`` (K, 3); background is +1."""
    K = joints.shape[0]
    sig = joint_sigmas(K)
    if visible is None:
        visible = np.ones(K, dtype=bool)
    s = (np.arange(M) + 0.5) / M * 2 - 1
    dx = s[None, None, :] - joints[:, 0, None, None]
    dy = s[None, :, None] - joints[:, 1, None, None]
    r2 = (dx * dx + dy * dy) / (sig[:, None, None] ** 2)
    surf = joints[:, 2, None, None] - BUMP_HEIGHT * np.exp(-0.5 * r2)
    inside = (r2 <= SUPPORT ** 2) & visible[:, None, None]
    depth = np.where(inside, surf, np.inf).min(axis=0)
    return np.where(np.isfinite(depth), depth, 1.0)


def generate(config: SynthConfig) -> Dataset:
    """Deterministic dataset of ``n_sequences`` sequences of T frames each."""
    config.validate()
    M, K, T = config.M, config.K, config.T
    n = config.n_sequences * T
    depth = np.empty((n, M, M), dtype=np.float32)
    pose = np.empty((n, 3 * K), dtype=np.float32)
    for s in range(config.n_sequences):
        rng = np.random.default_rng([config.seed, s])
        walk = random_walk(rng, K, T, config.smoothness)
        for t in range(T):
            visible = rng.random(K) >= config.occlusion
            if not visible.any():
                visible[rng.integers(K)] = True
            img = render(walk[t], M, visible)
            if config.noise > 0:
                fg = img < 1.0
                img = np.where(fg, np.clip(img + rng.normal(0.0, config.noise, img.shape), -0.999, 0.999), 1.0)
            depth[s * T + t] = img
            pose[s * T + t] = walk[t].reshape(-1)
    seq = np.repeat(np.arange(config.n_sequences, dtype=np.uint32), T)
    idx = np.tile(np.arange(T, dtype=np.uint32), config.n_sequences)
    return Dataset(depth, pose, seq, idx, config.L, T)
