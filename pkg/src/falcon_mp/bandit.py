"""LinUCB contextual bandit used as a lightweight online-learning baseline.

This is an M-Peekaboo-like surrogate: the LinUCB core with a reset on detected
change, without Peekaboo's stochastic adjustment stage.
"""
from __future__ import annotations

import copy
from typing import List, Optional, Sequence

import numpy as np

from .cpd import ChangeMonitor
from .dqn import FEATURE_SCALE, RewardConfig, RlScheduler, Transition

LABEL = "M-Peekaboo-like"


class LinUcbArm:
    """Ridge-regression arm; keeps ``A`` and its inverse in step."""

    def __init__(self, dim: int, alpha: float = 1.0):
        self.dim = dim
        self.alpha = alpha
        self.A = np.eye(dim)
        self.A_inv = np.eye(dim)
        self.b = np.zeros(dim)

    @property
    def theta(self) -> np.ndarray:
        return self.A_inv @ self.b

    def score(self, x: np.ndarray) -> float:
        Ax = self.A_inv @ x
        return float(self.b @ Ax + self.alpha * np.sqrt(max(x @ Ax, 0.0)))

    def update(self, x: np.ndarray, r: float) -> None:
        x = np.asarray(x, dtype=float)
        if not (np.all(np.isfinite(x)) and np.isfinite(r)):
            raise ValueError("non-finite bandit update")
        self.A += np.outer(x, x)
        # Sherman-Morrison
        Ax = self.A_inv @ x
        self.A_inv -= np.outer(Ax, Ax) / (1.0 + x @ Ax)
        self.b += r * x


def ucb_select(arms: Sequence[LinUcbArm], x: np.ndarray) -> int:
    x = np.asarray(x, dtype=float)
    if x.shape != (arms[0].dim,):
        raise ValueError(f"context of shape {x.shape} for {arms[0].dim}-dim arms")
    best, best_s = 0, -np.inf
    for i, arm in enumerate(arms):
        s = arm.score(x)
        if s > best_s:
            best, best_s = i, s
    return best


def ucb_update(arm: LinUcbArm, x: np.ndarray, r: float) -> None:
    arm.update(x, r)


class LinUcbScheduler(RlScheduler):
    """Per-path arms over the scaled state plus a bias feature."""

    name = "bandit"
    label = LABEL

    def __init__(self, n_paths: int, alpha: float = 1.0, detect_changes: bool = True,
                 reward: Optional[RewardConfig] = None):
        super().__init__(reward)
        self.n_paths = n_paths
        self.alpha = alpha
        self.dim = 4 * n_paths + 1
        self.inv_scale = 1.0 / np.tile(np.asarray(FEATURE_SCALE), n_paths)
        self.monitor = ChangeMonitor(n_paths) if detect_changes else None
        self.resets = 0
        self.updates = 0
        self.arms: List[LinUcbArm] = []
        self.reset_arms()

    def reset_arms(self) -> None:
        self.arms = [LinUcbArm(self.dim, self.alpha) for _ in range(self.n_paths)]

    def context(self, s: np.ndarray) -> np.ndarray:
        return np.append(s * self.inv_scale, 1.0)

    def decide(self, s, view):
        return ucb_select(self.arms, self.context(s))

    frozen = False

    def on_transition(self, t: Transition) -> None:
        if self.frozen:
            return
        self.arms[t.a].update(self.context(t.s), t.r)
        self.updates += 1

    def on_ack(self, packet, rtt_ms, now):
        super().on_ack(packet, rtt_ms, now)
        if self.monitor is not None and self.monitor.on_ack(packet.path_id, rtt_ms):
            self._abandon()

    def on_loss(self, packet, now):
        super().on_loss(packet, now)
        if self.monitor is not None and self.monitor.on_loss(packet.path_id):
            self._abandon()

    def freeze(self, seed: int = 0) -> "LinUcbScheduler":
        """Copy that keeps selecting with the current arms but stops learning."""
        out = LinUcbScheduler(self.n_paths, self.alpha, detect_changes=False,
                              reward=self.reward_cfg)
        out.arms = copy.deepcopy(self.arms)
        out.frozen = True
        return out

    def _abandon(self):
        self.reset_arms()
        self.resets += 1
