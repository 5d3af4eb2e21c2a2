"""Synthetic task family for exercising meta-learning and few-shot adaptation.

A task is a direction angle ``theta``.  Contexts are uniform in [-1, 1]^d and
the rewarded action is ``[w(theta) . x > 0]`` with ``w(theta) = (cos, sin,
0, ...)``.  Tasks ``theta`` and ``theta + pi`` reward opposite actions.  Every
episode is one step long (done=True), so the TD target is the reward itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dqn import Transition
from .falcon import (Adapter, ExperienceRecord, MetaBank, MetaConfig, NetworkCondition,
                     PathCondition, TdSettings, meta_update)
from .nn import Mlp, he_uniform

DIM = 8
LAYERS = (DIM, 32, 32, 32, 2)
# the toy has no per-feature units to normalise
TOY_TD = TdSettings(gamma=0.0, lr=0.05, batch=32, feature_scale=(1.0,))


@dataclass(frozen=True)
class ToyTask:
    theta: float

    @property
    def w(self) -> np.ndarray:
        w = np.zeros(DIM)
        w[0], w[1] = math.cos(self.theta), math.sin(self.theta)
        return w

    def best(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) @ self.w > 0).astype(np.int64)

    def transitions(self, n: int, rng: np.random.Generator) -> List[Transition]:
        """Uniformly random actions with their 0/1 rewards."""
        x = rng.uniform(-1.0, 1.0, size=(n, DIM))
        a = rng.integers(2, size=n)
        r = (a == self.best(x)).astype(float)
        return [Transition(x[i], int(a[i]), float(r[i]), x[i], True) for i in range(n)]

    def score(self, net: Mlp, n: int = 2000, seed: int = 0) -> float:
        """Greedy reward of ``net`` relative to the optimal policy (which earns 1)."""
        x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n, DIM))
        return float(np.mean(np.argmax(net.forward(x), axis=1) == self.best(x)))


def flip_pair(theta0: float = 0.3) -> List[ToyTask]:
    return [ToyTask(theta0), ToyTask(theta0 + math.pi)]


# records need a condition; the toy puts all of its tasks into bucket 0
_BUCKET0 = NetworkCondition((PathCondition(0.0, 1.0, 0.0),) * 2)


def meta_train(tasks: Sequence[ToyTask], rng: np.random.Generator, iterations: int = 400,
               episodes_per_task: int = 4, episode_len: int = 256, k: int = 16,
               lam: float = 0.25, init: Optional[np.ndarray] = None) -> Mlp:
    """Meta-model for a set of tasks via the bank's meta_update."""
    bank = MetaBank(LAYERS, n_buckets=729, lam=lam, k=k)
    if init is not None:
        bank.put(0, init)
    records = []
    ep = 0
    for task in tasks:
        for _ in range(episodes_per_task):
            ep += 1
            records += [ExperienceRecord(float(ep), ep, _BUCKET0, t)
                        for t in task.transitions(episode_len, rng)]
    cfg = MetaConfig(iterations=iterations, tol=0.0, td=TOY_TD)
    meta_update(bank, records, rng, cfg)
    return bank.net(0)


def adapt(start: Mlp, task: ToyTask, k: int, rng: np.random.Generator,
          n_data: int = 512) -> Adapter:
    data = task.transitions(n_data, rng)
    ad = Adapter(start, data, k, rng, TOY_TD)
    ad.run()
    return ad


def random_init(rng: np.random.Generator) -> Mlp:
    return Mlp(LAYERS, he_uniform(LAYERS, rng))


def paired_trial(seed: int, k: int = 16, meta_iterations: int = 400) -> Dict[str, float]:
    """Adapted score from the meta-model and from a random init on a held-out episode."""
    rng = np.random.default_rng([seed, 1])
    tasks = flip_pair(float(rng.uniform(0, math.pi)))
    meta = meta_train(tasks, np.random.default_rng([seed, 2]), meta_iterations)
    task = tasks[int(rng.integers(2))]
    rand = random_init(np.random.default_rng([seed, 3]))
    m = adapt(meta, task, k, np.random.default_rng([seed, 4])).net
    r = adapt(rand, task, k, np.random.default_rng([seed, 4])).net
    return {"meta": task.score(m, seed=seed), "random": task.score(r, seed=seed)}


K_GRID = (0, 1, 2, 4, 8, 16, 32, 64)


def k_curve(starts: Sequence[Mlp], tasks: Sequence[ToyTask], ks: Sequence[int] = K_GRID,
            seed: int = 0) -> np.ndarray:
    """Mean adapted score per K over (start, task) pairs.

    Every K reuses the same data and minibatch stream, so a larger K
    continues the trajectory of a smaller one.
    """
    out = np.zeros(len(ks))
    for i, (start, task) in enumerate(zip(starts, tasks)):
        for j, k in enumerate(ks):
            ad = adapt(start, task, k, np.random.default_rng([seed, i]))
            out[j] += task.score(ad.net, seed=seed + i)
    return out / len(starts)


def plateau_onset(ks: Sequence[int], scores: Sequence[float], tol: float = 0.01) -> int:
    """Smallest K whose score, and every later one, is within ``tol`` of the best."""
    best = max(scores)
    onset = ks[-1]
    for k, s in zip(reversed(ks), reversed(scores)):
        if s < best - tol:
            break
        onset = k
    return onset


def arc_tasks(lo: float, hi: float, n: int, rng: np.random.Generator) -> List[ToyTask]:
    return [ToyTask(float(t)) for t in rng.uniform(lo, hi, size=n)]


def k_sweep(trials: int = 20, seed: int = 0, ks: Sequence[int] = K_GRID,
            meta_iterations: int = 400) -> np.ndarray:
    """Adapted score per K from meta-models of the flip-pair family."""
    starts, tasks = [], []
    for t in range(trials):
        rng = np.random.default_rng([seed, t, 1])
        pair = flip_pair(float(rng.uniform(0, math.pi)))
        starts.append(meta_train(pair, np.random.default_rng([seed, t, 2]), meta_iterations))
        tasks.append(pair[int(rng.integers(2))])
    return k_curve(starts, tasks, ks, seed)


def subrange_sweep(counts: Sequence[int] = (1, 2, 4, 8), trials: int = 16, seed: int = 0,
                   ks: Sequence[int] = K_GRID, tasks_per_range: int = 8,
                   meta_iterations: int = 400) -> Dict[int, int]:
    """Plateau-onset K per number of sub-ranges of the task circle.

    With ``n`` sub-ranges every meta-model covers an arc of 2*pi/n; held-out
    tasks are adapted from the meta-model of their own arc.
    """
    out = {}
    for n in counts:
        width = 2 * math.pi / n
        metas = []
        for j in range(n):
            rng = np.random.default_rng([seed, n, j])
            tasks = arc_tasks(j * width, (j + 1) * width, tasks_per_range, rng)
            metas.append(meta_train(tasks, rng, meta_iterations, episodes_per_task=1))
        rng = np.random.default_rng([seed, n, 99])
        held = arc_tasks(0.0, 2 * math.pi, trials, rng)
        starts = [metas[min(int(t.theta // width), n - 1)] for t in held]
        out[n] = plateau_onset(ks, k_curve(starts, held, ks, seed))
    return out
