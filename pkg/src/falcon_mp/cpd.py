"""Bayesian online change-point detection (run-length recursion).

Observations are modelled as Normal with unknown mean and variance under a
Normal-Inverse-Gamma prior, so the predictive density of each run length is a
Student-t.  Loss flags are first grouped into per-group counts so that the
same detector can watch both RTT and loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.special import gammaln


@dataclass
class CpdConfig:
    hazard: float = 1.0 / 250.0
    r_young: int = 5
    threshold: float = 0.5
    refractory: int = 100
    r_max: int = 500
    warmup: int = 10
    group_size: int = 50
    # lower bound on the predictive variance; keeps near-constant signals
    # (e.g. loss counts that are almost always 0) from looking infinitely precise
    min_var: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.hazard < 1.0:
            raise ValueError("hazard must lie in (0, 1)")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.r_max < 1 or self.r_young < 1 or self.warmup < 1:
            raise ValueError("r_max, r_young and warmup must be >= 1")


def group_losses(flags: Sequence[int], group_size: int) -> List[int]:
    """Sums of consecutive non-overlapping groups; a partial tail is dropped."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    n = len(flags) // group_size
    return [int(sum(flags[i * group_size:(i + 1) * group_size])) for i in range(n)]


def _student_t_logpdf(x, df, loc, scale2):
    z = (x - loc) ** 2 / (df * scale2)
    return (gammaln((df + 1) / 2) - gammaln(df / 2)
            - 0.5 * np.log(df * math.pi * scale2) - (df + 1) / 2 * np.log1p(z))


class Bocpd:
    """Run-length posterior for one scalar signal."""

    def __init__(self, config: Optional[CpdConfig] = None):
        self.cfg = config or CpdConfig()
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.since_trigger = 0
        self.triggers = 0
        self._warm: List[float] = []
        self.probs = np.ones(1)
        self._prior = None
        self.mu = self.kappa = self.alpha = self.beta = None

    @property
    def ready(self) -> bool:
        return self._prior is not None

    def update(self, x: float) -> "Bocpd":
        x = float(x)
        if not math.isfinite(x):
            raise ValueError(f"non-finite observation {x}")
        self.t += 1
        self.since_trigger += 1
        if self._prior is None:
            self._warm.append(x)
            if len(self._warm) >= self.cfg.warmup:
                w = np.array(self._warm)
                var = max(float(w.var(ddof=1)) if len(w) > 1 else 0.0, self.cfg.min_var)
                self._prior = (w[0], 1.0, 1.0, var)
                self.mu = np.array([w[0]])
                self.kappa = np.array([1.0])
                self.alpha = np.array([1.0])
                self.beta = np.array([var])
                for v in self._warm:
                    self._step(v)
                self._warm = []
            return self
        self._step(x)
        return self

    def _step(self, x: float) -> None:
        cfg = self.cfg
        h = cfg.hazard
        scale2 = self.beta * (self.kappa + 1.0) / (self.alpha * self.kappa)
        scale2 = np.maximum(scale2, cfg.min_var)
        logp = _student_t_logpdf(x, 2.0 * self.alpha, self.mu, scale2)
        pred = np.exp(logp - logp.max())
        joint = self.probs * pred
        cp = joint.sum() * h
        probs = np.concatenate(([cp], joint * (1.0 - h)))
        mu0, k0, a0, b0 = self._prior
        mu = np.concatenate(([mu0], (self.kappa * self.mu + x) / (self.kappa + 1.0)))
        beta = np.concatenate(
            ([b0], self.beta + self.kappa * (x - self.mu) ** 2 / (2.0 * (self.kappa + 1.0))))
        kappa = np.concatenate(([k0], self.kappa + 1.0))
        alpha = np.concatenate(([a0], self.alpha + 0.5))
        if len(probs) > cfg.r_max + 1:
            # fold the overflow into the oldest kept run length
            keep = cfg.r_max + 1
            tail = probs[keep:].sum()
            probs, mu, beta, kappa, alpha = (v[:keep] for v in (probs, mu, beta, kappa, alpha))
            probs[-1] += tail
        total = probs.sum()
        if not total > 0.0:
            probs = np.zeros(len(probs))
            probs[0] = 1.0
        else:
            probs = probs / total
        self.probs, self.mu, self.beta, self.kappa, self.alpha = probs, mu, beta, kappa, alpha

    def young_mass(self) -> float:
        return float(self.probs[:self.cfg.r_young].sum())

    def map_run_length(self) -> int:
        return int(np.argmax(self.probs))

    def detect(self) -> bool:
        """Trigger when recent run lengths dominate and the refractory period is over."""
        if not self.ready or self.since_trigger < self.cfg.refractory:
            return False
        if self.young_mass() > self.cfg.threshold:
            self.since_trigger = 0
            self.triggers += 1
            return True
        return False

    def feed(self, x: float) -> bool:
        return self.update(x).detect()


def update(det: Bocpd, x: float) -> Bocpd:
    return det.update(x)


def detect(det: Bocpd) -> bool:
    return det.detect()


class LossGrouper:
    """Turns a stream of per-packet loss flags into group counts."""

    def __init__(self, group_size: int):
        if group_size < 1:
            raise ValueError("group_size must be >= 1")
        self.group_size = group_size
        self._n = 0
        self._sum = 0

    def push(self, lost: bool) -> Optional[int]:
        self._n += 1
        self._sum += int(lost)
        if self._n == self.group_size:
            out = self._sum
            self._n = self._sum = 0
            return out
        return None

    def reset(self) -> None:
        self._n = self._sum = 0


def count_triggers(stream: Iterable[float], config: Optional[CpdConfig] = None) -> List[int]:
    """Indices (0-based) of the observations at which the detector fired."""
    det = Bocpd(config)
    return [i for i, x in enumerate(stream) if det.feed(x)]


class ChangeMonitor:
    """RTT and grouped-loss detectors for every path; any trigger counts.

    RTT samples are in ms.  The RTT detector sees the minimum of every
    ``rtt_group`` consecutive samples, which filters out the queueing sawtooth
    of the path's own traffic.  Each packet outcome (ACK or loss) feeds the
    loss grouper of its path.
    """

    def __init__(self, n_paths: int, rtt_config: Optional[CpdConfig] = None,
                 loss_config: Optional[CpdConfig] = None, rtt_group: int = 16):
        if rtt_group < 1:
            raise ValueError("rtt_group must be >= 1")
        self.rtt_group = rtt_group
        self._rtt_buf: List[List[float]] = [[] for _ in range(n_paths)]
        self.rtt_cfg = rtt_config or CpdConfig(min_var=1.0)
        self.loss_cfg = loss_config or CpdConfig(min_var=1.0)
        self.rtt = [Bocpd(self.rtt_cfg) for _ in range(n_paths)]
        self.loss = [Bocpd(self.loss_cfg) for _ in range(n_paths)]
        self.groupers = [LossGrouper(self.loss_cfg.group_size) for _ in range(n_paths)]
        self.triggers = 0

    def reset(self) -> None:
        for d in self.rtt + self.loss:
            d.reset()
        for g in self.groupers:
            g.reset()
        for b in self._rtt_buf:
            b.clear()

    def on_ack(self, path_id: int, rtt_ms: float) -> bool:
        buf = self._rtt_buf[path_id]
        buf.append(rtt_ms)
        fired = False
        if len(buf) == self.rtt_group:
            fired = self.rtt[path_id].feed(min(buf))
            buf.clear()
        fired = self._outcome(path_id, False) or fired
        return self._count(fired)

    def on_loss(self, path_id: int) -> bool:
        return self._count(self._outcome(path_id, True))

    def _outcome(self, path_id, lost):
        n = self.groupers[path_id].push(lost)
        return n is not None and self.loss[path_id].feed(n)

    def _count(self, fired: bool) -> bool:
        if fired:
            self.triggers += 1
        return fired
