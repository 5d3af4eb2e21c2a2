"""Deep Q-learning for per-packet path selection.

The pieces are deliberately small: a ring replay buffer, an agent holding an
online and a target :class:`~falcon_mp.nn.Mlp`, and :class:`RlScheduler`, the
glue that turns transport callbacks into ``(s, a, r, s', done)`` transitions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from .nn import Mlp
from .sched_rules import Scheduler, SchedulerView

FEATURES_PER_PATH = 4
# divides (cwnd/srtt, inflight/srtt, swnd_share/srtt, srtt) before the net
FEATURE_SCALE = (2.0, 2.0, 10.0, 100.0)


class Transition(NamedTuple):
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


def state_vector(view: SchedulerView) -> np.ndarray:
    """Raw per-path features in packets/ms and ms, concatenated over paths."""
    out = []
    for p in view.paths:
        srtt = p.srtt
        out += [p.cwnd / srtt, p.inflight / srtt, p.swnd_share / srtt, srtt]
    return np.array(out)


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored column-wise."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.s = np.zeros((capacity, state_dim))
        self.s_next = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.clear()

    def clear(self) -> None:
        self._next = 0
        self._len = 0

    def __len__(self):
        return self._len

    def push(self, t: Transition) -> None:
        i = self._next
        self.s[i] = t.s
        self.a[i] = t.a
        self.r[i] = t.r
        self.s_next[i] = t.s_next
        self.done[i] = t.done
        self._next = (i + 1) % self.capacity
        self._len = min(self._len + 1, self.capacity)

    def extend(self, transitions) -> None:
        for t in transitions:
            self.push(t)

    def _order(self) -> np.ndarray:
        # storage slots from oldest to newest
        if self._len < self.capacity:
            return np.arange(self._len)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def __getitem__(self, k: int) -> Transition:
        i = int(self._order()[k])
        return Transition(self.s[i].copy(), int(self.a[i]), float(self.r[i]),
                          self.s_next[i].copy(), bool(self.done[i]))

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if batch > self._len:
            raise ValueError(f"cannot draw {batch} from {self._len} transitions")
        return rng.choice(self._len, size=batch, replace=False)

    def columns(self, idx: np.ndarray):
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx]


@dataclass
class AgentConfig:
    gamma: float = 0.9
    epsilon: float = 0.1
    lr: float = 0.001
    batch: int = 32
    replay_capacity: int = 5000
    target_sync_interval: int = 200
    hidden: Sequence[int] = (32, 32, 32)
    feature_scale: Sequence[float] = FEATURE_SCALE

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.batch < 1 or self.replay_capacity < 1 or self.target_sync_interval < 1:
            raise ValueError("batch, replay_capacity and target_sync_interval must be >= 1")


class DqnAgent:
    """Online net for acting, target net for TD targets, uniform replay."""

    def __init__(self, n_inputs: int, n_actions: int, config: Optional[AgentConfig] = None,
                 rng: Optional[np.random.Generator] = None, net: Optional[Mlp] = None):
        self.cfg = config or AgentConfig()
        self.n_actions = n_actions
        self.rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (n_inputs, *self.cfg.hidden, n_actions)
        if net is None:
            net = Mlp(sizes, rng=self.rng)
        elif net.layer_sizes[0] != n_inputs or net.layer_sizes[-1] != n_actions:
            raise ValueError(f"net {net.layer_sizes} does not fit {n_inputs}->{n_actions}")
        self.net = net
        self.target = net.copy()
        self.replay = ReplayBuffer(self.cfg.replay_capacity, n_inputs)
        scale = np.ones(n_inputs)
        fs = np.asarray(self.cfg.feature_scale, dtype=float)
        if n_inputs % len(fs) == 0:
            scale = np.tile(fs, n_inputs // len(fs))
        self.inv_scale = 1.0 / scale
        self.train_steps = 0
        self.samples_consumed = 0

    def prep(self, s: np.ndarray) -> np.ndarray:
        return np.asarray(s, dtype=float) * self.inv_scale

    def q_values(self, s: np.ndarray) -> np.ndarray:
        return self.net.forward(self.prep(s))

    def greedy(self, s: np.ndarray) -> int:
        return int(np.argmax(self.q_values(s)))

    def act(self, s: np.ndarray, rng: Optional[np.random.Generator] = None,
            epsilon: Optional[float] = None) -> int:
        rng = rng if rng is not None else self.rng
        eps = self.cfg.epsilon if epsilon is None else epsilon
        if eps > 0.0 and rng.random() < eps:
            return int(rng.integers(self.n_actions))
        return self.greedy(s)

    def observe(self, t: Transition) -> None:
        self.replay.push(t)

    def reset_replay(self) -> None:
        self.replay.clear()

    def sync_target(self) -> None:
        self.target.set_params(self.net.theta)

    def load_policy(self, net: Mlp) -> None:
        """Swap in new parameters for both the online and the target net."""
        self.net.set_params(net.theta)
        self.target.set_params(net.theta)

    def train_step(self, rng: Optional[np.random.Generator] = None) -> Optional[float]:
        """One TD update on a fresh minibatch; ``None`` if replay is too small."""
        rng = rng if rng is not None else self.rng
        if len(self.replay) < self.cfg.batch:
            return None
        idx = self.replay.sample_indices(self.cfg.batch, rng)
        loss = td_update(self.net, self.target, self.replay.columns(idx), self.cfg.gamma,
                         self.cfg.lr, self.inv_scale)
        self.train_steps += 1
        self.samples_consumed += len(idx)
        if self.train_steps % self.cfg.target_sync_interval == 0:
            self.sync_target()
        return loss


def td_update(net: Mlp, target: Mlp, batch, gamma: float, lr: float,
              inv_scale: np.ndarray) -> float:
    """One masked squared-TD-error gradient step on ``net`` (in place)."""
    s, a, r, s_next, done = batch
    x = s * inv_scale
    q_next = target.forward(s_next * inv_scale).max(axis=1)
    y = r + gamma * q_next * (~done)
    rows = np.arange(len(a))
    targets = net.forward(x)
    targets[rows, a] = y
    mask = np.zeros_like(targets)
    mask[rows, a] = 1.0
    loss, grad = net.backward(x, targets, mask)
    net.sgd_step(grad, lr)
    return loss


# -- scheduler glue ------------------------------------------------------

@dataclass(eq=False)
class Decision:
    s: np.ndarray
    a: int
    t: float
    r: Optional[float] = None
    s_next: Optional[np.ndarray] = None
    done: bool = False


@dataclass
class RewardConfig:
    """Per-packet delivery rate measured from the decision, clipped to [0, 1].

    A packet acknowledged ``d`` seconds after its path was chosen earns
    ``min(1, ref_delay / d)``, i.e. its throughput over the rate of a packet
    delivered in ``ref_delay``.  Lost packets earn 0.
    """

    ref_delay: float = 0.010


class RlScheduler(Scheduler):
    """Scheduler driven by ``decide(state, view)`` that also emits transitions.

    Choosing a path without window headroom defers: nothing is sent, the
    decision earns reward 0 and the next decision happens at the next event.
    A policy can therefore wait for a preferred path, but pays for the wait.
    """

    name = "rl"

    def __init__(self, reward: Optional[RewardConfig] = None):
        self.reward_cfg = reward or RewardConfig()
        self.pending: Optional[Decision] = None
        self.last: Optional[Decision] = None
        self.transitions_emitted = 0
        self.defers = 0
        self.sent = 0
        # called with the running count of sent packets after every send
        self.sent_hook: Optional[Callable[[int], None]] = None
        self.listeners: List[Callable[[Transition], None]] = []

    # subclasses
    def decide(self, s: np.ndarray, view: SchedulerView) -> int:
        raise NotImplementedError

    def on_transition(self, t: Transition) -> None:
        pass

    # transport hooks
    def select(self, view):
        s = state_vector(view)
        a = self.decide(s, view)
        if not 0 <= a < len(view.paths):
            raise ValueError(f"policy returned action {a}")
        rec = Decision(s, a, view.now)
        if self.last is not None:
            self.last.s_next = s
            self._maybe_emit(self.last)
        self.last = rec
        if view.paths[a].headroom:
            self.pending = rec
            return a
        rec.r = 0.0
        self.defers += 1
        return None

    def on_sent(self, packet):
        rec, self.pending = self.pending, None
        self.sent += 1
        if self.sent_hook is not None:
            self.sent_hook(self.sent)
        return rec

    def on_ack(self, packet, rtt_ms, now):
        rec = packet.tag
        if rec is None or rec.r is not None:
            return
        delay = max(now - rec.t, 1e-9)
        rec.r = min(1.0, self.reward_cfg.ref_delay / delay)
        self._maybe_emit(rec)

    def on_loss(self, packet, now):
        rec = packet.tag
        if rec is None or rec.r is not None:
            return
        rec.r = 0.0
        self._maybe_emit(rec)

    def on_transfer_start(self, now):
        self.pending = None
        self.last = None

    def on_transfer_end(self, now):
        last = self.last
        if last is not None and last.s_next is None:
            last.s_next = last.s
            last.done = True
            self._maybe_emit(last)
        self.pending = None
        self.last = None

    def _maybe_emit(self, rec: Decision) -> None:
        if rec.r is None or rec.s_next is None:
            return
        t = Transition(rec.s, rec.a, rec.r, rec.s_next, rec.done)
        rec.r = -1.0  # emitted; later callbacks for this record are ignored
        rec.s_next = None
        self.transitions_emitted += 1
        self.on_transition(t)
        for fn in self.listeners:
            fn(t)
