"""FALCON: meta-learned initializations plus few-shot online adaptation.

Offline, a bank of meta-models (one per coarse network-condition bucket) is
refined from logged experience with a Reptile-style interpolation.  Online,
change detection triggers a short localization window; the estimated condition
selects a bucket whose meta-model is fine-tuned for K minibatch steps and then
swapped in as the serving policy.  DQN-On and DQN-Off are configurations of
the same agent.
"""
from __future__ import annotations

import bisect
import csv
import io
import logging
import math
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .cpd import ChangeMonitor
from .dqn import (AgentConfig, DqnAgent, FEATURE_SCALE, RewardConfig, RlScheduler,
                  Transition, td_update)
from .nn import Mlp, ModelFormatError, TrainingError, he_uniform, read_model

log = logging.getLogger(__name__)

# -- network conditions and buckets ---------------------------------------


class PathCondition(NamedTuple):
    loss: float      # percent
    rtt: float       # ms
    var: float       # RTT deviation / mean, percent


@dataclass(frozen=True)
class NetworkCondition:
    paths: Tuple[PathCondition, ...]

    def __post_init__(self):
        ps = tuple(PathCondition(*map(float, p)) for p in self.paths)
        object.__setattr__(self, "paths", ps)
        for p in ps:
            if not all(math.isfinite(v) for v in p):
                raise ValueError(f"non-finite condition {p}")
            if p.loss < 0 or p.var < 0 or p.rtt <= 0:
                raise ValueError(f"invalid path condition {p}")

    @classmethod
    def from_models(cls, models) -> "NetworkCondition":
        """Condition implied by :class:`~falcon_mp.netsim.PathModel` values."""
        return cls(tuple(PathCondition(m.loss_rate * 100.0, m.rtt_mean,
                                       100.0 * m.rtt_dev / m.rtt_mean) for m in models))

    def flat(self) -> List[float]:
        return [v for p in self.paths for v in p]


@dataclass(frozen=True)
class Binning:
    """Closed-left bin edges for loss (%), mean RTT (ms) and RTT variation (%)."""

    loss_edges: Tuple[float, ...] = (1.0, 5.0)
    rtt_edges: Tuple[float, ...] = (50.0, 200.0)
    var_edges: Tuple[float, ...] = (40.0, 80.0)
    n_paths: int = 2

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (len(self.loss_edges) + 1, len(self.rtt_edges) + 1, len(self.var_edges) + 1)

    @property
    def per_path(self) -> int:
        a, b, c = self.shape
        return a * b * c

    @property
    def n_buckets(self) -> int:
        return self.per_path ** self.n_paths

    def path_bins(self, p: PathCondition) -> Tuple[int, int, int]:
        return (bisect.bisect_right(self.loss_edges, p.loss),
                bisect.bisect_right(self.rtt_edges, p.rtt),
                bisect.bisect_right(self.var_edges, p.var))

    def path_index(self, p: PathCondition) -> int:
        lb, rb, vb = self.path_bins(p)
        _, nr, nv = self.shape
        return (lb * nr + rb) * nv + vb

    def index(self, c: NetworkCondition) -> int:
        if len(c.paths) != self.n_paths:
            raise ValueError(f"condition has {len(c.paths)} paths, binning expects {self.n_paths}")
        idx = 0
        for p in c.paths:
            idx = idx * self.per_path + self.path_index(p)
        return idx

    def bins_of(self, idx: int) -> Tuple[Tuple[int, int, int], ...]:
        """Inverse of :meth:`index`: per-path ``(loss_bin, rtt_bin, var_bin)``."""
        if not 0 <= idx < self.n_buckets:
            raise ValueError(f"bucket {idx} out of range")
        _, nr, nv = self.shape
        out = []
        for _ in range(self.n_paths):
            idx, b = divmod(idx, self.per_path)
            out.append((b // (nr * nv), (b // nv) % nr, b % nv))
        return tuple(reversed(out))

    @classmethod
    def subranges(cls, n: int, n_paths: int = 2, loss_max: float = 10.0,
                  rtt_max: float = 300.0, var_max: float = 120.0) -> "Binning":
        """``n`` equal-width sub-ranges per dimension over the given spans."""
        if n < 1:
            raise ValueError("need at least one sub-range")

        def edges(top):
            return tuple(top * i / n for i in range(1, n))

        return cls(edges(loss_max), edges(rtt_max), edges(var_max), n_paths)


DEFAULT_BINNING = Binning()


def bucket_of(c: NetworkCondition, binning: Binning = DEFAULT_BINNING) -> int:
    return binning.index(c)


class EstimationPending(Exception):
    """Not enough samples yet for a condition estimate."""


class ConditionWindow:
    """Per-path RTT samples and loss counts since the window was opened.

    With ``cap`` set, only the first ``cap`` outcomes of each path are kept,
    so that a heavily used path is not measured deep into its own queue
    build-up.  ``total`` still counts every outcome seen.
    """

    def __init__(self, n_paths: int, cap: Optional[int] = None):
        self.n_paths = n_paths
        self.cap = cap
        self.reset()

    def reset(self) -> None:
        self.rtts: List[List[float]] = [[] for _ in range(self.n_paths)]
        self.losses = [0] * self.n_paths
        self.seen = [0] * self.n_paths

    def _room(self, path_id: int) -> bool:
        self.seen[path_id] += 1
        return self.cap is None or self.packets(path_id) < self.cap

    def add_ack(self, path_id: int, rtt_ms: float) -> None:
        if self._room(path_id):
            self.rtts[path_id].append(rtt_ms)

    def add_loss(self, path_id: int) -> None:
        if self._room(path_id):
            self.losses[path_id] += 1

    def packets(self, path_id: int) -> int:
        return len(self.rtts[path_id]) + self.losses[path_id]

    @property
    def total(self) -> int:
        return sum(self.seen)


def estimate_condition(window: ConditionWindow, w_min: int = 100) -> NetworkCondition:
    """Sample loss rate, mean RTT and RTT variation ratio per path."""
    out = []
    for i in range(window.n_paths):
        n = window.packets(i)
        r = window.rtts[i]
        if n < w_min or len(r) < 2:
            raise EstimationPending(f"path {i}: {n} packets, {len(r)} RTT samples")
        arr = np.asarray(r)
        mean = float(arr.mean())
        out.append(PathCondition(100.0 * window.losses[i] / n, mean,
                                 100.0 * float(arr.std(ddof=1)) / mean))
    return NetworkCondition(tuple(out))


# -- experience log ---------------------------------------------------------


class ExperienceRecord(NamedTuple):
    time: float
    episode: int
    condition: NetworkCondition
    transition: Transition


class ExperienceLog:
    """Append-only, time-ordered experience with a consumption cursor."""

    def __init__(self):
        self.records: List[ExperienceRecord] = []
        self.consumed = 0

    def __len__(self):
        return len(self.records)

    def append(self, rec: ExperienceRecord) -> None:
        if self.records and rec.time < self.records[-1].time:
            raise ValueError("experience records must be appended in time order")
        self.records.append(rec)

    def extend(self, recs: Iterable[ExperienceRecord]) -> None:
        for r in recs:
            self.append(r)

    def take_new(self) -> List[ExperienceRecord]:
        new = self.records[self.consumed:]
        self.consumed = len(self.records)
        return new

    def compact(self) -> None:
        """Drop records already consumed by the offline loop."""
        del self.records[:self.consumed]
        self.consumed = 0

    def to_csv(self, fh) -> None:
        w = csv.writer(fh)
        if not self.records:
            w.writerow(["time_s", "episode"])
            return
        first = self.records[0]
        n_paths = len(first.condition.paths)
        d = len(first.transition.s)
        head = ["time_s", "episode"]
        for i in range(1, n_paths + 1):
            head += [f"loss_{i}", f"rtt_{i}", f"var_{i}"]
        head += [f"s_{j}" for j in range(d)] + ["action", "reward"]
        head += [f"ns_{j}" for j in range(d)] + ["done"]
        w.writerow(head)
        for rec in self.records:
            t = rec.transition
            w.writerow([repr(rec.time), rec.episode, *map(repr, rec.condition.flat()),
                        *map(repr, t.s.tolist()), t.a, repr(t.r),
                        *map(repr, t.s_next.tolist()), int(t.done)])

    @classmethod
    def from_csv(cls, fh) -> "ExperienceLog":
        rows = list(csv.reader(fh))
        out = cls()
        if not rows:
            return out
        head = rows[0]
        if len(head) <= 2:
            return out
        n_paths = sum(1 for h in head if h.startswith("loss_"))
        d = sum(1 for h in head if h.startswith("s_"))
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(head):
                raise ValueError(f"line {lineno}: expected {len(head)} fields, got {len(row)}")
            v = row
            k = 2
            cond = NetworkCondition(tuple(
                PathCondition(*map(float, v[k + 3 * i:k + 3 * i + 3])) for i in range(n_paths)))
            k += 3 * n_paths
            s = np.array(v[k:k + d], dtype=float)
            k += d
            a, r = int(v[k]), float(v[k + 1])
            k += 2
            s2 = np.array(v[k:k + d], dtype=float)
            done = v[k + d] == "1"
            out.append(ExperienceRecord(float(v[0]), int(v[1]), cond,
                                        Transition(s, a, r, s2, done)))
        return out

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            self.to_csv(fh)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperienceLog":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls.from_csv(fh)


# -- meta-model bank ---------------------------------------------------------

BANK_MAGIC = b"FALCBANK"
BANK_VERSION = 1


class BankFormatError(ValueError):
    pass


@dataclass
class BankEntry:
    theta: np.ndarray
    updates: int = 0
    epoch: int = 0


class MetaBank:
    """Meta-parameters per bucket.  Buckets without an entry are untrained."""

    def __init__(self, layer_sizes: Sequence[int], n_buckets: int = 729, lam: float = 0.25,
                 k: int = 16):
        if not 0.0 < lam <= 1.0:
            raise ValueError("meta learning rate must lie in (0, 1]")
        if k < 0:
            raise ValueError("K must be >= 0")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.n_buckets = n_buckets
        self.lam = lam
        self.k = k
        self.entries: Dict[int, BankEntry] = {}
        self.epoch = 0

    def __len__(self):
        return len(self.entries)

    def trained(self, idx: int) -> bool:
        return idx in self.entries

    def theta(self, idx: int) -> Optional[np.ndarray]:
        e = self.entries.get(idx)
        return None if e is None else e.theta.copy()

    def net(self, idx: int) -> Optional[Mlp]:
        th = self.theta(idx)
        return None if th is None else Mlp(self.layer_sizes, th)

    def put(self, idx: int, theta: np.ndarray, updates: int = 0, epoch: int = 0) -> None:
        if not 0 <= idx < self.n_buckets:
            raise ValueError(f"bucket {idx} out of range")
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (_n_params(self.layer_sizes),):
            raise BankFormatError("parameter layout does not match the bank")
        self.entries[idx] = BankEntry(theta.copy(), updates, epoch)

    def copy(self) -> "MetaBank":
        out = MetaBank(self.layer_sizes, self.n_buckets, self.lam, self.k)
        out.epoch = self.epoch
        for i, e in self.entries.items():
            out.entries[i] = BankEntry(e.theta.copy(), e.updates, e.epoch)
        return out

    def __eq__(self, other):
        if not isinstance(other, MetaBank):
            return NotImplemented
        if (self.layer_sizes, self.n_buckets, self.lam, self.k, self.epoch) != \
                (other.layer_sizes, other.n_buckets, other.lam, other.k, other.epoch):
            return False
        if self.entries.keys() != other.entries.keys():
            return False
        return all(np.array_equal(e.theta, other.entries[i].theta)
                   and (e.updates, e.epoch) == (other.entries[i].updates, other.entries[i].epoch)
                   for i, e in self.entries.items())

    # persistence
    def to_bytes(self) -> bytes:
        out = [BANK_MAGIC, struct.pack("<HIdII", BANK_VERSION, self.n_buckets, self.lam,
                                       self.k, self.epoch)]
        sizes = self.layer_sizes
        out.append(struct.pack("<H", len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes))
        out.append(struct.pack("<I", len(self.entries)))
        for idx in sorted(self.entries):
            e = self.entries[idx]
            out.append(struct.pack("<III", idx, e.updates, e.epoch))
            out.append(Mlp(sizes, e.theta).to_bytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MetaBank":
        off = 0

        def take(n):
            nonlocal off
            if off + n > len(data):
                raise BankFormatError("truncated bank file")
            chunk = data[off:off + n]
            off += n
            return chunk

        if take(len(BANK_MAGIC)) != BANK_MAGIC:
            raise BankFormatError("bad bank magic")
        version, n_buckets, lam, k, epoch = struct.unpack("<HIdII", take(22))
        if version != BANK_VERSION:
            raise BankFormatError(f"unsupported bank version {version}")
        (n_sizes,) = struct.unpack("<H", take(2))
        sizes = struct.unpack(f"<{n_sizes}I", take(4 * n_sizes))
        (count,) = struct.unpack("<I", take(4))
        bank = cls(sizes, n_buckets, lam, k)
        bank.epoch = epoch
        for _ in range(count):
            idx, updates, e_epoch = struct.unpack("<III", take(12))
            try:
                net, off = read_model(data, off)
            except ModelFormatError as exc:
                raise BankFormatError(f"entry {idx}: {exc}") from None
            if net.layer_sizes != bank.layer_sizes:
                raise BankFormatError(f"entry {idx}: layout {net.layer_sizes} != {sizes}")
            if idx in bank.entries or not 0 <= idx < n_buckets:
                raise BankFormatError(f"bad or duplicate bucket id {idx}")
            bank.entries[idx] = BankEntry(net.theta, updates, e_epoch)
        if off != len(data):
            raise BankFormatError(f"{len(data) - off} trailing bytes in bank file")
        return bank


def _n_params(sizes):
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def save_bank(bank: MetaBank, sink: Union[str, Path]) -> None:
    Path(sink).write_bytes(bank.to_bytes())


def load_bank(source: Union[str, Path]) -> MetaBank:
    return MetaBank.from_bytes(Path(source).read_bytes())


# -- adaptation --------------------------------------------------------------


@dataclass
class TdSettings:
    gamma: float = 0.9
    lr: float = 0.001
    batch: int = 32
    feature_scale: Sequence[float] = FEATURE_SCALE

    def inv_scale(self, dim: int) -> np.ndarray:
        fs = np.asarray(self.feature_scale, dtype=float)
        if dim % len(fs):
            return np.ones(dim)
        return 1.0 / np.tile(fs, dim // len(fs))


def _stack(transitions: Sequence[Transition]):
    s = np.array([t.s for t in transitions], dtype=float)
    a = np.array([t.a for t in transitions], dtype=np.int64)
    r = np.array([t.r for t in transitions], dtype=float)
    s2 = np.array([t.s_next for t in transitions], dtype=float)
    d = np.array([t.done for t in transitions], dtype=bool)
    return s, a, r, s2, d


class Adapter:
    """K minibatch TD steps from a starting net, one :meth:`step` at a time.

    The target net is the starting point and stays fixed for the K steps.
    """

    def __init__(self, start: Mlp, data: Sequence[Transition], k: int,
                 rng: np.random.Generator, td: Optional[TdSettings] = None):
        self.td = td or TdSettings()
        if k > 0 and len(data) < self.td.batch:
            raise EstimationPending(f"{len(data)} transitions, need {self.td.batch}")
        self.net = start.copy()
        self.target = start.copy()
        self.k = k
        self.rng = rng
        self.cols = _stack(data) if len(data) else None
        self.n = len(data)
        self.inv_scale = self.td.inv_scale(start.n_in)
        self.steps = 0
        self.samples = 0

    @property
    def finished(self) -> bool:
        return self.steps >= self.k

    def step(self) -> None:
        if self.finished:
            return
        idx = self.rng.choice(self.n, size=self.td.batch, replace=False)
        batch = tuple(c[idx] for c in self.cols)
        td_update(self.net, self.target, batch, self.td.gamma, self.td.lr, self.inv_scale)
        self.steps += 1
        self.samples += len(idx)

    def run(self) -> Mlp:
        while not self.finished:
            self.step()
        return self.net


def init_for(bank: MetaBank, idx: int, rng: np.random.Generator) -> Mlp:
    """Meta-model of ``idx`` or, for an untrained bucket, a seeded random net."""
    net = bank.net(idx)
    if net is None:
        net = Mlp(bank.layer_sizes, he_uniform(bank.layer_sizes, rng))
    return net


def few_shot_adapt(bank: MetaBank, idx: int, recent: Sequence[Transition],
                   rng: np.random.Generator, td: Optional[TdSettings] = None,
                   k: Optional[int] = None) -> Tuple[Mlp, Adapter]:
    """K-step fine-tune of the bucket's meta-model; the bank is not modified."""
    k = bank.k if k is None else k
    ad = Adapter(init_for(bank, idx, rng), recent, k, rng, td)
    return ad.run(), ad


@dataclass
class MetaConfig:
    iterations: int = 50
    tol: float = 1e-4
    min_episode: int = 32
    td: TdSettings = field(default_factory=TdSettings)


def meta_update(bank: MetaBank, records: Sequence[ExperienceRecord],
                rng: np.random.Generator, cfg: Optional[MetaConfig] = None,
                binning: Binning = DEFAULT_BINNING) -> Dict[int, int]:
    """Reptile-style refinement of every bucket present in ``records``.

    Returns the number of meta-iterations run per bucket.
    """
    cfg = cfg or MetaConfig()
    by_bucket: Dict[int, Dict[int, List[Transition]]] = {}
    for rec in records:
        idx = binning.index(rec.condition)
        by_bucket.setdefault(idx, {}).setdefault(rec.episode, []).append(rec.transition)
    done: Dict[int, int] = {}
    bank.epoch += 1
    for idx in sorted(by_bucket):
        episodes = [_stack(v) for _, v in sorted(by_bucket[idx].items())
                    if len(v) >= max(cfg.min_episode, cfg.td.batch)]
        if not episodes:
            continue
        theta = init_for(bank, idx, rng).theta.copy()
        start = Mlp(bank.layer_sizes, theta)
        inv_scale = cfg.td.inv_scale(start.n_in)
        its = 0
        for _ in range(cfg.iterations):
            ep = episodes[int(rng.integers(len(episodes)))]
            n = len(ep[0])
            start.set_params(theta)
            w = start.copy()
            try:
                for _ in range(bank.k):
                    sel = rng.choice(n, size=cfg.td.batch, replace=False)
                    td_update(w, start, tuple(c[sel] for c in ep), cfg.td.gamma, cfg.td.lr,
                              inv_scale)
            except TrainingError as exc:
                log.warning("bucket %d: inner loop diverged (%s); iteration skipped", idx, exc)
                continue
            delta = bank.lam * (w.theta - theta)
            theta = theta + delta
            its += 1
            if float(np.max(np.abs(delta))) < cfg.tol:
                break
        prev = bank.entries.get(idx)
        bank.put(idx, theta, (prev.updates if prev else 0) + its, bank.epoch)
        done[idx] = its
    return done


def offline_loop_tick(bank: MetaBank, log_: ExperienceLog, rng: np.random.Generator,
                      cfg: Optional[MetaConfig] = None,
                      binning: Binning = DEFAULT_BINNING) -> Dict[int, int]:
    """Meta-update from the part of the log not consumed by earlier ticks."""
    new = log_.take_new()
    if not new:
        return {}
    return meta_update(bank, new, rng, cfg, binning)


# -- the online agent -------------------------------------------------------

SERVING, LOCALIZING, ADAPTING = "serving", "localizing", "adapting"


@dataclass
class FalconConfig:
    k: int = 16
    batch: int = 32
    lr: float = 0.001
    gamma: float = 0.9
    eps_l: float = 0.3
    eps_s: float = 0.1
    w_min: int = 100
    # localization also completes once this many packets have been seen in
    # total and every path has at least ``w_fallback`` samples
    w_total_fallback: int = 400
    w_fallback: int = 10
    recent_capacity: int = 2048
    detect_changes: bool = True
    adapt: bool = True
    online_training: bool = False
    train_every: int = 32
    frozen: bool = False
    log_experience: bool = True
    replay_capacity: int = 5000
    target_sync_interval: int = 200
    hidden: Sequence[int] = (32, 32, 32)
    epsilon: Optional[float] = None

    def td(self) -> TdSettings:
        return TdSettings(self.gamma, self.lr, self.batch)


def falcon_config(**kw) -> FalconConfig:
    return FalconConfig(**kw)


def dqn_on_config(**kw) -> FalconConfig:
    """Continuous online DQN: no change detection, no policy abandoning."""
    base = dict(detect_changes=False, adapt=False, online_training=True, log_experience=False)
    base.update(kw)
    return FalconConfig(**base)


def dqn_off_config(**kw) -> FalconConfig:
    """Frozen pretrained policy, greedy by default."""
    base = dict(detect_changes=False, adapt=False, frozen=True, log_experience=False,
                epsilon=0.0)
    base.update(kw)
    return FalconConfig(**base)


@dataclass
class AdaptationEvent:
    trigger_time: float
    trigger_decision: int
    localization_packets: int = 0
    bucket: Optional[int] = None
    trained_bucket: bool = False
    steps: int = 0
    samples: int = 0
    swap_time: Optional[float] = None
    swap_decision: Optional[int] = None


class FalconAgent(RlScheduler):
    """Online loop of FALCON (or DQN-On / DQN-Off, depending on the config)."""

    name = "falcon"

    def __init__(self, n_paths: int, config: Optional[FalconConfig] = None,
                 bank: Optional[MetaBank] = None, rng: Optional[np.random.Generator] = None,
                 policy: Optional[Mlp] = None, binning: Binning = DEFAULT_BINNING,
                 reward: Optional[RewardConfig] = None, name: Optional[str] = None):
        super().__init__(reward)
        self.cfg = cfg = config or FalconConfig()
        self.n_paths = n_paths
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.binning = binning
        if name is not None:
            self.name = name
        sizes = (4 * n_paths, *cfg.hidden, n_paths)
        self.bank = bank if bank is not None else MetaBank(sizes, binning.n_buckets, k=cfg.k)
        if self.bank.layer_sizes != sizes:
            raise ValueError(f"bank layout {self.bank.layer_sizes} != agent layout {sizes}")
        agent_cfg = AgentConfig(gamma=cfg.gamma, epsilon=cfg.eps_s, lr=cfg.lr, batch=cfg.batch,
                                replay_capacity=cfg.replay_capacity,
                                target_sync_interval=cfg.target_sync_interval,
                                hidden=tuple(cfg.hidden))
        start = policy.copy() if policy is not None else Mlp(sizes, rng=self.rng)
        self.dqn = DqnAgent(4 * n_paths, n_paths, agent_cfg, self.rng, start)
        self.policy = self.dqn.net  # CurrentPolicy
        self.policy_trained_bucket = policy is not None
        self.monitor = ChangeMonitor(n_paths) if cfg.detect_changes else None
        self.window = ConditionWindow(n_paths, cfg.w_min)
        self.recent: deque = deque(maxlen=cfg.recent_capacity)
        self.log = ExperienceLog()
        self.phase = SERVING
        self.adapter: Optional[Adapter] = None
        self.events: List[AdaptationEvent] = []
        self.episode = 0
        self.condition: Optional[NetworkCondition] = None
        self._episode_buf: List[Tuple[float, Transition]] = []
        self.decisions = 0
        self.swaps = 0
        self._since_train = 0
        self.now = 0.0
        # experience timestamps keep increasing across transfers even though
        # every transfer runs on a fresh simulator clock
        self._base = 0.0
        self._t0 = 0.0

    # -- policy ------------------------------------------------------------
    @property
    def epsilon(self) -> float:
        if self.cfg.epsilon is not None:
            return self.cfg.epsilon
        if self.cfg.adapt and not self.policy_trained_bucket:
            return self.cfg.eps_l
        return self.cfg.eps_s

    def decide(self, s, view):
        self.decisions += 1
        self.now = view.now
        return self.dqn.act(s, self.rng, self.epsilon)

    def q_values(self, s) -> np.ndarray:
        return self.dqn.q_values(s)

    # -- change handling ---------------------------------------------------
    @property
    def log_time(self) -> float:
        return self._base + max(self.now - self._t0, 0.0)

    def on_transfer_start(self, now):
        super().on_transfer_start(now)
        self._t0 = self.now = now
        if self.cfg.adapt:
            self.trigger(now)

    def on_transfer_end(self, now):
        self.now = now
        super().on_transfer_end(now)
        self._close_episode()
        self._base = self.log_time
        self._t0 = now

    def trigger(self, now: float) -> None:
        """Begin localization for a (detected or implicit) change."""
        if not self.cfg.adapt:
            return
        self._close_episode()
        self.episode += 1
        self.condition = None
        self.window.reset()
        self.recent.clear()
        self.adapter = None
        self.phase = LOCALIZING
        self.events.append(AdaptationEvent(now, self.decisions))

    def _feedback(self, path_id, rtt_ms, lost, now):
        self.now = now
        if self.monitor is not None:
            fired = (self.monitor.on_loss(path_id) if lost
                     else self.monitor.on_ack(path_id, rtt_ms))
            # a change seen while already localizing or adapting is folded
            # into the running adaptation
            if fired and self.phase == SERVING:
                self.trigger(now)
        if self.phase == LOCALIZING:
            if lost:
                self.window.add_loss(path_id)
            else:
                self.window.add_ack(path_id, rtt_ms)
            self._try_localize(now)

    def _try_localize(self, now):
        cfg = self.cfg
        w = self.window
        try:
            cond = estimate_condition(w, cfg.w_min)
        except EstimationPending:
            if w.total < cfg.w_total_fallback or \
                    min(w.packets(i) for i in range(self.n_paths)) < cfg.w_fallback:
                return
            try:
                cond = estimate_condition(w, cfg.w_fallback)
            except EstimationPending:
                return
        ev = self.events[-1]
        ev.localization_packets = w.total
        ev.bucket = self.binning.index(cond)
        ev.trained_bucket = self.bank.trained(ev.bucket)
        self.condition = cond
        self._flush_episode()
        self.phase = ADAPTING
        self._start_adapter()

    def _start_adapter(self):
        if len(self.recent) < self.cfg.batch:
            return
        ev = self.events[-1]
        start = init_for(self.bank, ev.bucket, self.rng)
        self.adapter = Adapter(start, list(self.recent), self.cfg.k, self.rng, self.cfg.td())
        self._adapt_tick()

    def _adapt_tick(self):
        ad = self.adapter
        if ad is None:
            return
        if not ad.finished:
            try:
                ad.step()
            except TrainingError as exc:
                # keep serving the current policy rather than a diverged one
                log.warning("adaptation abandoned: %s", exc)
                self.adapter = None
                self.phase = SERVING
                return
        if ad.finished:
            ev = self.events[-1]
            ev.steps, ev.samples = ad.steps, ad.samples
            ev.swap_time, ev.swap_decision = self.now, self.decisions
            self.dqn.load_policy(ad.net)
            self.policy_trained_bucket = ev.trained_bucket
            self.swaps += 1
            self.adapter = None
            self.phase = SERVING

    def on_ack(self, packet, rtt_ms, now):
        super().on_ack(packet, rtt_ms, now)
        if not self.cfg.frozen:
            self._feedback(packet.path_id, rtt_ms, False, now)

    def on_loss(self, packet, now):
        super().on_loss(packet, now)
        if not self.cfg.frozen:
            self._feedback(packet.path_id, 0.0, True, now)

    # -- experience --------------------------------------------------------
    def on_transition(self, t: Transition) -> None:
        cfg = self.cfg
        if cfg.frozen:
            return
        self.recent.append(t)
        if cfg.log_experience:
            self._episode_buf.append((self.log_time, t))
            if self.condition is not None:
                self._flush_episode()
        if cfg.online_training:
            self.dqn.observe(t)
            self._since_train += 1
            if self._since_train >= cfg.train_every:
                self._since_train = 0
                self.dqn.train_step(self.rng)
        if self.phase == ADAPTING:
            if self.adapter is None:
                self._start_adapter()
            else:
                self._adapt_tick()

    def _flush_episode(self):
        if self.condition is None:
            return
        for t_, tr in self._episode_buf:
            self.log.append(ExperienceRecord(t_, self.episode, self.condition, tr))
        self._episode_buf = []

    def _close_episode(self):
        self._flush_episode()
        self._episode_buf = []

    # -- DQN-On pre-filling -----------------------------------------------
    def prefill(self, transitions: Iterable[Transition], train_steps: int = 0) -> None:
        """Seed replay with earlier experience and optionally train on it."""
        for t in transitions:
            self.dqn.observe(t)
        for _ in range(train_steps):
            self.dqn.train_step(self.rng)

    def freeze(self, epsilon: Optional[float] = None, seed: int = 0) -> "FalconAgent":
        """A frozen copy serving the current policy (no learning, no detection).

        ``epsilon`` defaults to the exploration rate the agent uses right now.
        """
        eps = self.epsilon if epsilon is None else epsilon
        cfg = replace(self.cfg, frozen=True, detect_changes=False, adapt=False,
                      online_training=False, log_experience=False, epsilon=eps)
        return FalconAgent(self.n_paths, cfg, self.bank, np.random.default_rng(seed),
                           self.policy.copy(), self.binning, self.reward_cfg, self.name)

    def offline_tick(self, rng: np.random.Generator,
                     cfg: Optional[MetaConfig] = None) -> Dict[int, int]:
        """Run the offline loop once on this agent's log (the harness calls this)."""
        done = offline_loop_tick(self.bank, self.log, rng, cfg, self.binning)
        self.log.compact()
        return done
