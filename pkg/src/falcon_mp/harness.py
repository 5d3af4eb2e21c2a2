"""Experiment runner: bulk transfers, relative scores, convergence, stress
and parameter sweeps.

All randomness is derived from one integer seed through ``numpy`` seed
sequences keyed by (purpose, repetition, path), so any experiment can be
replayed bit for bit from its manifest.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .netsim import Link, PathModel, PathTrace, Simulator, preset_trace
from .sched_rules import Scheduler
from .transport import Connection, StallError, TransportConfig

log = logging.getLogger(__name__)

DESK_SCALE = 0.1
TRANSFER_SIZE = 2_000_000
REPETITIONS = 120


@dataclass(frozen=True)
class Scenario:
    name: str
    traces: Tuple[PathTrace, ...]

    @property
    def n_paths(self) -> int:
        return len(self.traces)

    @classmethod
    def preset(cls, names: Sequence[str], scale: float = DESK_SCALE) -> "Scenario":
        traces = tuple(preset_trace(n).scaled(bandwidth=scale) for n in names)
        return cls("+".join(names), traces)

    def scaled(self, name: Optional[str] = None, **factors) -> "Scenario":
        return Scenario(name or self.name, tuple(t.scaled(**factors) for t in self.traces))

    def models_at(self, t: float) -> List[PathModel]:
        from .netsim import model_at
        return [model_at(tr, min(t, tr.duration)) for tr in self.traces]


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, keys)])


def run_transfer(scheduler: Scheduler, scenario: Scenario, seed: Sequence[int],
                 size: int = TRANSFER_SIZE, t_start: float = 0.0,
                 transport: Optional[TransportConfig] = None) -> float:
    """One transfer on fresh transport state; returns the download time in seconds."""
    sim = Simulator()
    sim.clock.now = t_start
    links = [Link(tr, np.random.default_rng([*seed, i]), i)
             for i, tr in enumerate(scenario.traces)]
    conn = Connection(sim, links, scheduler, transport)
    return conn.transfer(size)


class RepetitionError(RuntimeError):
    def __init__(self, rep: int, exc: BaseException):
        super().__init__(f"repetition {rep}: {exc}")
        self.rep = rep


@dataclass
class RunResult:
    times: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.size and not np.all(self.times > 0):
            raise ValueError("download times must be positive")

    @property
    def median(self) -> float:
        return float(np.median(self.times))

    @property
    def mean(self) -> float:
        return float(np.mean(self.times))

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.times, q))

    def cdf(self) -> Tuple[np.ndarray, np.ndarray]:
        x = np.sort(self.times)
        return x, np.arange(1, len(x) + 1) / len(x)


def relative_score(test: RunResult, reference: RunResult) -> float:
    """median(reference) / median(test); the reference is a same-scenario DQN-Off."""
    if not len(test.times) or not len(reference.times):
        raise ValueError("relative score needs non-empty results")
    mt = test.median
    if mt == 0.0:
        raise ZeroDivisionError("test median is zero")
    return reference.median / mt


def run_bulk(scheduler: Scheduler, scenario: Scenario, repetitions: int = REPETITIONS,
             seed: int = 0, size: int = TRANSFER_SIZE,
             transport: Optional[TransportConfig] = None, label: str = "",
             t_upd: Optional[int] = None) -> RunResult:
    """Sequential repetitions with fresh transport state and derived seeds.

    The scheduler object persists across repetitions, so learning schedulers
    keep what they learned.  A FALCON scheduler (not FALCON-N) gets an
    offline meta-update every ``t_upd`` repetitions and, by default, once at
    the end of the run.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    times = []
    for rep in range(repetitions):
        try:
            times.append(run_transfer(scheduler, scenario, (seed, 1, rep), size,
                                      transport=transport))
        except StallError as exc:
            raise RepetitionError(rep, exc) from exc
        if t_upd and (rep + 1) % t_upd == 0 and rep + 1 < repetitions:
            _offline(scheduler, seed, rep)
    _offline(scheduler, seed, repetitions)
    return RunResult(np.array(times), label or getattr(scheduler, "name", ""))


def _offline(scheduler, seed, tick):
    if getattr(scheduler, "name", "") == "falcon" and hasattr(scheduler, "offline_tick"):
        scheduler.offline_tick(rng_for(seed, 2, tick))


# -- condition envelope -----------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    """Per-path parameter ranges; stress conditions are drawn uniformly inside."""

    bandwidth: Tuple[float, float] = (30e6, 1100e6)
    rtt_mean: Tuple[float, float] = (20.0, 29.2)
    rtt_dev: Tuple[float, float] = (4.8, 10.0)
    loss_rate: Tuple[float, float] = (0.001, 0.007)

    @classmethod
    def from_presets(cls, names: Sequence[str] = ("5g", "4g", "wlan")) -> "Envelope":
        ms = [preset_trace(n).segments[0][1] for n in names]

        def span(attr):
            vals = [getattr(m, attr) for m in ms]
            return (min(vals), max(vals))

        return cls(span("bandwidth"), span("rtt_mean"), span("rtt_dev"), span("loss_rate"))

    def sample(self, rng: np.random.Generator, scale: float = DESK_SCALE) -> PathModel:
        u = rng.random(4)

        def pick(lo_hi, x):
            return lo_hi[0] + (lo_hi[1] - lo_hi[0]) * x

        return PathModel(pick(self.bandwidth, u[0]) * scale, pick(self.rtt_mean, u[1]),
                         pick(self.rtt_dev, u[2]), pick(self.loss_rate, u[3]))

    def contains(self, m: PathModel, scale: float = DESK_SCALE) -> bool:
        eps = 1e-9
        return (self.bandwidth[0] * scale * (1 - eps) <= m.bandwidth
                <= self.bandwidth[1] * scale * (1 + eps)
                and self.rtt_mean[0] - eps <= m.rtt_mean <= self.rtt_mean[1] + eps
                and self.rtt_dev[0] - eps <= m.rtt_dev <= self.rtt_dev[1] + eps
                and self.loss_rate[0] - eps <= m.loss_rate <= self.loss_rate[1] + eps)


TABLE_ENVELOPE = Envelope()


def sample_conditions(n: int, seed: int, n_paths: int = 2, envelope: Envelope = TABLE_ENVELOPE,
                      scale: float = DESK_SCALE) -> List[Tuple[PathModel, ...]]:
    rng = rng_for(seed, 7)
    return [tuple(envelope.sample(rng, scale) for _ in range(n_paths)) for _ in range(n)]


def static_scenario(models: Sequence[PathModel], name: str = "sampled") -> Scenario:
    return Scenario(name, tuple(PathTrace.constant(m) for m in models))


def cycling_scenario(conditions: Sequence[Sequence[PathModel]], interval: float,
                     cycles: int = 1, name: str = "cycle") -> Scenario:
    """Switch every path to the next condition every ``interval`` seconds."""
    if interval <= 0:
        raise ValueError("interval must be > 0")
    n_paths = len(conditions[0])
    segs: List[list] = [[] for _ in range(n_paths)]
    k = 0
    for _ in range(cycles):
        for cond in conditions:
            for i in range(n_paths):
                segs[i].append((k * interval, cond[i]))
            k += 1
    return Scenario(name, tuple(PathTrace(tuple(s)) for s in segs))


# -- learning schedulers ----------------------------------------------------

def _falcon_mod():
    from . import falcon
    return falcon


def train_dqn_off(scenario: Scenario, seed: int, transfers: int = 60, train_every: int = 1,
                  epsilon: float = 0.1, size: int = TRANSFER_SIZE, back_to_back: bool = False):
    """Offline-train a DQN on ``scenario`` and return its policy net.

    With ``back_to_back`` the transfers follow each other on the scenario's
    clock (for time-varying scenarios); otherwise each starts at t=0.
    """
    f = _falcon_mod()
    agent = f.FalconAgent(scenario.n_paths, f.dqn_on_config(train_every=train_every,
                                                             eps_s=epsilon),
                          rng=rng_for(seed, 11))
    t = 0.0
    for i in range(transfers):
        start = t if back_to_back else 0.0
        if back_to_back and start >= _horizon(scenario):
            start = t = 0.0
        t = start + run_transfer(agent, scenario, (seed, 12, i), size, t_start=start)
    return agent.policy.copy()


def _horizon(scenario: Scenario) -> float:
    last = max(tr.segments[-1][0] for tr in scenario.traces)
    return last if last > 0 else math.inf


def dqn_off(policy, n_paths: int, seed: int = 0):
    f = _falcon_mod()
    return f.FalconAgent(n_paths, f.dqn_off_config(), rng=rng_for(seed, 13), policy=policy,
                         name="dqn-off")


def train_pooled(seed: int, transfers: int = 120, n_paths: int = 2,
                 envelope: Envelope = TABLE_ENVELOPE, scale: float = DESK_SCALE,
                 train_every: int = 1, size: int = TRANSFER_SIZE):
    """One DQN trained online across freshly sampled envelope conditions."""
    f = _falcon_mod()
    agent = f.FalconAgent(n_paths, f.dqn_on_config(train_every=train_every),
                          rng=rng_for(seed, 25))
    cond_rng = rng_for(seed, 26)
    for i in range(transfers):
        models = tuple(envelope.sample(cond_rng, scale) for _ in range(n_paths))
        run_transfer(agent, static_scenario(models), (seed, 27, i), size)
    return agent.policy.copy()


def bootstrap_bank(seed: int, rounds: int = 60, per_round: int = 4, iterations: int = 200,
                   n_paths: int = 2, envelope: Envelope = TABLE_ENVELOPE,
                   scale: float = DESK_SCALE, bank=None, binning=None,
                   pooled_transfers: int = 120, size: int = TRANSFER_SIZE):
    """Build a meta-model bank from simulated prior experience.

    A pooled DQN is first trained across the whole envelope; every bucket
    starts from it the first time it receives experience.  Then each round
    runs ``per_round`` transfers of one FALCON agent on freshly sampled
    static conditions and calls the offline loop once.
    """
    f = _falcon_mod()
    binning = binning or f.DEFAULT_BINNING
    cfg = f.falcon_config()
    sizes = (2 * 2 * n_paths, *cfg.hidden, n_paths)
    bank = bank if bank is not None else f.MetaBank(sizes, binning.n_buckets, k=cfg.k)
    pooled = (train_pooled(seed, pooled_transfers, n_paths, envelope, scale, size=size)
              if pooled_transfers > 0 else None)
    agent = f.FalconAgent(n_paths, cfg, bank, rng_for(seed, 21), binning=binning)
    meta_rng = rng_for(seed, 22)
    cond_rng = rng_for(seed, 23)
    mcfg = f.MetaConfig(iterations=iterations)
    for r in range(rounds):
        for j in range(per_round):
            models = tuple(envelope.sample(cond_rng, scale) for _ in range(n_paths))
            run_transfer(agent, static_scenario(models), (seed, 24, r, j), size)
        if pooled is not None:
            for rec in agent.log.records[agent.log.consumed:]:
                idx = binning.index(rec.condition)
                if not bank.trained(idx):
                    bank.put(idx, pooled.theta, 0, bank.epoch)
        agent.offline_tick(meta_rng, mcfg)
        log.debug("bootstrap round %d: %d trained buckets", r, len(bank))
    return bank


SCHEDULERS = ("minrtt", "blest", "rr", "bandit", "falcon", "falcon-n", "dqn-on", "dqn-off")
CONVERGENCE_LEARNERS = ("falcon", "falcon-n", "bandit", "dqn-on(z)", "dqn-on(n)", "dqn-on(w)",
                        "dqn-off")


def make_scheduler(name: str, n_paths: int = 2, seed: int = 0, bank=None, policy=None,
                   **params) -> Scheduler:
    """Scheduler by name: minrtt, blest, rr, falcon, falcon-n, dqn-on, dqn-off, bandit."""
    from .bandit import LinUcbScheduler
    from .sched_rules import BlestScheduler, MinRttScheduler, RoundRobinScheduler
    f = _falcon_mod()
    key = name.lower()
    if key == "minrtt":
        return MinRttScheduler()
    if key == "blest":
        return BlestScheduler(params.get("delta", 1.0))
    if key == "rr":
        return RoundRobinScheduler()
    if key == "bandit":
        return LinUcbScheduler(n_paths, params.get("alpha", 1.0))
    if key in ("falcon", "falcon-n"):
        return f.FalconAgent(n_paths, f.falcon_config(**params),
                             bank.copy() if bank is not None else None, rng_for(seed, 31),
                             name=key)
    if key == "dqn-on":
        return f.FalconAgent(n_paths, f.dqn_on_config(**params), rng=rng_for(seed, 32),
                             policy=policy, name="dqn-on")
    if key == "dqn-off":
        if policy is None:
            raise ValueError("dqn-off needs a trained policy")
        return dqn_off(policy, n_paths, seed)
    raise ValueError(f"unknown scheduler {name!r}")


def freeze(scheduler: Scheduler, seed: int = 0) -> Scheduler:
    """Non-learning copy of a scheduler's current policy (rule-based: itself)."""
    fz = getattr(scheduler, "freeze", None)
    return fz(seed=seed) if fz is not None else scheduler


# -- convergence --------------------------------------------------------------

CHECKPOINTS = tuple(2 ** k for k in range(6, 17))


@dataclass
class ConvergenceCurve:
    label: str
    checkpoints: Tuple[int, ...]
    scores: np.ndarray        # runs x checkpoints

    def median_curve(self) -> np.ndarray:
        return np.median(self.scores, axis=0)

    def packets_to(self, level: float = 0.9) -> float:
        """First checkpoint whose median score reaches ``level`` (inf if none)."""
        for c, s in zip(self.checkpoints, self.median_curve()):
            if s >= level:
                return float(c)
        return math.inf


def prepare_dqn_on(kind: str, scenario: Scenario, seed: int, budget: int = 100,
                   pretrain_epochs: int = 16, **params):
    """DQN-On with zero (Z), narrow (N) or wide (W) buffered experience.

    N: conditions with RTT variation and loss scaled by 0.97 and 1.03; W adds
    0.94 and 1.06.  Each contributes ``budget`` packets of online experience,
    which stays in replay and is trained on for ``pretrain_epochs`` passes.
    """
    kind = kind.upper()
    factors = {"Z": (), "N": (0.97, 1.03), "W": (0.94, 0.97, 1.03, 1.06)}[kind]
    agent = make_scheduler("dqn-on", scenario.n_paths, seed, **params)
    agent.name = f"dqn-on({kind.lower()})"
    size = budget * 1250
    for j, fac in enumerate(factors):
        sc = scenario.scaled(rtt_dev=fac, loss_rate=fac)
        run_transfer(agent, sc, (seed, 41, j), size)
    n = len(agent.dqn.replay)
    if n:
        steps = pretrain_epochs * n // agent.cfg.batch
        agent.prefill([], train_steps=steps)
    agent.sent = 0
    return agent


def run_convergence(factory: Callable[[int], Scheduler], scenario: Scenario,
                    reference: RunResult, runs: int = 10, seed: int = 0,
                    checkpoints: Sequence[int] = CHECKPOINTS, eval_reps: int = 9,
                    stop_level: Optional[float] = None, label: str = "",
                    size: int = TRANSFER_SIZE) -> ConvergenceCurve:
    """Relative score of frozen snapshots taken after N online packets.

    ``factory(run)`` builds a fresh learner.  With ``stop_level`` a run stops
    once a checkpoint reaches that score; later checkpoints copy the last score.
    """
    checkpoints = tuple(checkpoints)
    scores = np.zeros((runs, len(checkpoints)))
    for run in range(runs):
        agent = factory(run)
        snaps: Dict[int, Scheduler] = {}
        wanted = set(checkpoints)

        def hook(n, agent=agent, snaps=snaps):
            if n in wanted:
                snaps[n] = freeze(agent, seed=n)

        agent.sent_hook = hook
        base = getattr(agent, "sent", 0)
        if base:
            raise ValueError("learner must start with zero sent packets")
        i = 0
        k = 0
        while k < len(checkpoints):
            while checkpoints[k] not in snaps:
                run_transfer(agent, scenario, (seed, 51, run, i), size)
                i += 1
            snap = snaps.pop(checkpoints[k])
            res = run_bulk(snap, scenario, eval_reps, seed=seed * 1000 + 52, size=size)
            scores[run, k] = relative_score(res, reference)
            k += 1
            if stop_level is not None and scores[run, k - 1] >= stop_level:
                scores[run, k:] = scores[run, k - 1]
                break
        agent.sent_hook = None
    return ConvergenceCurve(label, checkpoints, scores)


# -- stress -------------------------------------------------------------------

@dataclass
class StressResult:
    interval: float
    score: float
    per_condition: Dict[int, float]
    transfers: int


def back_to_back(scheduler: Scheduler, scenario: Scenario, horizon: float, seed: int,
                 size: int = TRANSFER_SIZE) -> List[Tuple[float, float]]:
    """Transfers one after another until ``horizon``; (start, duration) pairs."""
    out = []
    t = 0.0
    i = 0
    while t < horizon:
        d = run_transfer(scheduler, scenario, (seed, 61, i), size, t_start=t)
        out.append((t, d))
        t += d
        i += 1
    return out


def _by_condition(runs, interval, n_cond):
    groups: Dict[int, List[float]] = {}
    for start, d in runs:
        groups.setdefault(int(start // interval) % n_cond, []).append(d)
    return groups


def run_stress(factory: Callable[[], Scheduler],
               reference_factory: Callable[[Scenario], Scheduler],
               intervals: Sequence[float], conditions: Sequence[Sequence[PathModel]],
               seed: int = 0, min_horizon: float = 60.0, size: int = TRANSFER_SIZE,
               ) -> List[StressResult]:
    """Score per change interval, averaged over the condition segments.

    Both the learner and the reference run transfers back to back on the same
    cycling trace with the same seeds; ``reference_factory`` receives that
    trace so the reference can be trained on it.  Transfers are grouped by the
    condition active when they started, and the per-condition median ratios
    are averaged.
    """
    out = []
    n = len(conditions)
    for interval in intervals:
        if interval <= 0:
            raise ValueError("intervals must be > 0")
        cycles = max(1, math.ceil(min_horizon / (interval * n)))
        sc = cycling_scenario(conditions, interval, cycles + 1, f"cycle{interval}")
        horizon = cycles * n * interval
        test = _by_condition(back_to_back(factory(), sc, horizon, seed, size), interval, n)
        ref = _by_condition(back_to_back(reference_factory(sc), sc, horizon, seed, size),
                            interval, n)
        per = {c: float(np.median(ref[c]) / np.median(test[c]))
               for c in sorted(test) if c in ref}
        out.append(StressResult(interval, float(np.mean(list(per.values()))), per,
                                sum(len(v) for v in test.values())))
    return out


# -- parameter sweeps ---------------------------------------------------------

def run_param_sweep(axis: str, values: Optional[Sequence[int]] = None, seed: int = 0,
                    trials: int = 20) -> Dict[int, float]:
    """K sweep (score per K) or sub-range sweep (plateau-onset K per count).

    Both run on the synthetic task family in :mod:`falcon_mp.toy`, where the
    optimal policy is known, so the score is the adapted greedy reward
    relative to the optimum.
    """
    from . import toy
    if axis == "k":
        ks = tuple(values) if values else toy.K_GRID
        if min(ks) < 0:
            raise ValueError("K values must be >= 0")
        scores = toy.k_sweep(trials, seed, ks)
        return {k: float(v) for k, v in zip(ks, scores)}
    if axis == "subranges":
        counts = tuple(values) if values else (1, 2, 4, 8)
        if min(counts) < 1:
            raise ValueError("sub-range counts must be >= 1")
        return {n: float(k) for n, k in toy.subrange_sweep(counts, trials, seed).items()}
    raise ValueError(f"unknown sweep axis {axis!r}")


# -- configuration, output and replay -------------------------------------------

@dataclass
class ExperimentConfig:
    scenario: Tuple[str, ...] = ("4g", "wlan")   # preset names or trace files
    scheduler: str = "minrtt"
    params: Dict[str, float] = field(default_factory=dict)
    repetitions: int = REPETITIONS
    transfer_size: int = TRANSFER_SIZE
    seed: int = 0
    scale: float = DESK_SCALE
    out: Optional[str] = None
    bank: Optional[str] = None                   # bank file for falcon / falcon-n
    reference: bool = False                      # also score against DQN-Off
    dqn_off_transfers: int = 60
    bootstrap_rounds: int = 40
    t_upd: int = 0                               # 0: offline update at end of run

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.transfer_size <= 0:
            raise ValueError("transfer_size must be > 0")
        if not self.scenario:
            raise ValueError("scenario needs at least one path")
        self.scenario = tuple(self.scenario)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["scenario"] = list(self.scenario)
        d["params"] = dict(self.params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


_INT_KEYS = {"repetitions", "transfer_size", "seed", "dqn_off_transfers", "bootstrap_rounds",
             "t_upd"}


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``param.<name>`` keys go to scheduler params.

    ``#`` starts a comment.  ``scenario`` is a comma-separated list of preset
    names or trace file paths.
    """
    import configparser
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ValueError(f"config syntax: {exc}") from exc
    d: dict = {"params": {}}
    for key, raw in cp["experiment"].items():
        val = raw.strip()
        try:
            if key.startswith("param."):
                d["params"][key[6:]] = float(val)
            elif key == "scenario":
                d[key] = tuple(v.strip() for v in val.split(",") if v.strip())
            elif key in _INT_KEYS:
                d[key] = int(val)
            elif key == "scale":
                d[key] = float(val)
            elif key == "reference":
                d[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                d[key] = val
        except ValueError as exc:
            raise ValueError(f"config key {key}: {exc}") from exc
    return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    from pathlib import Path
    return parse_config(Path(path).read_text())


def build_scenario(names: Sequence[str], scale: float = DESK_SCALE) -> Scenario:
    from pathlib import Path
    from .netsim import PRESETS, read_trace
    traces = []
    for n in names:
        if n in PRESETS:
            traces.append(preset_trace(n).scaled(bandwidth=scale))
        else:
            traces.append(read_trace(Path(n)))
    return Scenario("+".join(Path(n).stem if n not in PRESETS else n for n in names),
                    tuple(traces))


def _package_version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:  # not installed, e.g. running from a checkout
        return "0+unknown"


def run_experiment(cfg: ExperimentConfig) -> Tuple[RunResult, Optional[float]]:
    """Bulk experiment for one config; the score is None unless requested."""
    from .falcon import load_bank
    sc = build_scenario(cfg.scenario, cfg.scale)
    name = cfg.scheduler.lower()
    bank = policy = None
    if name in ("falcon", "falcon-n"):
        bank = (load_bank(cfg.bank) if cfg.bank else
                bootstrap_bank(cfg.seed, cfg.bootstrap_rounds, n_paths=sc.n_paths,
                               scale=cfg.scale, size=cfg.transfer_size))
    needs_ref = cfg.reference or name == "dqn-off"
    if needs_ref:
        policy = train_dqn_off(sc, cfg.seed, cfg.dqn_off_transfers, size=cfg.transfer_size)
    sched = make_scheduler(name, sc.n_paths, cfg.seed, bank=bank, policy=policy,
                           **cfg.params)
    res = run_bulk(sched, sc, cfg.repetitions, cfg.seed, cfg.transfer_size, label=name,
                   t_upd=cfg.t_upd or None)
    score = None
    if cfg.reference:
        ref = run_bulk(dqn_off(policy, sc.n_paths, cfg.seed), sc, cfg.repetitions, cfg.seed,
                       cfg.transfer_size, label="dqn-off")
        score = relative_score(res, ref)
    return res, score


def result_tables(result: RunResult, score: Optional[float] = None) -> Dict[str, str]:
    """CSV text of the per-repetition table (plus summary row) and the CDF."""
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["repetition", "download_time_s"])
    for i, t in enumerate(result.times):
        w.writerow([i, repr(float(t))])
    summary = ["summary", f"median={result.median!r};mean={result.mean!r};"
               f"p10={result.percentile(10)!r};p90={result.percentile(90)!r}"]
    if score is not None:
        summary[1] += f";relative_score={score!r}"
    w.writerow(summary)
    cdf = io.StringIO()
    w = csv.writer(cdf, lineterminator="\n")
    w.writerow(["download_time_s", "cdf"])
    for x, y in zip(*result.cdf()):
        w.writerow([repr(float(x)), repr(float(y))])
    return {"results.csv": buf.getvalue(), "cdf.csv": cdf.getvalue()}


def emit_results(result: RunResult, out_dir, cfg: Optional[ExperimentConfig] = None,
                 score: Optional[float] = None) -> Dict[str, str]:
    """Write the result tables and a run manifest; returns name -> path."""
    import json
    from pathlib import Path
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = {}
        for name, text in result_tables(result, score).items():
            (out / name).write_text(text)
            written[name] = str(out / name)
        manifest = {"tool": "falcon_mp", "version": _package_version(),
                    "label": result.label,
                    "config": cfg.to_dict() if cfg is not None else None}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        written["manifest.json"] = str(out / "manifest.json")
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return written


def replay(manifest_path) -> Dict[str, str]:
    """Re-run the experiment recorded in a manifest; returns the fresh tables."""
    import json
    from pathlib import Path
    manifest = json.loads(Path(manifest_path).read_text())
    if not manifest.get("config"):
        raise ValueError("manifest has no config to replay")
    cfg = ExperimentConfig.from_dict(manifest["config"])
    res, score = run_experiment(cfg)
    res.label = manifest.get("label", res.label)
    return result_tables(res, score)
