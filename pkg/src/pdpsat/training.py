"""Unsupervised energy-minimisation training of the neural PDP solver."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import grad as G
from .engine import RunConfig, init_messages, run
from .formula import FactorGraph, build_factor_graph, concat_batch, harden
from .generators import CaStreamConfig, UniformConfig, stream
from .neural import NeuralPdpModel, init_model, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


# -- scalar reference forms ---------------------------------------------------

def literal_value(x: float, e: int) -> float:
    return x if e == 1 else 1.0 - x


def smooth_max(values, tau: float) -> float:
    """Softmax-weighted average of ``values`` at temperature ``tau``."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("smooth_max of an empty list")
    if tau <= 0:
        raise ValueError("tau must be positive")
    w = np.exp((v - v.max()) / tau)
    return float((w * v).sum() / w.sum())


def sharpen(x: float, kappa: float) -> float:
    a = x ** kappa
    b = (1.0 - x) ** kappa
    return float(a / (a + b))


@dataclass(frozen=True)
class LossConfig:
    tau: float = 2.0
    kappa: float = 10.0
    discount: float = 0.9
    epsilon_floor: float = 1e-20
    # log Z is constant in the model outputs and dropped
    log_partition_offset: float = 0.0

    def __post_init__(self):
        if self.tau <= 0 or self.kappa <= 1 or not 0 < self.discount <= 1:
            raise ValueError("need tau > 0, kappa > 1, 0 < discount <= 1")


def clause_proxy(soft, signs, config: LossConfig) -> float:
    lits = [literal_value(x, e) for x, e in zip(soft, signs)]
    return sharpen(smooth_max(lits, config.tau), config.kappa)


# -- tape forms over a whole factor graph ------------------------------------

def clause_proxies(soft, graph: FactorGraph, config: LossConfig) -> G.Node:
    """Smooth disjunction value per clause, shape (M, 1)."""
    soft = G.as_node(soft)
    if soft.value.ndim == 1:
        soft = G.Node(soft.value[:, None]) if soft.tape is None else soft
    x = G.gather(soft, graph.var_segments)
    sign = graph.edge_sign[:, None]
    lit = G.mask(x, sign) + (1.0 - sign) / 2.0
    # per-clause shift keeps exp() bounded; it cancels in the ratio
    shift = np.full(graph.num_clauses, -np.inf)
    np.maximum.at(shift, graph.edge_clause, lit.value[:, 0])
    w = G.exp(G.scale(lit - shift[graph.edge_clause, None], 1.0 / config.tau))
    num = G.segment_sum(w * lit, graph.clause_segments)
    den = G.segment_sum(w, graph.clause_segments)
    s = num / den
    a = G.power(s, config.kappa)
    b = G.power(1.0 - s, config.kappa)
    return a / (a + b)


def energy(soft, graph: FactorGraph, config: LossConfig) -> G.Node:
    """Sum over clauses of -log(max(proxy, floor)), plus the log Z offset."""
    if graph.num_clauses == 0:
        return G.Node(np.array(config.log_partition_offset))
    proxy = G.clamp_min(clause_proxies(soft, graph, config), config.epsilon_floor)
    return config.log_partition_offset - G.total(G.log(proxy))


def instance_energies(soft, graph: FactorGraph, config: LossConfig) -> np.ndarray:
    """Energy of every instance of a batched graph (values only)."""
    proxy = np.maximum(clause_proxies(G.Node(np.asarray(G.as_node(soft).value)), graph, config).value[:, 0],
                       config.epsilon_floor)
    return np.bincount(graph.clause_instance, weights=-np.log(np.maximum(proxy, G.LOG_FLOOR)),
                       minlength=graph.num_instances)


def discounted_loss(trajectory: list, graph: FactorGraph, config: LossConfig) -> G.Node:
    if not trajectory:
        raise ValueError("empty trajectory")
    T = len(trajectory)
    loss = None
    for t, soft in enumerate(trajectory, 1):
        term = G.scale(energy(soft, graph, config), config.discount ** (T - t))
        loss = term if loss is None else loss + term
    return loss


# -- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    h: int = 32
    t_max: int = 30
    batch_size: int = 8
    steps: int = 5000
    learning_rate: float = 1e-4
    clip_norm: float = 0.65
    weight_decay: float = 1e-10
    dropout: float = 0.2
    kappa: float = 10.0
    discount: float = 0.9
    epsilon_floor: float = 1e-20
    tau_start: float = 2.0
    tau_end: float = 0.05
    anneal_fraction: float = 0.8
    ema_decay: float = 0.98
    checkpoint_every: int = 500
    seed: int = 0
    generator: str = "uniform"
    n_min: int = 4
    n_max: int = 30
    k_min: int = 3
    k_max: int = 3
    alpha_min: float = 2.0
    alpha_max: float = 4.0
    communities_min: int = 6
    communities_max: int = 6
    q_min: float = 0.7
    q_max: float = 0.7

    def loss_config(self, tau: float | None = None) -> LossConfig:
        return LossConfig(tau=self.tau_start if tau is None else tau, kappa=self.kappa,
                          discount=self.discount, epsilon_floor=self.epsilon_floor)

    def stream_config(self):
        common = dict(n_range=(self.n_min, self.n_max), k_range=(self.k_min, self.k_max),
                      alpha_range=(self.alpha_min, self.alpha_max))
        if self.generator == "uniform":
            return UniformConfig(**common)
        if self.generator == "ca":
            return CaStreamConfig(**common, c_range=(self.communities_min, self.communities_max),
                                  q_range=(self.q_min, self.q_max))
        raise ValueError(f"unknown generator {self.generator!r}")


def parse_train_config(text: str) -> TrainConfig:
    """Strict ``key = value`` parsing; '#' starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in kwargs:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        typ = types[key]
        try:
            kwargs[key] = {"int": int, "float": float, "str": str}[typ](value)
        except ValueError:
            raise ValueError(f"line {lineno}: bad {typ} value {value!r} for {key}") from None
    return TrainConfig(**kwargs)


def format_train_config(config: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in dataclasses.fields(config))


# -- optimisation -------------------------------------------------------------

@dataclass
class TemperatureSchedule:
    tau_start: float
    tau_end: float
    rate: float
    step: int = 0

    @classmethod
    def for_steps(cls, tau_start: float, tau_end: float, steps: int, fraction: float = 0.8):
        horizon = max(1.0, fraction * steps)
        return cls(tau_start, tau_end, (tau_end / tau_start) ** (1.0 / horizon))

    @property
    def tau(self) -> float:
        return max(self.tau_end, self.tau_start * self.rate ** self.step)

    def advance(self):
        self.step += 1


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    clip_norm: float = 0.65
    weight_decay: float = 1e-10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Clip by global norm, then one Adam step in place. Returns the pre-clip norm."""
        grads = {k: g + self.weight_decay * params[k] for k, g in grads.items()}
        norm = clip_gradients(grads, self.clip_norm)
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.step)
            vhat = v / (1 - b2 ** self.step)
            params[k] -= self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)
        return norm


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


@dataclass
class TrainReport:
    step: int
    loss: float
    ema: float
    tau: float
    solved_frac: float
    seconds: float


REPORT_FIELDS = ["step", "loss", "ema", "tau", "solved_frac", "seconds"]


def _forward(model: NeuralPdpModel, graph: FactorGraph, t_max: int, seed: int, tape, dropout: bool):
    rng = np.random.default_rng([seed, 2]) if dropout else None
    runtime = model.bind(tape, rng)
    state = init_messages(graph, model.h, seed)
    return run(graph, runtime, RunConfig(t_max=t_max, seed=seed, mode="train"), state=state)


def loss_and_grads(model, graph, config: TrainConfig, seed: int, tau: float | None = None,
                   dropout: bool = True):
    tape = G.Tape()
    try:
        result = _forward(model, graph, config.t_max, seed, tape, dropout)
        loss = discounted_loss(result.trajectory, graph, config.loss_config(tau))
        grads = G.backward(loss)
    finally:
        tape.release()
    return float(loss.value), grads, result.trajectory


def loss_value(model, graph, config: TrainConfig, seed: int, tau: float | None = None) -> float:
    result = _forward(model, graph, config.t_max, seed, None, False)
    return float(discounted_loss(result.trajectory, graph, config.loss_config(tau)).value)


def _solved_fraction(trajectory, graph: FactorGraph) -> float:
    solved = np.zeros(graph.num_instances, dtype=bool)
    for soft in trajectory:
        solved |= graph.unsat_counts(harden(G.as_node(soft).value)) == 0
    return float(solved.mean())


def train_step(model: NeuralPdpModel, graph: FactorGraph, opt: OptimizerState, config: TrainConfig,
               schedule: TemperatureSchedule, seed: int) -> TrainReport | None:
    """Forward T steps on a tape, backprop the discounted energy, Adam update.

    A non-finite loss or gradient rejects the step (returns None) and leaves
    the model, optimizer and schedule untouched.
    """
    t0 = time.perf_counter()
    try:
        loss, grads, trajectory = loss_and_grads(model, graph, config, seed, schedule.tau,
                                                 dropout=model.dropout_rate > 0)
    except FloatingPointError as exc:
        log.warning("step rejected: %s", exc)
        return None
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("step rejected: non-finite loss or gradient")
        return None
    opt.update(model.params, grads)
    tau = schedule.tau
    schedule.advance()
    return TrainReport(opt.step, loss, loss, tau, _solved_fraction(trajectory, graph),
                       time.perf_counter() - t0)


def _batches(formulas: Iterator, batch_size: int) -> Iterator[FactorGraph]:
    while True:
        yield concat_batch([build_factor_graph(f) for f in itertools.islice(formulas, batch_size)])


def save_training_checkpoint(path, model, opt: OptimizerState, schedule: TemperatureSchedule,
                             ema: float | None, config: TrainConfig, batch_index: int | None = None):
    extra = {f"adam.m.{k}": v for k, v in opt.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in opt.v.items()})
    meta = {"step": opt.step, "batch_index": opt.step if batch_index is None else batch_index,
            "tau": schedule.tau, "schedule_step": schedule.step,
            "schedule_rate": schedule.rate, "ema": ema, "config": dataclasses.asdict(config)}
    save_checkpoint(model, path, meta, extra)


def train_stream(config: TrainConfig, out_dir=None, model: NeuralPdpModel | None = None,
                 resume_from=None, stop_at: int | None = None) -> tuple[NeuralPdpModel, list[TrainReport]]:
    """Train on a freshly generated stream, checkpointing every k steps.

    Batch ``b`` always holds stream instances ``[b*B, (b+1)*B)`` and uses
    seed ``(config.seed, b)``, so resuming from a checkpoint replays the
    exact same continuation. A rejected (non-finite) batch is skipped, so
    the batch index can run ahead of the step counter.
    """
    opt = OptimizerState(config.learning_rate, config.clip_norm, config.weight_decay)
    schedule = TemperatureSchedule.for_steps(config.tau_start, config.tau_end, config.steps,
                                             config.anneal_fraction)
    ema = None
    batch_index = 0
    if resume_from is not None:
        from .neural import load_checkpoint
        model = load_checkpoint(resume_from)
        _, meta, sections = read_checkpoint(resume_from)
        opt.step = int(meta["step"])
        schedule.step = int(meta["schedule_step"])
        ema = meta.get("ema")
        batch_index = int(meta.get("batch_index", opt.step))
        for name, arr in sections.items():
            if name.startswith("adam.m."):
                opt.m[name[7:]] = arr
            elif name.startswith("adam.v."):
                opt.v[name[7:]] = arr
    elif model is None:
        model = init_model(config.h, seed=config.seed, dropout_rate=config.dropout)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "train_report.csv"
        fresh = resume_from is None or not report_path.exists()
        if not fresh:
            _truncate_report(report_path, opt.step)
        fh = open(report_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(REPORT_FIELDS)

    formulas = stream(config.stream_config(), config.seed, start=batch_index * config.batch_size)
    batches = _batches(formulas, config.batch_size)
    reports = []
    last = config.steps if stop_at is None else min(stop_at, config.steps)
    try:
        while opt.step < last:
            graph = next(batches)
            step_seed = int(np.random.SeedSequence([config.seed, batch_index]).generate_state(1)[0])
            batch_index += 1
            rep = train_step(model, graph, opt, config, schedule, step_seed)
            if rep is None:
                log.warning("batch %d rejected: non-finite loss or gradient", batch_index - 1)
                continue
            ema = rep.loss if ema is None else config.ema_decay * ema + (1 - config.ema_decay) * rep.loss
            rep.ema = ema
            reports.append(rep)
            if writer is not None:
                writer.writerow([rep.step, f"{rep.loss:.6f}", f"{rep.ema:.6f}", f"{rep.tau:.6f}",
                                 f"{rep.solved_frac:.4f}", f"{rep.seconds:.4f}"])
                if rep.step % config.checkpoint_every == 0 or rep.step == last:
                    fh.flush()
                    for name in (f"ckpt_{rep.step:06d}.pdp", "latest.pdp"):
                        save_training_checkpoint(out / name, model, opt, schedule, ema, config, batch_index)
            if rep.step % 100 == 0:
                log.info("step %d loss %.4f ema %.4f tau %.3f solved %.2f", rep.step, rep.loss, ema,
                         rep.tau, rep.solved_frac)
    finally:
        if writer is not None:
            fh.close()
    return model, reports


def _truncate_report(path: Path, step: int):
    rows = list(csv.reader(open(path, newline="")))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)
