"""Adam, ZeRO stage-1 partitioning and simulated data-parallel workers.

Workers run sequentially in one process with barrier-separated phases
(compute, reduce, update, gather).  The only shared buffer is the gradient
reduction, which always folds workers in order 0..N-1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .egnn import EgnnModel
from .errors import ConfigError, ConsistencyError, ProtocolError
from .memprof import MemoryLedger
from .tape import CheckpointPlan, GradBuffer, value_and_grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, ledger: MemoryLedger | None = None):
    """One in-place Adam update of ``params`` (a view) from ``grads``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ProtocolError("parameter, gradient and state lengths differ")
    n = len(params)
    ws = ledger.nbytes(n) if ledger is not None and n else 0
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t

    if ws:
        ledger.alloc("workspace", ws)
    tmp = (1.0 - state.beta1) * grads
    state.m *= state.beta1
    state.m += tmp
    tmp = grads * grads
    tmp *= 1.0 - state.beta2
    state.v *= state.beta2
    state.v += tmp
    del tmp

    # second buffer: bias-corrected moments live together
    if ws:
        ledger.alloc("workspace", ws)
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    np.sqrt(v_hat, out=v_hat)
    v_hat += state.eps
    m_hat *= state.lr
    m_hat /= v_hat
    params -= m_hat
    if ws:
        ledger.free("workspace", 2 * ws)


@dataclass(frozen=True)
class ShardPlan:
    n_shards: int
    ranges: tuple

    def sizes(self):
        return [b - a for a, b in self.ranges]

    def slice(self, k) -> slice:
        return slice(*self.ranges[k])


def partition_params(P: int, N: int) -> ShardPlan:
    """Contiguous ranges; the first ``P % N`` shards get one extra element."""
    if N < 1 or P < N:
        raise ConfigError(f"cannot split {P} parameters over {N} shards")
    base, extra = divmod(P, N)
    ranges, start = [], 0
    for k in range(N):
        size = base + (1 if k < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ShardPlan(N, tuple(ranges))


def all_reduce_sum(vectors) -> list[np.ndarray]:
    """Left fold in worker order; every worker gets its own identical copy."""
    if len(vectors) == 0:
        raise ProtocolError("no vectors to reduce")
    n = len(vectors[0])
    if any(len(v) != n for v in vectors):
        raise ProtocolError("all-reduce inputs have different lengths")
    acc = np.array(vectors[0], dtype=np.float64, copy=True)
    for v in vectors[1:]:
        acc += v
    return [acc.copy() for _ in vectors]


def checksum(vec: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(vec).tobytes(), digest_size=16).hexdigest()


@dataclass
class Worker:
    theta: np.ndarray
    adam: AdamState
    owned: slice
    ledger: MemoryLedger | None = None


@dataclass
class WorkerGroup:
    config: object
    workers: list
    shards: ShardPlan
    zero1: bool
    history: list = field(default_factory=list)
    # boolean mask over theta; masked entries get a zero gradient
    frozen: np.ndarray | None = None

    @property
    def n_workers(self) -> int:
        return len(self.workers)

    @property
    def n_params(self) -> int:
        return len(self.workers[0].theta)

    def model(self, k=0) -> EgnnModel:
        return EgnnModel(self.config, self.workers[k].theta)

    def optimizer_elements(self, k) -> int:
        return 2 * len(self.workers[k].adam.m)

    def close(self):
        """End of run: release optimizer state (weights stay resident)."""
        for w in self.workers:
            if w.ledger is not None:
                w.ledger.set_phase("teardown")
                w.ledger.free("optimizer", w.ledger.nbytes(2 * len(w.adam.m)))


def make_group(model: EgnnModel, n_workers: int, zero1: bool, lr=1e-3, beta1=0.9, beta2=0.999,
               eps=1e-8, track_memory: bool = False) -> WorkerGroup:
    P = model.n_params
    shards = partition_params(P, n_workers)
    workers = []
    for k in range(n_workers):
        owned = shards.slice(k) if zero1 else slice(0, P)
        size = owned.stop - owned.start
        ledger = MemoryLedger() if track_memory else None
        if ledger is not None:
            ledger.alloc("weights", ledger.nbytes(P))
            ledger.alloc("optimizer", ledger.nbytes(2 * size))
        adam = AdamState.zeros(size, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        workers.append(Worker(model.theta.copy(), adam, owned, ledger))
    return WorkerGroup(model.config, workers, shards, zero1)


def data_parallel_step(group: WorkerGroup, batches, mode: str | None = None, force_weight=1.0,
                       plan: CheckpointPlan | None = None, dtype=np.float64) -> WorkerGroup:
    """One synchronous step: per-worker gradients, all-reduce, Adam, all-gather.

    ``mode`` is "replicated" or "zero1" and must agree with how the group's
    optimizer state was laid out.  Per-worker loss terms are appended to
    ``group.history``.
    """
    if mode is not None and (mode == "zero1") != group.zero1:
        raise ConfigError(f"group was built for zero1={group.zero1}, step asked for {mode}")
    N = group.n_workers
    if len(batches) != N:
        raise ProtocolError(f"{len(batches)} batches for {N} workers")
    _check_replicas(group)

    grads, terms = [], []
    for w, batch in zip(group.workers, batches):
        buf = GradBuffer(EgnnModel(group.config, w.theta), w.ledger)
        t, _ = value_and_grad(EgnnModel(group.config, w.theta), batch, force_weight, plan,
                              dtype, w.ledger, buf)
        grads.append(buf)
        terms.append(t)

    for w in group.workers:
        if w.ledger is not None:
            w.ledger.set_phase("update")
            w.ledger.region = "all_reduce"
            w.ledger.alloc("workspace", w.ledger.nbytes(group.n_params))
    delivered = all_reduce_sum([g.flat for g in grads])
    for w, buf, total in zip(group.workers, grads, delivered):
        buf.flat[...] = total / N
        if group.frozen is not None:
            buf.flat[group.frozen] = 0.0
        if w.ledger is not None:
            w.ledger.free("workspace", w.ledger.nbytes(group.n_params))
            w.ledger.region = "adam"
        adam_step(w.adam, w.theta[w.owned], buf.flat[w.owned], w.ledger)

    if group.zero1:
        for k, w in enumerate(group.workers):
            for s, other in enumerate(group.workers):
                if s != k:
                    sl = group.shards.slice(s)
                    w.theta[sl] = other.theta[sl]
    for buf in grads:
        buf.release()
    _check_replicas(group)
    group.history.append(terms)
    return group


def _check_replicas(group: WorkerGroup):
    sums = {checksum(w.theta) for w in group.workers}
    if len(sums) != 1:
        raise ConsistencyError(f"{len(sums)} distinct replicas across {group.n_workers} workers")
