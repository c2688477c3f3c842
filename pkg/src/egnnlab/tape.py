"""Reverse-mode differentiation over the model's primitive ops.

A :class:`Tape` records each primitive as it runs.  ``backward`` walks the
record in reverse, releasing every tensor once its producer has been
processed.  ``backward_checkpointed`` keeps only segment-boundary tensors
during the forward and re-runs each segment right before differentiating
it; recomputation calls the same kernels in the same order, so gradients are
bitwise identical to the plain path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels as K
from .egnn import (
    Consts,
    ModelOutput,
    build_heads,
    build_layer,
    build_loss,
    build_prelude,
)
from .errors import ConfigError


class Op(NamedTuple):
    kind: str
    inputs: tuple
    output: int
    attrs: object
    region: str | None


class GradBuffer:
    """Flat float64 parameter gradient; reports first touch of each tensor."""

    def __init__(self, model, ledger=None):
        self.model = model
        self.flat = np.zeros(model.n_params)
        self.ledger = ledger
        self.touched = set()

    def add(self, name, value):
        sl = self.model.slice_of(name)
        if name not in self.touched:
            self.touched.add(name)
            if self.ledger is not None:
                self.ledger.alloc("gradients", self.ledger.nbytes(sl.stop - sl.start))
        self.flat[sl] += value.reshape(-1)

    def release(self):
        if self.ledger is not None:
            for name in self.touched:
                sl = self.model.slice_of(name)
                self.ledger.free("gradients", self.ledger.nbytes(sl.stop - sl.start))
        self.touched.clear()


class Tape:
    def __init__(self, model, dtype=np.float64, ledger=None):
        self.model = model
        self.dtype = np.dtype(dtype)
        self.ledger = ledger
        self.values: list = []
        self.shapes: list = []
        self.requires: list = []
        self.accounted: list = []
        self.kinds: list = []  # "param" | "const" | "boundary" | "op"
        self.param_of: dict = {}
        self._params: dict = {}
        self.ops: list[Op] = []
        self._region = None
        self.loss = None
        self.outputs = None

    # --- tensor bookkeeping ---------------------------------------------------

    def _new(self, value, requires, kind, account):
        tid = len(self.values)
        self.values.append(value)
        self.shapes.append(tuple(value.shape))
        self.requires.append(bool(requires))
        self.kinds.append(kind)
        self.accounted.append(bool(account) and self.ledger is not None)
        if self.accounted[tid]:
            self.ledger.alloc("activations", self.ledger.nbytes(value.size), region=self._region)
        return tid

    def _drop(self, tid):
        if self.values[tid] is None:
            return
        if self.accounted[tid]:
            self.ledger.free("activations", self.ledger.nbytes(self.values[tid].size), region=self._region)
        self.values[tid] = None

    def value(self, tid):
        return self.values[tid]

    def region(self, name):
        self._region = name
        if self.ledger is not None:
            self.ledger.region = name

    def param(self, name):
        if name not in self._params:
            value = self.model.tensor(name).astype(self.dtype, copy=False)
            tid = self._new(value, True, "param", account=False)
            self.param_of[tid] = name
            self._params[name] = tid
        return self._params[name]

    def const(self, value, account=True):
        return self._new(np.asarray(value, dtype=self.dtype), False, "const", account)

    def boundary(self, value, requires=True):
        """Leaf standing in for a tensor owned by another tape."""
        return self._new(value, requires, "boundary", account=False)

    def _op(self, kind, inputs, value, attrs=None):
        requires = any(self.requires[i] for i in inputs)
        tid = self._new(value, requires, "op", account=True)
        self.ops.append(Op(kind, tuple(inputs), tid, attrs, self._region))
        return tid

    # --- primitives -----------------------------------------------------------

    def linear(self, x, w, b):
        v = self.values
        return self._op("linear", (x, w, b), K.linear(v[x], v[w], v[b]))

    def silu(self, x):
        return self._op("silu", (x,), K.silu(self.values[x]))

    def gather(self, x, seg):
        return self._op("gather", (x,), K.gather(self.values[x], seg), seg)

    def segment_sum(self, x, seg):
        return self._op("segment_sum", (x,), K.segment_sum(self.values[x], seg), seg)

    def concat(self, xs):
        return self._op("concat", tuple(xs), K.concat([self.values[x] for x in xs]))

    def add(self, a, b):
        return self._op("add", (a, b), self.values[a] + self.values[b])

    def sub(self, a, b):
        return self._op("sub", (a, b), self.values[a] - self.values[b])

    def mul(self, a, b):
        return self._op("mul", (a, b), self.values[a] * self.values[b])

    def square(self, x):
        return self._op("square", (x,), self.values[x] * self.values[x])

    def scale(self, x, c):
        return self._op("scale", (x,), self.values[x] * c, c)

    def sqnorm(self, x):
        return self._op("sqnorm", (x,), K.sqnorm(self.values[x]))

    def mean(self, x):
        return self._op("mean", (x,), K.mean(self.values[x]))

    # --- whole-tape utilities -------------------------------------------------

    def replay(self) -> list:
        """Re-execute every op from the leaf values; returns the value list."""
        vals = [v if k != "op" else None for v, k in zip(self.values, self.kinds)]
        for op in self.ops:
            ins = [vals[i] for i in op.inputs]
            vals[op.output] = _EVAL[op.kind](ins, op.attrs)
        return vals

    def release(self, keep=()):
        """Drop every accounted value except ``keep`` (ownership passes to the caller)."""
        keep = set(keep)
        for tid in range(len(self.values)):
            if tid in keep:
                self.accounted[tid] = False
            else:
                self._drop(tid)

    def op_counts(self) -> dict:
        counts = {}
        for op in self.ops:
            counts[op.kind] = counts.get(op.kind, 0) + 1
        return counts

    def dump(self) -> str:
        """JSON op list with shapes and memory categories."""
        tensors = [
            {
                "id": t,
                "kind": self.kinds[t],
                "shape": list(self.shapes[t]),
                "category": "weights" if self.kinds[t] == "param" else "activations",
                "param": self.param_of.get(t),
            }
            for t in range(len(self.shapes))
        ]
        ops = [
            {"op": op.kind, "inputs": list(op.inputs), "output": op.output, "region": op.region}
            for op in self.ops
        ]
        return json.dumps({"tensors": tensors, "ops": ops, "loss": self.loss})


def _eval_scale(ins, c):
    return ins[0] * c


_EVAL = {
    "linear": lambda ins, a: K.linear(*ins),
    "silu": lambda ins, a: K.silu(ins[0]),
    "gather": lambda ins, a: K.gather(ins[0], a),
    "segment_sum": lambda ins, a: K.segment_sum(ins[0], a),
    "concat": lambda ins, a: K.concat(ins),
    "add": lambda ins, a: ins[0] + ins[1],
    "sub": lambda ins, a: ins[0] - ins[1],
    "mul": lambda ins, a: ins[0] * ins[1],
    "square": lambda ins, a: ins[0] * ins[0],
    "scale": _eval_scale,
    "sqnorm": lambda ins, a: K.sqnorm(ins[0]),
    "mean": lambda ins, a: K.mean(ins[0]),
}


def _vjp(op: Op, vals, gy, needs):
    """Adjoints of ``op``'s inputs given the output adjoint ``gy``."""
    ins = [vals[i] for i in op.inputs]
    k = op.kind
    if k == "linear":
        x, w, _ = ins
        return [gy @ w.T if needs[0] else None, x.T @ gy, gy.sum(axis=0)]
    if k == "silu":
        return [K.silu_grad(ins[0], gy)]
    if k == "gather":
        return [op.attrs.sum(gy)]
    if k == "segment_sum":
        return [gy[op.attrs.index]]
    if k == "concat":
        cuts = np.cumsum([x.shape[1] for x in ins])[:-1]
        return np.split(gy, cuts, axis=1)
    if k == "add":
        return [K.unbroadcast(gy, ins[0].shape), K.unbroadcast(gy, ins[1].shape)]
    if k == "sub":
        return [K.unbroadcast(gy, ins[0].shape), K.unbroadcast(-gy, ins[1].shape)]
    if k == "mul":
        a, b = ins
        return [K.unbroadcast(gy * b, a.shape), K.unbroadcast(gy * a, b.shape)]
    if k == "square":
        return [2.0 * ins[0] * gy]
    if k == "scale":
        return [gy * op.attrs]
    if k == "sqnorm":
        return [2.0 * ins[0] * gy]
    if k == "mean":
        x = ins[0]
        return [np.full(x.shape, gy / x.size, dtype=x.dtype)]
    raise ValueError(f"no adjoint rule for {k!r}")


def run_backward(tape: Tape, seeds: dict, grads: GradBuffer) -> dict:
    """Propagate ``seeds`` (tensor id -> adjoint) to parameters and boundary leaves.

    Parameter adjoints go into ``grads``; the returned dict holds adjoints of
    boundary leaves.  Values are released as soon as their producer is done.
    """
    ledger = tape.ledger
    adj = {}
    adj_size = {}

    def put(tid, g):
        if tid in adj:
            adj[tid] = adj[tid] + g
        else:
            adj[tid] = g
            adj_size[tid] = g.size
            if ledger is not None:
                ledger.alloc("workspace", ledger.nbytes(g.size), region=tape._region)

    def pop(tid):
        g = adj.pop(tid, None)
        if g is not None and ledger is not None:
            ledger.free("workspace", ledger.nbytes(adj_size[tid]), region=tape._region)
        return g

    for tid, g in seeds.items():
        put(tid, np.asarray(g, dtype=tape.dtype).reshape(tape.shapes[tid]))
    for op in reversed(tape.ops):
        tape.region(op.region)
        gy = adj.get(op.output)
        if gy is not None:
            needs = [tape.requires[i] for i in op.inputs]
            if any(needs):
                for i, g in zip(op.inputs, _vjp(op, tape.values, gy, needs)):
                    if not tape.requires[i]:
                        continue
                    if tape.kinds[i] == "param":
                        grads.add(tape.param_of[i], g)
                    else:
                        put(i, g)
            pop(op.output)
        tape._drop(op.output)
    out = {}
    for tid in list(adj):
        if tape.kinds[tid] == "boundary":
            out[tid] = adj[tid]
        pop(tid)
    return out


# --- EGNN recording ---------------------------------------------------------------


@dataclass(frozen=True)
class CheckpointPlan:
    n_layers: int
    segment_size: int

    def __post_init__(self):
        if self.segment_size < 1 or self.n_layers < 1:
            raise ConfigError("segment_size and n_layers must be >= 1")

    @property
    def segments(self) -> list[tuple[int, int]]:
        k, L = self.segment_size, self.n_layers
        return [(s, min(s + k, L)) for s in range(0, L, k)]

    def modeled_mark(self, boundary: float, per_layer: float) -> float:
        """Live high-water mark of a chain whose layers each keep ``per_layer``
        activations and pass ``boundary`` to the next: every stored segment
        input plus one recomputed segment."""
        return len(self.segments) * boundary + self.segment_size * per_layer

    @classmethod
    def default(cls, n_layers: int) -> "CheckpointPlan":
        return cls(n_layers, math.ceil(math.sqrt(n_layers)))


def _set_phase(ledger, phase):
    if ledger is not None:
        ledger.set_phase(phase)


def forward_recorded(model, batch, force_weight=1.0, dtype=np.float64, ledger=None):
    """Record the full forward + loss; returns (ModelOutput, Tape)."""
    tape = Tape(model, dtype, ledger)
    c, h, g = build_prelude(tape, model, batch)
    for l in range(model.config.depth):
        h, g = build_layer(tape, model, l, h, g, c)
    energy, forces = build_heads(tape, model, batch, h, g, c)
    total, e_term, f_term = build_loss(tape, batch, energy, forces, force_weight)
    tape.loss = total
    tape.outputs = (energy, forces, e_term, f_term)
    out = ModelOutput(tape.value(energy)[:, 0].copy(), tape.value(forces).copy())
    return out, tape


def _loss_values(tape):
    _, _, e, f = tape.outputs
    return float(tape.value(tape.loss)), float(tape.value(e)), float(tape.value(f))


def backward(tape: Tape, loss_seed: float = 1.0, grads: GradBuffer | None = None) -> np.ndarray:
    """Plain reverse pass from the recorded loss; returns the flat gradient."""
    grads = grads or GradBuffer(tape.model, tape.ledger)
    run_backward(tape, {tape.loss: loss_seed}, grads)
    tape.release()
    return grads.flat


def _import_consts(tape: Tape, src: Tape, c: Consts) -> Consts:
    def imp(h):
        return None if h is None else tape.const(src.value(h), account=False)

    return c._replace(rel=imp(c.rel), a=imp(c.a), one=imp(c.one))


def _run_segment(model, batch_consts, src_tape, seg, in_values, in_requires, dtype, ledger):
    tape = Tape(model, dtype, ledger)
    c = _import_consts(tape, src_tape, batch_consts)
    h = tape.boundary(in_values[0], in_requires[0])
    g = tape.boundary(in_values[1], in_requires[1])
    ins = (h, g)
    for l in range(*seg):
        h, g = build_layer(tape, model, l, h, g, c)
    return tape, ins, (h, g)


def value_and_grad(model, batch, force_weight=1.0, plan: CheckpointPlan | None = None,
                   dtype=np.float64, ledger=None, grads: GradBuffer | None = None):
    """Loss terms (total, energy, force) and flat gradient for one batch.

    With a plan of more than one segment the backward is checkpointed; a
    single-segment plan is the plain pass.
    """
    grads = grads or GradBuffer(model, ledger)
    if plan is None or len(plan.segments) == 1:
        _set_phase(ledger, "forward")
        _, tape = forward_recorded(model, batch, force_weight, dtype, ledger)
        terms = _loss_values(tape)
        _set_phase(ledger, "backward")
        backward(tape, 1.0, grads)
        return terms, grads.flat
    if plan.n_layers != model.config.depth:
        raise ConfigError("checkpoint plan depth does not match the model")

    _set_phase(ledger, "forward")
    pre = Tape(model, dtype, ledger)
    c, h, g = build_prelude(pre, model, batch)
    state = (pre.value(h), pre.value(g))
    requires = (True, False)
    stored = []  # per segment: (input values, input requires, bytes owned)
    for seg in plan.segments:
        tape, _, outs = _run_segment(model, c, pre, seg, state, requires, dtype, ledger)
        stored.append((state, requires))
        state = tuple(tape.value(t) for t in outs)
        requires = tuple(tape.requires[t] for t in outs)
        tape.release(keep=outs)
    owned = [sum(v.size for v in ins) for ins, _ in stored[1:]] + [sum(v.size for v in state)]

    post = Tape(model, dtype, ledger)
    hb, gb = post.boundary(state[0], requires[0]), post.boundary(state[1], requires[1])
    energy, forces = build_heads(post, model, batch, hb, gb, _import_consts(post, pre, c))
    total, e_term, f_term = build_loss(post, batch, energy, forces, force_weight)
    post.loss, post.outputs = total, (energy, forces, e_term, f_term)
    terms = _loss_values(post)

    _set_phase(ledger, "backward")
    out_adj = run_backward(post, {total: 1.0}, grads)
    post.release()
    seeds = (out_adj.get(hb), out_adj.get(gb))
    for s in reversed(range(len(plan.segments))):
        if ledger is not None:
            ledger.free("activations", ledger.nbytes(owned[s]))
        ins_vals, ins_req = stored[s]
        tape, ins, outs = _run_segment(model, c, pre, plan.segments[s], ins_vals, ins_req, dtype, ledger)
        seed_map = {t: a for t, a in zip(outs, seeds) if a is not None}
        in_adj = run_backward(tape, seed_map, grads)
        tape.release()
        seeds = tuple(in_adj.get(t) for t in ins)
    run_backward(pre, {h: seeds[0]}, grads)
    pre.release()
    return terms, grads.flat


def backward_checkpointed(model, batch, plan: CheckpointPlan, force_weight=1.0,
                          dtype=np.float64, ledger=None) -> np.ndarray:
    return value_and_grad(model, batch, force_weight, plan, dtype, ledger)[1]


def fd_gradient(model, batch, loss_fn, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(model, batch)`` w.r.t. ``model.theta``."""
    if not h > 0:
        raise ConfigError("step h must be positive")
    theta = model.theta
    grad = np.empty(len(theta))
    for i in range(len(theta)):
        orig = theta[i]
        theta[i] = orig + h
        up = loss_fn(model, batch)
        theta[i] = orig - h
        down = loss_fn(model, batch)
        theta[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


def gradient_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max elementwise relative error; the denominator never drops below
    ``floor`` times the largest analytic entry, which keeps entries sitting at
    the finite-difference round-off level from dominating."""
    a, f = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = floor * np.max(np.abs(a)) if a.size else 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), scale)
    denom[denom == 0] = 1.0
    return float(np.max(np.abs(a - f) / denom))
