"""E(n)-equivariant message passing with an energy head and a force head.

Layer ``l`` (coordinates are never moved)::

    a_ij  = |x_i - x_j|^2
    m_ij  = phi_e(h_i, h_j, a_ij, 1)
    h_i  <- phi_h(h_i, sum_j m_ij) + h_i
    g_ij <- g_ij + phi_x(m_ij)            (equivariant vector channel)

The final layer also adds ``phi_f(m_ij)`` to the edge gate.  Outputs::

    E_graph = head(sum_{i in graph} h_i)
    F_i     = sum_j (x_i - x_j) * g_ij
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InputError
from .kernels import Eager
from .rng import STREAM_INIT, stream

CHECKPOINT_MAGIC = b"EGNNLAB\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EgnnConfig:
    depth: int
    width: int
    n_species: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.n_species < 1:
            raise ConfigError("depth, width and n_species must be >= 1")


def _mlp(prefix, n_in, n_hidden, n_out):
    return [
        (f"{prefix}.w1", (n_in, n_hidden)),
        (f"{prefix}.b1", (n_hidden,)),
        (f"{prefix}.w2", (n_hidden, n_out)),
        (f"{prefix}.b2", (n_out,)),
    ]


def param_shapes(config: EgnnConfig) -> list[tuple[str, tuple]]:
    """Every parameter tensor in storage order."""
    W, S = config.width, config.n_species
    shapes = [("embed.w", (S, W)), ("embed.b", (W,))]
    for l in range(config.depth):
        shapes += _mlp(f"layer{l}.edge", 2 * W + 2, W, W)
        shapes += _mlp(f"layer{l}.coord", W, W, 1)
        shapes += _mlp(f"layer{l}.node", 2 * W, W, W)
    shapes += _mlp("energy", W, W, 1)
    shapes += _mlp("force", W, W, 1)
    return shapes


def count_params(config: EgnnConfig) -> int:
    W, S, L = config.width, config.n_species, config.depth
    layer = ((2 * W + 2) * W + W) + (W * W + W) + (W * W + W) + (W + 1) + (2 * W * W + W) + (W * W + W)
    heads = 2 * (W * W + W + W + 1)
    return S * W + W + L * layer + heads


class EgnnModel:
    """Parameters live in one flat float64 vector; ``tensor(name)`` is a view."""

    def __init__(self, config: EgnnConfig, theta: np.ndarray | None = None):
        self.config = config
        self.layout = {}
        offset = 0
        for name, shape in param_shapes(config):
            size = int(np.prod(shape))
            self.layout[name] = (offset, shape)
            offset += size
        self.n_params = offset
        if theta is None:
            theta = np.zeros(offset)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (offset,):
            raise InputError(f"expected {offset} parameters, got {theta.shape}")
        self.theta = theta

    def tensor(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.theta[offset : offset + int(np.prod(shape))].reshape(shape)

    def slice_of(self, name: str) -> slice:
        offset, shape = self.layout[name]
        return slice(offset, offset + int(np.prod(shape)))

    def copy(self) -> "EgnnModel":
        return EgnnModel(self.config, self.theta.copy())


def init_model(config: EgnnConfig) -> EgnnModel:
    model = EgnnModel(config)
    rng = stream(config.seed, STREAM_INIT)
    for name, shape in param_shapes(config):
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            model.tensor(name)[...] = (2.0 * rng.random(shape) - 1.0) * bound
    return model


class ModelOutput(NamedTuple):
    energies: np.ndarray
    forces: np.ndarray


class Consts(NamedTuple):
    rel: object
    a: object
    one: object
    by_src: object
    by_dst: object
    n_nodes: int
    n_edges: int


def _mlp_apply(ops, x, prefix, act_out=False):
    z = ops.silu(ops.linear(x, ops.param(f"{prefix}.w1"), ops.param(f"{prefix}.b1")))
    y = ops.linear(z, ops.param(f"{prefix}.w2"), ops.param(f"{prefix}.b2"))
    return ops.silu(y) if act_out else y


def build_prelude(ops, model, batch):
    """Geometry constants and the species embedding; returns (consts, h, g)."""
    ops.region("prelude")
    by_src, by_dst = batch.by_src(), batch.by_dst()
    n, e = batch.n_nodes, batch.n_edges
    if e:
        x = ops.const(batch.coords)
        rel = ops.sub(ops.gather(x, by_src), ops.gather(x, by_dst))
        a = ops.sqnorm(rel)
        one = ops.const(np.ones((e, 1)))
    else:
        rel = a = one = None
    onehot = np.zeros((n, model.config.n_species))
    onehot[np.arange(n), batch.species] = 1.0
    h = ops.linear(ops.const(onehot), ops.param("embed.w"), ops.param("embed.b"))
    g = ops.const(np.zeros((e, 1)))
    return Consts(rel, a, one, by_src, by_dst, n, e), h, g


def build_layer(ops, model, l, h, g, c: Consts):
    ops.region(f"layer{l}")
    W = model.config.width
    if c.n_edges == 0:
        agg = ops.const(np.zeros((c.n_nodes, W)))
    else:
        hi = ops.gather(h, c.by_src)
        hj = ops.gather(h, c.by_dst)
        m = _mlp_apply(ops, ops.concat([hi, hj, c.a, c.one]), f"layer{l}.edge", act_out=True)
        agg = ops.segment_sum(m, c.by_src)
    h_new = ops.add(_mlp_apply(ops, ops.concat([h, agg]), f"layer{l}.node"), h)
    if c.n_edges:
        g = ops.add(g, _mlp_apply(ops, m, f"layer{l}.coord"))
        if l == model.config.depth - 1:
            g = ops.add(g, _mlp_apply(ops, m, "force"))
    return h_new, g


def build_heads(ops, model, batch, h, g, c: Consts):
    ops.region("heads")
    pooled = ops.segment_sum(h, batch.by_graph())
    energy = _mlp_apply(ops, pooled, "energy")
    if c.n_edges:
        forces = ops.segment_sum(ops.mul(c.rel, g), c.by_src)
    else:
        forces = ops.const(np.zeros((c.n_nodes, 3)))
    return energy, forces


def build_loss(ops, batch, energy, forces, force_weight):
    """Returns handles (total, energy_term, force_term)."""
    ops.region("loss")
    de = ops.sub(energy, ops.const(batch.energies[:, None]))
    per_atom = ops.mul(de, ops.const(1.0 / batch.n_atoms[:, None]))
    e_term = ops.mean(ops.square(per_atom))
    f_term = ops.mean(ops.square(ops.sub(forces, ops.const(batch.forces))))
    total = ops.add(e_term, ops.scale(f_term, float(force_weight)))
    return total, e_term, f_term


def build_forward(ops, model, batch):
    c, h, g = build_prelude(ops, model, batch)
    for l in range(model.config.depth):
        h, g = build_layer(ops, model, l, h, g, c)
    return build_heads(ops, model, batch, h, g, c)


def forward(model: EgnnModel, batch, dtype=np.float64) -> ModelOutput:
    ops = Eager(model, dtype)
    energy, forces = build_forward(ops, model, batch)
    return ModelOutput(energy[:, 0], forces)


def loss_terms(output: ModelOutput, batch, force_weight: float = 1.0, dtype=np.float64):
    ops = Eager(None, dtype)
    energy = np.asarray(output.energies, dtype=dtype)[:, None]
    total, e, f = build_loss(ops, batch, energy, np.asarray(output.forces, dtype=dtype), force_weight)
    return float(total), float(e), float(f)


def loss(output: ModelOutput, batch, force_weight: float = 1.0) -> float:
    """Mean squared per-atom energy error + weight * mean squared force component error."""
    if force_weight < 0:
        raise ConfigError("force_weight must be >= 0")
    return loss_terms(output, batch, force_weight)[0]


# --- checkpoint files --------------------------------------------------------


def save_model(model: EgnnModel, path) -> None:
    payload = model.theta.astype("<f8").tobytes()
    header = json.dumps(
        {
            "config": asdict(model.config),
            "n_params": model.n_params,
            "sha256": hashlib.sha256(payload).hexdigest(),
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def load_model(path) -> EgnnModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise InputError("not a model checkpoint")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + hlen])
    payload = blob[16 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise InputError("checkpoint checksum mismatch")
    config = EgnnConfig(**header["config"])
    return EgnnModel(config, np.frombuffer(payload, dtype="<f8").copy())
