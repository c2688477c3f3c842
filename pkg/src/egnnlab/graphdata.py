"""Atomistic graphs, the Lennard-Jones label oracle and dataset plumbing."""

from __future__ import annotations

import hashlib
import json
import math
import shlex
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    ConfigError,
    ExtxyzError,
    GenerationError,
    InputError,
    SingularConfigurationError,
)
from .rng import STREAM_SPLIT, STREAM_STRUCTURE, stream

DATASET_FORMAT = "egnnlab.dataset"
DATASET_VERSION = 1
DEFAULT_SYMBOLS = ("H", "C", "N", "O")
MAX_ATTEMPTS_PER_ATOM = 10_000


@dataclass(eq=False)
class AtomicStructure:
    species: np.ndarray
    coords: np.ndarray
    energy: float
    forces: np.ndarray
    has_forces: bool = True

    def __post_init__(self):
        self.species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
        self.energy = float(self.energy)
        n = len(self.species)
        if n < 1:
            raise InputError("a structure needs at least one atom")
        if self.coords.shape != (n, 3) or self.forces.shape != (n, 3):
            raise InputError("species, coords and forces must have equal length")
        if not np.all(np.isfinite(self.coords)):
            raise InputError("non-finite coordinate")
        if not math.isfinite(self.energy):
            raise InputError("non-finite energy")

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    def equals(self, other: "AtomicStructure", atol: float = 0.0) -> bool:
        return (
            np.array_equal(self.species, other.species)
            and self.has_forces == other.has_forces
            and np.allclose(self.coords, other.coords, rtol=0, atol=atol)
            and np.allclose(self.forces, other.forces, rtol=0, atol=atol)
            and abs(self.energy - other.energy) <= atol
        )


@dataclass(eq=False)
class AtomicGraph:
    structure: AtomicStructure
    edges: np.ndarray
    cutoff: float

    @property
    def n_nodes(self) -> int:
        return self.structure.n_atoms

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class DatasetSummary:
    n_nodes: int
    n_edges: int
    n_graphs: int
    size_bytes: int


class SegmentIndex:
    """Sum rows of an (m, k) array into ``n`` buckets given by ``index``.

    Backed by a CSR incidence matrix whose rows list entries in ascending
    position, so each bucket accumulates in a fixed order (bit-reproducible).
    """

    def __init__(self, index: np.ndarray, n: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.n = int(n)
        self._mats: dict = {}

    def _matrix(self, dtype) -> sp.csr_matrix:
        dtype = np.dtype(dtype)
        mat = self._mats.get(dtype)
        if mat is None:
            m = len(self.index)
            mat = sp.csr_matrix(
                (np.ones(m, dtype=dtype), (self.index, np.arange(m))),
                shape=(self.n, m),
            )
            mat.sort_indices()
            self._mats[dtype] = mat
        return mat

    def sum(self, values: np.ndarray) -> np.ndarray:
        if len(self.index) == 0:
            return np.zeros((self.n,) + values.shape[1:], dtype=values.dtype)
        return np.asarray(self._matrix(values.dtype) @ values)


@dataclass(eq=False)
class GraphBatch:
    species: np.ndarray
    coords: np.ndarray
    forces: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_id: np.ndarray
    energies: np.ndarray
    n_atoms: np.ndarray
    n_graphs: int
    _segments: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.species)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def by_src(self) -> SegmentIndex:
        return self._segment("src", self.src, self.n_nodes)

    def by_dst(self) -> SegmentIndex:
        return self._segment("dst", self.dst, self.n_nodes)

    def by_graph(self) -> SegmentIndex:
        return self._segment("graph", self.graph_id, self.n_graphs)

    def _segment(self, key, index, n) -> SegmentIndex:
        if key not in self._segments:
            self._segments[key] = SegmentIndex(index, n)
        return self._segments[key]


def _as_coords(coords) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(arr) < 1:
        raise InputError("at least one atom required")
    if not np.all(np.isfinite(arr)):
        raise InputError("non-finite coordinate")
    return arr


def build_radius_graph(coords, cutoff: float) -> np.ndarray:
    """All ordered pairs (i, j), i != j, with |x_i - x_j| <= cutoff.

    Returns an (E, 2) int array sorted by (src, dst).
    """
    if not cutoff > 0:
        raise InputError("cutoff must be positive")
    x = _as_coords(coords)
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    mask = dist <= cutoff
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return np.stack([src, dst], axis=1).astype(np.int64)


def lj_oracle(coords, epsilon: float = 1.0, sigma: float = 1.0):
    """Lennard-Jones energy and analytic forces for a finite cluster."""
    x = _as_coords(coords)
    n = len(x)
    forces = np.zeros_like(x)
    if n < 2:
        return 0.0, forces
    i, j = np.triu_indices(n, k=1)
    rvec = x[i] - x[j]
    r2 = np.einsum("ij,ij->i", rvec, rvec)
    if np.any(r2 == 0.0):
        k = int(np.argmax(r2 == 0.0))
        raise SingularConfigurationError(f"atoms {i[k]} and {j[k]} coincide")
    sr6 = (sigma * sigma / r2) ** 3
    sr12 = sr6 * sr6
    energy = float(np.sum(4.0 * epsilon * (sr12 - sr6)))
    # -dE/dr / r, so that f_ij = coef * (x_i - x_j) is the force on i from j
    coef = 24.0 * epsilon * (2.0 * sr12 - sr6) / r2
    fij = coef[:, None] * rvec
    np.add.at(forces, i, fij)
    np.add.at(forces, j, -fij)
    return energy, forces


def make_graph(structure: AtomicStructure, cutoff: float) -> AtomicGraph:
    return AtomicGraph(structure, build_radius_graph(structure.coords, cutoff), float(cutoff))


def generate_synthetic_dataset(
    n_structures: int,
    atoms_min: int,
    atoms_max: int,
    box_size: float,
    min_separation: float | None = None,
    cutoff: float | None = None,
    epsilon: float = 1.0,
    sigma: float = 1.0,
    seed: int = 0,
    n_species: int = 1,
) -> list[AtomicGraph]:
    """LJ-labelled random clusters; structure ``k`` uses stream ``(seed, k)``."""
    if min_separation is None:
        min_separation = 0.85 * sigma
    if cutoff is None:
        cutoff = 2.5 * sigma
    if n_structures < 0:
        raise ConfigError("n_structures must be >= 0")
    if not 1 <= atoms_min <= atoms_max:
        raise ConfigError("need 1 <= atoms_min <= atoms_max")
    if not min_separation > 0 or not box_size > 0:
        raise ConfigError("min_separation and box_size must be positive")
    graphs = []
    for k in range(n_structures):
        rng = stream(seed, STREAM_STRUCTURE + k)
        n = int(rng.integers(atoms_min, atoms_max + 1))
        coords = _place_atoms(rng, n, box_size, min_separation, k)
        species = rng.integers(0, n_species, size=n) if n_species > 1 else np.zeros(n, np.int64)
        energy, forces = lj_oracle(coords, epsilon, sigma)
        graphs.append(make_graph(AtomicStructure(species, coords, energy, forces), cutoff))
    return graphs


def _place_atoms(rng, n, box_size, min_sep, index) -> np.ndarray:
    coords = np.empty((n, 3))
    min_sep2 = min_sep * min_sep
    for a in range(n):
        for _ in range(MAX_ATTEMPTS_PER_ATOM):
            p = rng.random(3) * box_size
            d = coords[:a] - p
            if a == 0 or np.min(np.einsum("ij,ij->i", d, d)) >= min_sep2:
                coords[a] = p
                break
        else:
            raise GenerationError(
                f"structure {index}: could not place atom {a} after "
                f"{MAX_ATTEMPTS_PER_ATOM} attempts"
            )
    return coords


# --- extended XYZ ------------------------------------------------------------


def _parse_comment(line: str, lineno: int) -> dict:
    info = {}
    try:
        tokens = shlex.split(line)
    except ValueError as exc:
        raise ExtxyzError(f"bad comment line: {exc}", lineno) from None
    for tok in tokens:
        if "=" not in tok:
            raise ExtxyzError(f"expected key=value, got {tok!r}", lineno)
        key, value = tok.split("=", 1)
        info[key] = value
    return info


def parse_extxyz(text: str, symbols: Sequence[str] = DEFAULT_SYMBOLS) -> list[AtomicStructure]:
    """Parse the minimal extended-XYZ subset (count, Energy=..., atom lines)."""
    species_of = {s: k for k, s in enumerate(symbols)}
    lines = text.splitlines()
    structures = []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        lineno = pos + 1
        try:
            n = int(lines[pos].strip())
        except ValueError:
            raise ExtxyzError(f"expected atom count, got {lines[pos]!r}", lineno) from None
        if n < 1:
            raise ExtxyzError("atom count must be >= 1", lineno)
        if pos + 1 >= len(lines):
            raise ExtxyzError("missing comment line", lineno + 1)
        info = _parse_comment(lines[pos + 1], lineno + 1)
        if "Energy" not in info:
            raise ExtxyzError("comment line lacks Energy=", lineno + 1)
        try:
            energy = float(info["Energy"])
        except ValueError:
            raise ExtxyzError(f"bad energy {info['Energy']!r}", lineno + 1) from None
        want_forces = info.get("HasForces", "false").lower() in ("true", "t", "1")
        if pos + 2 + n > len(lines):
            raise ExtxyzError(f"frame declares {n} atoms but the text ends early", len(lines))
        species, coords, forces = [], [], []
        ncols = None
        for a in range(n):
            ln = pos + 2 + a
            cols = lines[ln].split()
            if len(cols) not in (4, 7) or (ncols is not None and len(cols) != ncols):
                raise ExtxyzError(f"wrong column count {len(cols)}", ln + 1)
            if want_forces and len(cols) != 7:
                raise ExtxyzError("HasForces=true but no force columns", ln + 1)
            ncols = len(cols)
            if cols[0] not in species_of:
                raise ExtxyzError(f"unknown species symbol {cols[0]!r}", ln + 1)
            try:
                vals = [float(c) for c in cols[1:]]
            except ValueError:
                raise ExtxyzError("non-numeric coordinate or force", ln + 1) from None
            species.append(species_of[cols[0]])
            coords.append(vals[:3])
            forces.append(vals[3:] if ncols == 7 else [0.0, 0.0, 0.0])
        try:
            structures.append(
                AtomicStructure(species, coords, energy, forces, has_forces=ncols == 7)
            )
        except InputError as exc:
            raise ExtxyzError(str(exc), lineno) from None
        pos += 2 + n
    return structures


def write_extxyz(structures: Iterable[AtomicStructure], symbols: Sequence[str] = DEFAULT_SYMBOLS) -> str:
    out = []
    for s in structures:
        out.append(str(s.n_atoms))
        comment = f"Energy={s.energy!r}"
        if s.has_forces:
            comment += " HasForces=true"
        out.append(comment)
        for k in range(s.n_atoms):
            cols = [symbols[s.species[k]]] + [repr(float(v)) for v in s.coords[k]]
            if s.has_forces:
                cols += [repr(float(v)) for v in s.forces[k]]
            out.append(" ".join(cols))
    return "\n".join(out) + ("\n" if out else "")


# --- serialization -------------------------------------------------------------


def serialize_dataset(graphs: Sequence[AtomicGraph]) -> bytes:
    payload = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "structures": [
            {
                "species": g.structure.species.tolist(),
                "coords": g.structure.coords.reshape(-1).tolist(),
                "energy": g.structure.energy,
                "forces": g.structure.forces.reshape(-1).tolist(),
                "has_forces": g.structure.has_forces,
                "cutoff": g.cutoff,
                "edges": g.edges.reshape(-1).tolist(),
            }
            for g in graphs
        ],
    }
    return json.dumps(payload, separators=(",", ":")).encode()


def deserialize_dataset(blob: bytes) -> list[AtomicGraph]:
    payload = json.loads(blob)
    if payload.get("format") != DATASET_FORMAT:
        raise InputError(f"not a dataset file (format={payload.get('format')!r})")
    if payload.get("version") != DATASET_VERSION:
        raise InputError(f"unsupported dataset version {payload.get('version')!r}")
    graphs = []
    for rec in payload["structures"]:
        s = AtomicStructure(
            rec["species"], rec["coords"], rec["energy"], rec["forces"], rec["has_forces"]
        )
        edges = np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2)
        graphs.append(AtomicGraph(s, edges, rec["cutoff"]))
    return graphs


def dataset_hash(graphs: Sequence[AtomicGraph]) -> str:
    return hashlib.sha256(serialize_dataset(graphs)).hexdigest()


# --- splits, batches, summaries ----------------------------------------------


def split_indices(n: int, test_fraction: float, data_fractions: Sequence[float], seed: int):
    """Index version of :func:`split_dataset`: (train index arrays, test indices)."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must be in (0, 1)")
    fractions = list(data_fractions)
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("data fractions must lie in (0, 1]")
    if any(b < a for a, b in zip(fractions, fractions[1:])):
        raise ConfigError("data fractions must be ascending")
    order = stream(seed, STREAM_SPLIT).permutation(n)
    n_test = int(round(test_fraction * n))
    if n_test < 1:
        raise ConfigError(f"test_fraction {test_fraction} leaves an empty test set")
    test, pool = order[:n_test], order[n_test:]
    train = []
    for f in fractions:
        k = int(round(f * len(pool)))
        if k < 1:
            raise ConfigError(f"data fraction {f} yields an empty training subset")
        train.append(pool[:k])
    return train, test


def split_dataset(dataset, test_fraction, data_fractions, seed):
    train_idx, test_idx = split_indices(len(dataset), test_fraction, data_fractions, seed)
    return [[dataset[i] for i in idx] for idx in train_idx], [dataset[i] for i in test_idx]


def batch_graphs(graphs: Sequence[AtomicGraph]) -> GraphBatch:
    if len(graphs) == 0:
        raise InputError("cannot batch an empty sequence")
    sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    edges = [g.edges + off for g, off in zip(graphs, offsets)]
    edges = np.concatenate(edges) if edges else np.zeros((0, 2), np.int64)
    return GraphBatch(
        species=np.concatenate([g.structure.species for g in graphs]),
        coords=np.concatenate([g.structure.coords for g in graphs]),
        forces=np.concatenate([g.structure.forces for g in graphs]),
        src=edges[:, 0].copy(),
        dst=edges[:, 1].copy(),
        graph_id=np.repeat(np.arange(len(graphs)), sizes),
        energies=np.array([g.structure.energy for g in graphs]),
        n_atoms=sizes,
        n_graphs=len(graphs),
    )


def load_manifest(path=None) -> list[dict]:
    """Dataset manifest records; defaults to the bundled aggregated-corpus table."""
    if path is None:
        text = resources.files("egnnlab").joinpath("data/manifest.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    records = json.loads(text)
    for rec in records:
        for key in ("name", "n_nodes", "n_edges", "n_graphs", "size_bytes"):
            if key not in rec:
                raise InputError(f"manifest record missing {key!r}")
    return records


def summarize_dataset(data) -> DatasetSummary:
    """Counts and payload size of a loaded dataset or a manifest record."""
    if isinstance(data, dict):
        return DatasetSummary(
            int(data["n_nodes"]), int(data["n_edges"]), int(data["n_graphs"]), int(data["size_bytes"])
        )
    if len(data) == 0:
        return DatasetSummary(0, 0, 0, 0)
    return DatasetSummary(
        n_nodes=sum(g.n_nodes for g in data),
        n_edges=sum(g.n_edges for g in data),
        n_graphs=len(data),
        size_bytes=len(serialize_dataset(data)),
    )
