"""Desk-scale study of equivariant GNN potentials: data, model, autodiff,
memory accounting, simulated data parallelism and scaling sweeps."""

__version__ = "0.1.0"
