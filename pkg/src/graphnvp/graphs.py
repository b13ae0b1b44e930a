"""Discrete and dequantized molecular graph representations.

A graph is an (adjacency tensor, feature matrix) pair padded to a fixed node
count.  The adjacency tensor has one channel per bond kind including an
explicit "virtual" (no-bond) channel, so each node pair is one-hot across
channels; the feature matrix is one-hot across atom kinds including a virtual
padding atom.  Adding sub-unit uniform noise turns a discrete graph into a
continuous one and the elementwise floor recovers it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError

DEFAULT_NOISE_SCALE = 0.9

QM9LITE_ATOMS = ("C", "N", "O", "F", "*")
ZINCLITE_ATOMS = ("C", "N", "O", "F", "S", "Cl", "*")
BOND_SYMBOLS = ("single", "double", "triple", "virtual")


@dataclass(frozen=True)
class GraphSpec:
    """Fixed dimensions and vocabularies for one graph family.

    The virtual atom symbol and the virtual bond channel always occupy the
    last index of their vocabulary.
    """

    num_nodes: int
    atom_vocab: tuple[str, ...]
    bond_vocab: tuple[str, ...] = BOND_SYMBOLS

    def __post_init__(self):
        if self.num_nodes < 1:
            raise GraphError("num_nodes must be positive")
        if len(self.atom_vocab) < 2 or len(self.bond_vocab) < 2:
            raise GraphError("vocabularies need at least one real and one virtual symbol")

    @property
    def num_atom_types(self) -> int:
        return len(self.atom_vocab)

    @property
    def num_bond_types(self) -> int:
        return len(self.bond_vocab)

    @property
    def virtual_atom(self) -> int:
        return len(self.atom_vocab) - 1

    @property
    def virtual_bond(self) -> int:
        return len(self.bond_vocab) - 1

    @property
    def latent_dim(self) -> int:
        n, m, r = self.num_nodes, self.num_atom_types, self.num_bond_types
        return n * n * r + n * m

    def adjacency_shape(self) -> tuple[int, int, int]:
        return (self.num_nodes, self.num_nodes, self.num_bond_types)

    def feature_shape(self) -> tuple[int, int]:
        return (self.num_nodes, self.num_atom_types)


def qm9lite_spec() -> GraphSpec:
    """9-node spec over C, N, O, F with single/double/triple bond channels."""
    return GraphSpec(num_nodes=9, atom_vocab=QM9LITE_ATOMS)


def zinclite_spec() -> GraphSpec:
    """38-node spec adding S and Cl to the atom vocabulary."""
    return GraphSpec(num_nodes=38, atom_vocab=ZINCLITE_ATOMS)


@dataclass(frozen=True)
class MolecularGraph:
    """Discrete graph: binary adjacency [N, N, R] and features [N, M]."""

    spec: GraphSpec
    adjacency: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        adj = np.ascontiguousarray(self.adjacency, dtype=np.float64)
        feat = np.ascontiguousarray(self.features, dtype=np.float64)
        adj.flags.writeable = False
        feat.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "features", feat)

    def validate(self) -> "MolecularGraph":
        """Raise :class:`GraphError` unless every structural invariant holds."""
        spec = self.spec
        if self.adjacency.shape != spec.adjacency_shape():
            raise GraphError(
                f"adjacency shape {self.adjacency.shape} != {spec.adjacency_shape()}"
            )
        if self.features.shape != spec.feature_shape():
            raise GraphError(f"features shape {self.features.shape} != {spec.feature_shape()}")
        a, x = self.adjacency, self.features
        if not np.isin(a, (0.0, 1.0)).all() or not np.isin(x, (0.0, 1.0)).all():
            raise GraphError("graph entries must be 0 or 1")
        if not (x.sum(axis=1) == 1.0).all():
            raise GraphError("each node needs exactly one atom type")
        if not (a.sum(axis=2) == 1.0).all():
            raise GraphError("each node pair needs exactly one bond channel")
        if not np.array_equal(a, a.transpose(1, 0, 2)):
            raise GraphError("adjacency must be symmetric per channel")
        diag = a[np.arange(spec.num_nodes), np.arange(spec.num_nodes)]
        if not (diag[:, spec.virtual_bond] == 1.0).all():
            raise GraphError("diagonal pairs must use the virtual bond channel")
        virtual_nodes = x[:, spec.virtual_atom] == 1.0
        if virtual_nodes.any():
            rows = a[virtual_nodes]
            if not (rows[:, :, spec.virtual_bond] == 1.0).all():
                raise GraphError("virtual nodes may only carry virtual bonds")
        return self

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MolecularGraph)
            and self.spec == other.spec
            and np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.features, other.features)
        )

    def __hash__(self):
        return hash((self.spec, self.adjacency.tobytes(), self.features.tobytes()))


@dataclass(frozen=True)
class DequantizedGraph:
    """Continuous graph obtained by adding uniform noise scaled by ``c < 1``."""

    spec: GraphSpec
    adjacency: np.ndarray
    features: np.ndarray
    noise_scale: float = field(default=DEFAULT_NOISE_SCALE)

    def __post_init__(self):
        adj = np.ascontiguousarray(self.adjacency, dtype=np.float64)
        feat = np.ascontiguousarray(self.features, dtype=np.float64)
        adj.flags.writeable = False
        feat.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "features", feat)


def dequantize(
    graph: MolecularGraph, c: float = DEFAULT_NOISE_SCALE, rng: np.random.Generator = None
) -> DequantizedGraph:
    """Add i.i.d. noise ``c * u`` with ``u ~ U[0, 1)`` to every entry.

    Because ``c < 1``, the floor of the result recovers the discrete graph.
    """
    if not 0.0 < c < 1.0:
        raise GraphError(f"noise scale must lie in (0, 1), got {c}")
    if rng is None:
        raise TypeError("dequantize requires an explicit seeded generator")
    adj = graph.adjacency + c * rng.random(graph.adjacency.shape)
    feat = graph.features + c * rng.random(graph.features.shape)
    return DequantizedGraph(graph.spec, adj, feat, noise_scale=c)


def dequantize_midpoint(graph: MolecularGraph, c: float = DEFAULT_NOISE_SCALE) -> DequantizedGraph:
    """Deterministic variant: offset every entry by c/2, the noise-cell midpoint."""
    if not 0.0 < c < 1.0:
        raise GraphError(f"noise scale must lie in (0, 1), got {c}")
    return DequantizedGraph(
        graph.spec,
        graph.adjacency + c / 2.0,
        graph.features + c / 2.0,
        noise_scale=c,
    )


def requantize(dq: DequantizedGraph) -> MolecularGraph:
    """Recover the discrete graph by elementwise floor; validate the result."""
    for name, arr in (("adjacency", dq.adjacency), ("features", dq.features)):
        if (arr < 0.0).any() or (arr >= 2.0).any():
            raise GraphError(f"requantize: {name} entries must lie in [0, 2)")
    graph = MolecularGraph(dq.spec, np.floor(dq.adjacency), np.floor(dq.features))
    try:
        return graph.validate()
    except GraphError as exc:
        raise GraphError(f"requantize produced a corrupted graph: {exc}") from exc


def argmax_adjacency(spec: GraphSpec, scores: np.ndarray) -> np.ndarray:
    """One-hot adjacency from continuous scores.

    Channel scores are symmetrized as ``(a[i, j] + a[j, i]) / 2`` before the
    argmax so the result is symmetric; diagonal pairs are forced to the
    virtual channel.  Ties resolve to the lowest channel index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != spec.adjacency_shape():
        raise GraphError(f"adjacency scores shape {scores.shape} != {spec.adjacency_shape()}")
    if not np.isfinite(scores).all():
        raise GraphError("adjacency scores must be finite")
    n = spec.num_nodes
    sym = (scores + scores.transpose(1, 0, 2)) / 2.0
    idx = sym.argmax(axis=2)
    idx[np.arange(n), np.arange(n)] = spec.virtual_bond
    out = np.zeros(spec.adjacency_shape())
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    out[ii, jj, idx] = 1.0
    return out


def discretize_argmax(
    spec: GraphSpec, adjacency: np.ndarray, features: np.ndarray
) -> MolecularGraph:
    """Project continuous scores onto a valid discrete graph.

    Atom types are the per-node argmax; bond channels come from
    :func:`argmax_adjacency`; any pair touching a node whose argmax type is
    virtual is forced to the virtual channel so the result always satisfies
    the graph invariants.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape != spec.feature_shape():
        raise GraphError(f"feature scores shape {features.shape} != {spec.feature_shape()}")
    if not np.isfinite(features).all():
        raise GraphError("feature scores must be finite")
    n = spec.num_nodes

    atom_idx = features.argmax(axis=1)
    x = np.zeros(spec.feature_shape())
    x[np.arange(n), atom_idx] = 1.0

    a = argmax_adjacency(spec, adjacency)
    virtual = atom_idx == spec.virtual_atom
    if virtual.any():
        wipe = np.zeros(spec.num_bond_types)
        wipe[spec.virtual_bond] = 1.0
        a[virtual, :, :] = wipe
        a[:, virtual, :] = wipe

    return MolecularGraph(spec, a, x).validate()


def permute_nodes(graph: MolecularGraph, perm) -> MolecularGraph:
    """Reindex nodes: row ``i`` of the result is node ``perm[i]`` of the input."""
    perm = np.asarray(perm, dtype=np.int64)
    n = graph.spec.num_nodes
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise GraphError(f"perm must be a bijection on 0..{n - 1}")
    adj = graph.adjacency[perm][:, perm]
    feat = graph.features[perm]
    return MolecularGraph(graph.spec, adj, feat)
