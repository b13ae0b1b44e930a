"""Invertible flow over dequantized graphs.

Two stacks of coupling layers map a continuous (adjacency, features) pair to a
latent vector with an exactly computable Jacobian log-determinant:

* adjacency coupling: affine update of one node's adjacency slice, with scale
  and translation MLPs fed the remaining slices (scale bounded by a scaled
  tanh so the inverse never overflows);
* node-feature coupling: additive update of one node's feature row, with the
  translation computed by a relational graph conv conditioned on the discrete
  adjacency tensor (volume preserving, log-det 0).

Layer ``k`` in each stack targets node ``k mod N``, so every node is updated
as long as a stack has at least N layers.  Generation runs the adjacency
stack's inverse first, discretizes the result, and feeds it to the inverse of
the node-feature stack.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .graphs import DequantizedGraph, GraphSpec, argmax_adjacency
from .nets import MlpNet, Module, RelationalGraphConvNet
from .tensor import Tensor, make_rng

CHECKPOINT_MAGIC = b"GNVP"
CHECKPOINT_VERSION = 1

# During encoding the two stacks are independent; this build applies the
# node-feature stack first and records the convention in every checkpoint.
FORWARD_ORDER = "node_features_first"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for one flow model."""

    adjacency_layers: int
    node_layers: int
    mlp_hidden: tuple[int, ...] = (128, 128)
    gcn_hidden: int = 64
    gcn_rounds: int = 2
    scale_cap: float = 5.0
    batch_norm: bool = True

    def to_dict(self) -> dict:
        return {
            "adjacency_layers": self.adjacency_layers,
            "node_layers": self.node_layers,
            "mlp_hidden": list(self.mlp_hidden),
            "gcn_hidden": self.gcn_hidden,
            "gcn_rounds": self.gcn_rounds,
            "scale_cap": self.scale_cap,
            "batch_norm": self.batch_norm,
        }

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        return ModelConfig(
            adjacency_layers=int(data["adjacency_layers"]),
            node_layers=int(data["node_layers"]),
            mlp_hidden=tuple(int(w) for w in data["mlp_hidden"]),
            gcn_hidden=int(data["gcn_hidden"]),
            gcn_rounds=int(data["gcn_rounds"]),
            scale_cap=float(data["scale_cap"]),
            batch_norm=bool(data["batch_norm"]),
        )


def default_model_config(spec: GraphSpec) -> ModelConfig:
    """Stack depths for the bundled specs: 27/36 for the 9-node family,
    otherwise one layer per node in both stacks."""
    if spec.num_nodes == 9:
        return ModelConfig(adjacency_layers=27, node_layers=36)
    n = spec.num_nodes
    return ModelConfig(adjacency_layers=n, node_layers=n)


@dataclass(frozen=True)
class LatentPoint:
    """Flattened latent vector (adjacency part first) plus its log-det."""

    values: np.ndarray
    log_det: float

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dimension(self) -> int:
        return self.values.size


class AdjacencyCouplingLayer(Module):
    """Affine update of adjacency slice ``row`` given all other slices."""

    def __init__(self, spec: GraphSpec, row: int, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.row = row
        self.scale_cap = config.scale_cap
        n, r = spec.num_nodes, spec.num_bond_types
        flat_in = n * n * r
        slice_out = n * r
        mask = np.zeros((n, n, r))
        mask[row] = 1.0
        self._row_mask = mask  # 1 on the updated slice
        self._zero = Tensor(0.0)
        self.register_child(
            "scale_net", MlpNet(flat_in, config.mlp_hidden, slice_out, rng, config.batch_norm)
        )
        self.register_child(
            "translate_net", MlpNet(flat_in, config.mlp_hidden, slice_out, rng, config.batch_norm)
        )

    def _scale_translation(self, z: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        batch = z.shape[0]
        n, r = self.spec.num_nodes, self.spec.num_bond_types
        masked = T.masked_assign(z, self._row_mask, self._zero)
        flat = T.reshape(masked, (batch, n * n * r))
        s = T.mul(T.tanh(self._children["scale_net"](flat, training)), Tensor(self.scale_cap))
        t = self._children["translate_net"](flat, training)
        return (
            T.reshape(s, (batch, n, r)),
            T.reshape(t, (batch, n, r)),
        )

    def forward(self, z: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        """Returns the transformed tensor and the per-sample log-det [batch]."""
        s, t = self._scale_translation(z, training)
        row = T.index_axis(z, 1, self.row)
        new_row = T.add(T.mul(row, T.exp(s)), t)
        log_det = T.sum_axis(s, axis=(1, 2))
        return _replace_row(z, new_row, self.row), log_det

    def inverse(self, z: Tensor, training: bool = False) -> Tensor:
        s, t = self._scale_translation(z, training)
        row = T.index_axis(z, 1, self.row)
        original = T.mul(T.sub(row, t), T.exp(T.mul(s, Tensor(-1.0))))
        return _replace_row(z, original, self.row)


class NodeFeatureCouplingLayer(Module):
    """Additive update of feature row ``row``; log-det is exactly zero."""

    def __init__(self, spec: GraphSpec, row: int, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.row = row
        m = spec.num_atom_types
        mask = np.zeros((spec.num_nodes, m))
        mask[row] = 1.0
        self._row_mask = mask
        self._zero = Tensor(0.0)
        self.register_child(
            "translate_net",
            RelationalGraphConvNet(
                n_in=m,
                hidden=config.gcn_hidden,
                n_out=m,
                num_relations=spec.num_bond_types,
                rounds=config.gcn_rounds,
                rng=rng,
                batch_norm=config.batch_norm,
            ),
        )

    def _translation(self, z: Tensor, adjacency: np.ndarray, training: bool) -> Tensor:
        masked = T.masked_assign(z, self._row_mask, self._zero)
        return self._children["translate_net"](masked, adjacency, self.row, training)

    def forward(self, z: Tensor, adjacency: np.ndarray, training: bool) -> Tensor:
        t = self._translation(z, adjacency, training)
        new_row = T.add(T.index_axis(z, 1, self.row), t)
        return _replace_row(z, new_row, self.row)

    def inverse(self, z: Tensor, adjacency: np.ndarray, training: bool = False) -> Tensor:
        t = self._translation(z, adjacency, training)
        original = T.sub(T.index_axis(z, 1, self.row), t)
        return _replace_row(z, original, self.row)


def _replace_row(z: Tensor, new_row: Tensor, row: int) -> Tensor:
    """Swap one axis-1 slice; every other entry passes through unchanged."""
    n = z.shape[1]
    expanded = T.reshape(new_row, (new_row.shape[0], 1) + new_row.shape[1:])
    parts = []
    if row > 0:
        parts.append(T.slice_axis(z, 1, 0, row))
    parts.append(expanded)
    if row + 1 < n:
        parts.append(T.slice_axis(z, 1, row + 1, n))
    return T.concat(parts, axis=1)


class GaussianPrior(Module):
    """Isotropic zero-mean Gaussian with a learned log standard deviation."""

    def __init__(self, dimension: int):
        super().__init__()
        self.dimension = dimension
        self.register_parameter("log_sigma", Tensor(0.0))

    @property
    def sigma(self) -> float:
        return float(np.exp(self._params["log_sigma"].data))

    def log_prob(self, z: Tensor) -> Tensor:
        """Per-sample log density for a batch [batch, dimension]."""
        if z.ndim != 2 or z.shape[1] != self.dimension:
            raise ShapeError(f"latent batch shape {z.shape} != (*, {self.dimension})")
        log_sigma = self._params["log_sigma"]
        d = float(self.dimension)
        const = Tensor(-0.5 * d * np.log(2.0 * np.pi))
        sq = T.sum_axis(T.mul(z, z), axis=1)
        inv_two_var = T.mul(T.exp(T.mul(log_sigma, Tensor(-2.0))), Tensor(-0.5))
        return T.add(T.add(const, T.mul(log_sigma, Tensor(-d))), T.mul(sq, inv_two_var))


class FlowModel(Module):
    """Ordered coupling stacks plus the learned prior."""

    def __init__(self, spec: GraphSpec, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.config = config or default_model_config(spec)
        rng = make_rng(seed)
        n = spec.num_nodes
        self.adjacency_layers: list[AdjacencyCouplingLayer] = []
        for k in range(self.config.adjacency_layers):
            layer = AdjacencyCouplingLayer(spec, k % n, self.config, rng)
            self.adjacency_layers.append(layer)
            self.register_child(f"adjacency_{k}", layer)
        self.node_layers: list[NodeFeatureCouplingLayer] = []
        for k in range(self.config.node_layers):
            layer = NodeFeatureCouplingLayer(spec, k % n, self.config, rng)
            self.node_layers.append(layer)
            self.register_child(f"node_{k}", layer)
        self.prior = self.register_child("prior", GaussianPrior(spec.latent_dim))

    # -- batched core ------------------------------------------------------

    def forward_batch(
        self, adjacency: np.ndarray, features: np.ndarray, training: bool = False
    ) -> tuple[Tensor, Tensor]:
        """Map dequantized arrays [batch, ...] to (latent [batch, D], log-det [batch])."""
        batch = adjacency.shape[0]
        spec = self.spec
        if adjacency.shape[1:] != spec.adjacency_shape() or features.shape[1:] != spec.feature_shape():
            raise ShapeError(
                f"batch shapes {adjacency.shape} / {features.shape} do not match the spec"
            )
        conditioning = np.floor(adjacency)
        zx = Tensor(features)
        for layer in self.node_layers:
            zx = layer.forward(zx, conditioning, training)
        za = Tensor(adjacency)
        log_det = Tensor(np.zeros(batch))
        for layer in self.adjacency_layers:
            za, ld = layer.forward(za, training)
            log_det = T.add(log_det, ld)
        n, m, r = spec.num_nodes, spec.num_atom_types, spec.num_bond_types
        z = T.concat(
            [T.reshape(za, (batch, n * n * r)), T.reshape(zx, (batch, n * m))], axis=1
        )
        return z, log_det

    def inverse_batch(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Invert latents [batch, D] into continuous (adjacency, features) arrays.

        The adjacency stack is inverted first; its output is discretized and
        conditions the node-feature stack's inverse.
        """
        spec = self.spec
        if z.ndim != 2 or z.shape[1] != spec.latent_dim:
            raise ShapeError(f"latent batch shape {z.shape} != (*, {spec.latent_dim})")
        batch = z.shape[0]
        n, m, r = spec.num_nodes, spec.num_atom_types, spec.num_bond_types
        split = n * n * r
        za = Tensor(z[:, :split].reshape(batch, n, n, r))
        zx = Tensor(z[:, split:].reshape(batch, n, m))
        for layer in reversed(self.adjacency_layers):
            za = layer.inverse(za)
        a_cont = np.asarray(za.data)
        conditioning = np.stack([argmax_adjacency(spec, a_cont[b]) for b in range(batch)])
        for layer in reversed(self.node_layers):
            zx = layer.inverse(zx, conditioning)
        return a_cont, np.asarray(zx.data)


# ---------------------------------------------------------------------------
# single-graph operation surface
# ---------------------------------------------------------------------------


def model_forward(model: FlowModel, dq: DequantizedGraph, training: bool = False) -> tuple[LatentPoint, float]:
    """Encode one dequantized graph; returns the latent point and its log-det."""
    z, log_det = model.forward_batch(
        dq.adjacency[None, ...], dq.features[None, ...], training=training
    )
    ld = float(log_det.data[0])
    return LatentPoint(values=z.data[0], log_det=ld), ld


def model_inverse(model: FlowModel, z) -> tuple[np.ndarray, np.ndarray]:
    """Decode one latent vector to continuous (adjacency, features) scores."""
    values = z.values if isinstance(z, LatentPoint) else np.asarray(z, dtype=np.float64)
    if values.shape != (model.spec.latent_dim,):
        raise ShapeError(f"latent shape {values.shape} != ({model.spec.latent_dim},)")
    a_cont, x_cont = model.inverse_batch(values[None, :])
    return a_cont[0], x_cont[0]


def adj_coupling_forward(
    layer: AdjacencyCouplingLayer, z_in: np.ndarray, training: bool = False
) -> tuple[np.ndarray, float]:
    """Single-graph adjacency coupling; returns (output, log-det)."""
    out, log_det = layer.forward(Tensor(z_in[None, ...]), training)
    return out.data[0], float(log_det.data[0])


def adj_coupling_inverse(
    layer: AdjacencyCouplingLayer, z_out: np.ndarray, training: bool = False
) -> np.ndarray:
    return layer.inverse(Tensor(z_out[None, ...]), training).data[0]


def node_coupling_forward(
    layer: NodeFeatureCouplingLayer,
    z_in: np.ndarray,
    adjacency: np.ndarray,
    training: bool = False,
) -> tuple[np.ndarray, float]:
    """Single-graph node-feature coupling; additive, so the log-det is 0."""
    out = layer.forward(Tensor(z_in[None, ...]), adjacency[None, ...], training)
    return out.data[0], 0.0


def node_coupling_inverse(
    layer: NodeFeatureCouplingLayer,
    z_out: np.ndarray,
    adjacency: np.ndarray,
    training: bool = False,
) -> np.ndarray:
    return layer.inverse(Tensor(z_out[None, ...]), adjacency[None, ...], training).data[0]


def prior_logprob(prior: GaussianPrior, z) -> float:
    values = z.values if isinstance(z, LatentPoint) else np.asarray(z, dtype=np.float64)
    return float(prior.log_prob(Tensor(values[None, :])).data[0])


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def _spec_to_dict(spec: GraphSpec) -> dict:
    return {
        "num_nodes": spec.num_nodes,
        "atom_vocab": list(spec.atom_vocab),
        "bond_vocab": list(spec.bond_vocab),
    }


def _spec_from_dict(data: dict) -> GraphSpec:
    return GraphSpec(
        num_nodes=int(data["num_nodes"]),
        atom_vocab=tuple(data["atom_vocab"]),
        bond_vocab=tuple(data["bond_vocab"]),
    )


def save_checkpoint(model: FlowModel, path) -> None:
    """Write the model to a versioned, CRC-protected binary file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "forward_order": FORWARD_ORDER,
        "spec": _spec_to_dict(model.spec),
        "model": model.config.to_dict(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    entries: list[tuple[str, np.ndarray]] = []
    for name, value in sorted(model.named_parameters()):
        entries.append(("p:" + name, value.data))
    for name, value in sorted(model.named_buffers()):
        entries.append(("b:" + name, value))

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, spec: GraphSpec) -> FlowModel:
    """Rebuild a model from file; the stored spec must match ``spec`` exactly."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    payload, trailer = data[:-4], data[-4:]
    if struct.unpack("<I", trailer)[0] != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise CheckpointError(f"{path}: CRC mismatch (corrupt or truncated file)")
    reader = _Reader(payload)
    reader.take(4)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    stored_spec = _spec_from_dict(meta["spec"])
    if stored_spec != spec:
        raise CheckpointError(
            f"{path}: checkpoint spec {stored_spec} does not match requested spec {spec}"
        )
    model = FlowModel(spec, ModelConfig.from_dict(meta["model"]), seed=0)
    expected = {("p:" + n) for n, _ in model.named_parameters()}
    expected |= {("b:" + n) for n, _ in model.named_buffers()}
    n_entries = reader.u32()
    seen = set()
    for _ in range(n_entries):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = tuple(reader.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(reader.take(count * 8), dtype="<f8").reshape(shape).astype(np.float64)
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected entry {name!r}")
        seen.add(name)
        if name.startswith("p:"):
            model.set_parameter(name[2:], Tensor(arr))
        else:
            model.set_buffer(name[2:], arr)
    missing = expected - seen
    if missing:
        raise CheckpointError(f"{path}: missing entries {sorted(missing)[:3]}")
    return model
