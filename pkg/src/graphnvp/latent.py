"""Latent encoding, grid decoding, proxy properties, and direction search.

Encoding is deterministic by default: instead of random dequantization noise
every entry gets the midpoint offset c/2, so a molecule always maps to the
same latent point.  Grid and line searches decode every latent point exactly
once.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chem import Molecule, check_validity, from_graph, write_smiles_canonical
from .errors import ChemError, GnvpError
from .flow import FlowModel, LatentPoint, model_forward
from .graphs import MolecularGraph, dequantize, dequantize_midpoint, discretize_argmax

# Fixed per-atom hydrophobicity-style contributions; documented constants.
LOGP_CONTRIBUTIONS = {"C": 0.34, "N": -0.60, "O": -0.71, "F": 0.22, "S": 0.26, "Cl": 0.61}

PROPERTY_NAMES = ("heavy_atom_count", "ring_count", "hetero_fraction", "logp_proxy")


def encode(
    model: FlowModel,
    graph: MolecularGraph,
    rng: np.random.Generator | None = None,
    noise_scale: float = 0.9,
) -> LatentPoint:
    """Dequantize (random noise if ``rng`` given, midpoint otherwise) and map
    the graph through the flow."""
    if rng is None:
        dq = dequantize_midpoint(graph, noise_scale)
    else:
        dq = dequantize(graph, noise_scale, rng)
    point, _ = model_forward(model, dq)
    return point


def decode(model: FlowModel, values: np.ndarray) -> tuple[MolecularGraph, Molecule]:
    """Invert one latent vector and project it onto a discrete molecule."""
    a_cont, x_cont = model.inverse_batch(np.asarray(values, dtype=np.float64)[None, :])
    graph = discretize_argmax(model.spec, a_cont[0], x_cont[0])
    return graph, from_graph(graph)


def _decode_batch(model: FlowModel, latents: np.ndarray) -> list[tuple[MolecularGraph, Molecule]]:
    a_cont, x_cont = model.inverse_batch(latents)
    out = []
    for b in range(latents.shape[0]):
        graph = discretize_argmax(model.spec, a_cont[b], x_cont[b])
        out.append((graph, from_graph(graph)))
    return out


# ---------------------------------------------------------------------------
# 2-D neighborhood grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Center molecule plus two orthonormal latent directions and extents."""

    center: MolecularGraph
    axis_u: np.ndarray
    axis_v: np.ndarray
    extent: int
    step: float

    def __post_init__(self):
        u = np.asarray(self.axis_u, dtype=np.float64)
        v = np.asarray(self.axis_v, dtype=np.float64)
        object.__setattr__(self, "axis_u", u)
        object.__setattr__(self, "axis_v", v)
        if self.extent < 0 or self.step <= 0:
            raise GnvpError("grid extent must be >= 0 and step > 0")
        for name, axis in (("axis_u", u), ("axis_v", v)):
            if abs(np.linalg.norm(axis) - 1.0) > 1e-10:
                raise GnvpError(f"{name} is not a unit vector")
        if abs(float(u @ v)) > 1e-10:
            raise GnvpError("grid axes are not orthogonal")


def random_grid_axes(dimension: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two random orthonormal directions via Gram-Schmidt on Gaussian draws."""
    u = rng.standard_normal(dimension)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(dimension)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    return u, v


@dataclass(frozen=True)
class GridCell:
    i: int
    j: int
    molecule: Molecule
    valid: bool


def grid_decode(model: FlowModel, grid: GridSpec, noise_scale: float = 0.9) -> list[list[GridCell]]:
    """Decode the (2*extent+1)^2 lattice around the center's latent point.

    Each point is decoded exactly once; the (0, 0) cell reproduces the center
    molecule exactly because the flow is bijective.
    """
    center_z = encode(model, grid.center, noise_scale=noise_scale).values
    offsets = range(-grid.extent, grid.extent + 1)
    points = np.stack(
        [center_z + i * grid.step * grid.axis_u + j * grid.step * grid.axis_v
         for i in offsets for j in offsets]
    )
    decoded = _decode_batch(model, points)
    rows: list[list[GridCell]] = []
    k = 0
    for i in offsets:
        row = []
        for j in offsets:
            _, molecule = decoded[k]
            row.append(GridCell(i=i, j=j, molecule=molecule, valid=check_validity(molecule).ok))
            k += 1
        rows.append(row)
    return rows


def write_grid_csv(rows: Sequence[Sequence[GridCell]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "smiles"])
        for row in rows:
            for cell in row:
                text = write_smiles_canonical(cell.molecule) if cell.valid else "INVALID"
                writer.writerow([cell.i, cell.j, text])


# ---------------------------------------------------------------------------
# proxy chemical properties
# ---------------------------------------------------------------------------


def compute_property(molecule: Molecule, name: str) -> float:
    """Exact proxy properties; permutation-invariant over atom ordering."""
    if name not in PROPERTY_NAMES:
        raise ChemError(f"unknown property {name!r}; choose from {PROPERTY_NAMES}")
    report = check_validity(molecule)
    if not report.ok:
        raise ChemError("property requested for an invalid molecule")
    if name == "heavy_atom_count":
        return float(len(molecule.atoms))
    if name == "ring_count":
        return float(len(molecule.bonds) - len(molecule.atoms) + len(molecule.components()))
    if name == "hetero_fraction":
        non_carbon = sum(1 for a in molecule.atoms if a != "C")
        return non_carbon / len(molecule.atoms)
    # exactly rounded sum keeps the value independent of atom ordering
    return math.fsum(LOGP_CONTRIBUTIONS[a] for a in molecule.atoms)


# ---------------------------------------------------------------------------
# linear property regression and direction search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropertyRegressor:
    property_name: str
    weights: np.ndarray
    bias: float
    r_squared: float
    used_ridge: bool

    def predict(self, values: np.ndarray) -> float:
        return float(self.weights @ np.asarray(values, dtype=np.float64) + self.bias)


def encode_dataset(
    model: FlowModel, dataset: Sequence[MolecularGraph], noise_scale: float = 0.9
) -> np.ndarray:
    """Noise-free latent matrix [n, D] for a list of graphs."""
    adjacency = np.stack([g.adjacency for g in dataset]) + noise_scale / 2.0
    features = np.stack([g.features for g in dataset]) + noise_scale / 2.0
    z, _ = model.forward_batch(adjacency, features, training=False)
    return np.asarray(z.data)


def fit_linear_latent_model(
    latents: np.ndarray,
    targets: np.ndarray,
    property_name: str,
    ridge_lambda: float = 1e-6,
) -> PropertyRegressor:
    """Least squares of ``targets`` on latent rows.

    Exact OLS when the intercept-augmented design matrix has full column
    rank; otherwise a small ridge penalty (intercept unpenalized) with the
    fallback reported in the result.
    """
    latents = np.asarray(latents, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if np.unique(targets).size < 2:
        raise GnvpError(f"property {property_name!r} is constant over the dataset")
    n, dim = latents.shape

    design = np.hstack([latents, np.ones((n, 1))])
    solution, _, rank, _ = np.linalg.lstsq(design, targets, rcond=None)
    used_ridge = rank < dim + 1
    if used_ridge:
        z_mean = latents.mean(axis=0)
        y_mean = targets.mean()
        centered = latents - z_mean
        gram = centered.T @ centered + ridge_lambda * np.eye(dim)
        weights = np.linalg.solve(gram, centered.T @ (targets - y_mean))
        bias = float(y_mean - z_mean @ weights)
    else:
        weights, bias = solution[:dim], float(solution[dim])

    predictions = latents @ weights + bias
    ss_res = float(np.sum((targets - predictions) ** 2))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    return PropertyRegressor(
        property_name=property_name,
        weights=weights,
        bias=bias,
        r_squared=1.0 - ss_res / ss_tot,
        used_ridge=used_ridge,
    )


def fit_regressor(
    model: FlowModel,
    dataset: Sequence[MolecularGraph],
    property_name: str,
    noise_scale: float = 0.9,
    ridge_lambda: float = 1e-6,
) -> PropertyRegressor:
    """Fit a property's linear model on noise-free latent vectors."""
    if len(dataset) < 2:
        raise GnvpError("fit_regressor needs at least two molecules")
    targets = np.array(
        [compute_property(from_graph(g), property_name) for g in dataset], dtype=np.float64
    )
    latents = encode_dataset(model, dataset, noise_scale)
    return fit_linear_latent_model(latents, targets, property_name, ridge_lambda)


@dataclass(frozen=True)
class OptimizationStep:
    step: int
    molecule: Molecule
    valid: bool
    predicted: float
    realized: float | None


def optimize_along(
    model: FlowModel,
    regressor: PropertyRegressor,
    seed_graph: MolecularGraph,
    num_steps: int,
    step_size: float,
    noise_scale: float = 0.9,
) -> list[OptimizationStep]:
    """Walk the latent space along the regressor's normalized weight direction.

    Step 0 is the seed molecule itself; each of the ``num_steps`` following
    points is decoded once.  The realized property is reported only for valid
    decodes.
    """
    if step_size <= 0:
        raise GnvpError("step_size must be > 0")
    if num_steps < 0:
        raise GnvpError("num_steps must be >= 0")
    direction = regressor.weights / np.linalg.norm(regressor.weights)
    z0 = encode(model, seed_graph, noise_scale=noise_scale).values
    points = np.stack([z0 + k * step_size * direction for k in range(num_steps + 1)])
    decoded = _decode_batch(model, points)
    out = []
    for k, (_, molecule) in enumerate(decoded):
        valid = check_validity(molecule).ok
        realized = compute_property(molecule, regressor.property_name) if valid else None
        out.append(
            OptimizationStep(
                step=k,
                molecule=molecule,
                valid=valid,
                predicted=regressor.predict(points[k]),
                realized=realized,
            )
        )
    return out


def write_optimization_csv(steps: Sequence[OptimizationStep], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "smiles", "predicted_property", "realized_property"])
        for item in steps:
            text = write_smiles_canonical(item.molecule) if item.valid else "INVALID"
            realized = "" if item.realized is None else f"{item.realized:.6g}"
            writer.writerow([item.step, text, f"{item.predicted:.6g}", realized])
