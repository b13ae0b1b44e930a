"""Invertible flow model for attributed molecular graphs.

Exact-likelihood training on (adjacency tensor, feature matrix) pairs,
two-step reverse generation, generation-quality metrics, and latent-space
tooling, with a small numpy-backed autodiff core.
"""

from .chem import (
    Molecule,
    ValenceTable,
    bundled_corpus_path,
    check_validity,
    from_graph,
    load_dataset,
    parse_smiles_lite,
    to_graph,
    write_smiles_canonical,
)
from .flow import (
    AdjacencyCouplingLayer,
    FlowModel,
    GaussianPrior,
    LatentPoint,
    ModelConfig,
    NodeFeatureCouplingLayer,
    default_model_config,
    load_checkpoint,
    model_forward,
    model_inverse,
    prior_logprob,
    save_checkpoint,
)
from .graphs import (
    DequantizedGraph,
    GraphSpec,
    MolecularGraph,
    dequantize,
    dequantize_midpoint,
    discretize_argmax,
    permute_nodes,
    qm9lite_spec,
    requantize,
    zinclite_spec,
)
from .latent import (
    GridSpec,
    PropertyRegressor,
    compute_property,
    encode,
    fit_regressor,
    grid_decode,
    optimize_along,
)
from .sampling import (
    MetricsReport,
    SampleConfig,
    compute_metrics,
    generate,
    sample_latent,
    temperature_sweep,
)
from .tensor import GradientTape, Tensor, backward, finite_difference_gradient, make_rng
from .train import TrainConfig, TrainState, adam_step, nll_loss, split_dataset, train

__version__ = "0.1.0"

__all__ = [
    "AdjacencyCouplingLayer",
    "DequantizedGraph",
    "FlowModel",
    "GaussianPrior",
    "GradientTape",
    "GraphSpec",
    "GridSpec",
    "LatentPoint",
    "MetricsReport",
    "ModelConfig",
    "MolecularGraph",
    "Molecule",
    "NodeFeatureCouplingLayer",
    "PropertyRegressor",
    "SampleConfig",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "ValenceTable",
    "adam_step",
    "backward",
    "bundled_corpus_path",
    "check_validity",
    "compute_metrics",
    "compute_property",
    "default_model_config",
    "dequantize",
    "dequantize_midpoint",
    "discretize_argmax",
    "encode",
    "finite_difference_gradient",
    "fit_regressor",
    "from_graph",
    "generate",
    "grid_decode",
    "load_checkpoint",
    "load_dataset",
    "make_rng",
    "model_forward",
    "model_inverse",
    "nll_loss",
    "optimize_along",
    "parse_smiles_lite",
    "permute_nodes",
    "prior_logprob",
    "qm9lite_spec",
    "requantize",
    "sample_latent",
    "save_checkpoint",
    "split_dataset",
    "temperature_sweep",
    "to_graph",
    "train",
    "write_smiles_canonical",
    "zinclite_spec",
]
