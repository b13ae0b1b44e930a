import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from graphnvp.chem import bundled_corpus_path, load_dataset
from graphnvp.flow import FlowModel, ModelConfig
from graphnvp.graphs import GraphSpec, MolecularGraph, qm9lite_spec
from graphnvp.tensor import Tensor, make_rng
from graphnvp.train import TrainConfig, split_dataset, train

settings.register_profile(
    "ci",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")

TOY_SPEC = GraphSpec(num_nodes=3, atom_vocab=("C", "*"), bond_vocab=("single", "virtual"))
TOY_CONFIG = ModelConfig(
    adjacency_layers=3, node_layers=3, mlp_hidden=(8, 8), gcn_hidden=6, gcn_rounds=2
)

# 4-node spec for regression tests: enough distinct graphs for a full-rank
# latent design matrix (the 3-node family only has 18 distinct graphs)
REG_SPEC = GraphSpec(num_nodes=4, atom_vocab=("C", "N", "*"), bond_vocab=("single", "virtual"))
REG_CONFIG = ModelConfig(
    adjacency_layers=4, node_layers=4, mlp_hidden=(8, 8), gcn_hidden=6, gcn_rounds=2
)


@pytest.fixture
def toy_spec():
    return TOY_SPEC


@pytest.fixture
def toy_model():
    return FlowModel(TOY_SPEC, TOY_CONFIG, seed=7)


def randomize_model(model: FlowModel, seed: int, scale: float = 0.3) -> FlowModel:
    """Perturb every parameter (including the zero-initialized heads) and the
    batch-norm running statistics, giving a non-trivial map for round-trip and
    Jacobian tests."""
    rng = make_rng(seed)
    model.load_parameters(
        {name: Tensor(rng.normal(scale=scale, size=p.shape)) for name, p in model.named_parameters()}
    )
    for name, buf in model.named_buffers():
        if name.endswith("running_mean"):
            model.set_buffer(name, rng.normal(scale=0.2, size=buf.shape))
        elif name.endswith("running_var"):
            model.set_buffer(name, 1.0 + 0.5 * rng.random(buf.shape))
    return model


@pytest.fixture
def random_toy_model(toy_model):
    return randomize_model(toy_model, seed=11)


def random_nonempty_graph(spec: GraphSpec, rng: np.random.Generator) -> MolecularGraph:
    """Random structurally valid graph with at least one real atom."""
    while True:
        g = random_graph(spec, rng)
        if g.features[:, spec.virtual_atom].sum() < spec.num_nodes:
            return g


def random_graph(spec: GraphSpec, rng: np.random.Generator) -> MolecularGraph:
    """Random graph satisfying the structural invariants (valence not checked)."""
    n = spec.num_nodes
    n_real = int(rng.integers(0, n + 1))
    features = np.zeros(spec.feature_shape())
    for i in range(n_real):
        features[i, int(rng.integers(0, spec.virtual_atom))] = 1.0
    features[n_real:, spec.virtual_atom] = 1.0

    adjacency = np.zeros(spec.adjacency_shape())
    adjacency[:, :, spec.virtual_bond] = 1.0
    for i in range(n_real):
        for j in range(i + 1, n_real):
            channel = int(rng.integers(0, spec.num_bond_types))
            if channel != spec.virtual_bond:
                adjacency[i, j, :] = 0.0
                adjacency[j, i, :] = 0.0
                adjacency[i, j, channel] = 1.0
                adjacency[j, i, channel] = 1.0
    return MolecularGraph(spec, adjacency, features).validate()


@pytest.fixture(scope="session")
def qm9_corpus():
    return load_dataset(bundled_corpus_path("qm9lite"), qm9lite_spec())


@pytest.fixture(scope="session")
def qm9_split(qm9_corpus):
    return split_dataset(qm9_corpus, seed=0)


@pytest.fixture(scope="session")
def trained_qm9(qm9_split):
    """One 30-epoch training run shared by the tests that need a non-trivial
    model; also the subject of the training-descent acceptance criterion."""
    train_part, holdout = qm9_split
    model = FlowModel(qm9lite_spec(), seed=0)
    config = TrainConfig(epochs=30, batch_size=64, seed=0)
    state, records = train(model, train_part, config)
    return model, state, records, train_part, holdout
