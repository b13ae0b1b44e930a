import numpy as np
import pytest

from conftest import TOY_CONFIG, TOY_SPEC, random_graph, randomize_model
from graphnvp.errors import TrainingError
from graphnvp.flow import FlowModel, load_checkpoint, save_checkpoint
from graphnvp.tensor import GradientTape, Tensor, finite_difference_gradient, make_rng
from graphnvp.train import (
    TrainConfig,
    TrainState,
    adam_step,
    load_train_state,
    nll_loss,
    save_train_state,
    split_dataset,
    train,
    write_metrics_csv,
)


def toy_batch(count=4, seed=0):
    rng = make_rng(seed)
    return [random_graph(TOY_SPEC, rng) for _ in range(count)]


def toy_model(seed=7):
    return FlowModel(TOY_SPEC, TOY_CONFIG, seed=seed)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_nll_zero_init_closed_form():
    """Identity flow: the loss is exactly the negative prior density of the
    dequantized inputs."""
    model = toy_model()
    batch = toy_batch()
    loss = nll_loss(model, batch, make_rng(5), training=True)

    rng = make_rng(5)
    adjacency = np.stack([g.adjacency for g in batch])
    features = np.stack([g.features for g in batch])
    adjacency = adjacency + 0.9 * rng.random(adjacency.shape)
    features = features + 0.9 * rng.random(features.shape)
    d = TOY_SPEC.latent_dim
    flat = np.concatenate([adjacency.reshape(len(batch), -1), features.reshape(len(batch), -1)], axis=1)
    expected = (0.5 * d * np.log(2 * np.pi) + 0.5 * (flat**2).sum(axis=1)).mean()
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_nll_requires_non_empty_batch():
    with pytest.raises(TrainingError):
        nll_loss(toy_model(), [], make_rng(0))


def test_nll_sigma_doubling_shifts_loss_by_d_log2_at_origin():
    """With z held at 0, doubling sigma lowers the log density by exactly
    D*log 2 (the -D log sigma term)."""
    model = toy_model()
    d = TOY_SPEC.latent_dim
    from graphnvp.flow import prior_logprob

    base = prior_logprob(model.prior, np.zeros(d))
    model.prior.set_parameter("log_sigma", Tensor(np.log(2.0)))
    doubled = prior_logprob(model.prior, np.zeros(d))
    assert base - doubled == pytest.approx(d * np.log(2.0), abs=1e-9)


def test_nll_gradient_matches_finite_differences():
    """Spot-check a few parameter tensors of each kind on the toy spec; the
    acceptance suite sweeps every tensor."""
    model = toy_model()
    randomize_model(model, seed=21, scale=0.2)
    batch = toy_batch(count=2, seed=3)

    names = [
        "adjacency_0.scale_net.head.weight",
        "adjacency_1.translate_net.lin0.bias",
        "adjacency_2.scale_net.bn0.gamma",
        "node_0.translate_net.round0.rel_weight",
        "node_1.translate_net.head.bias",
        "prior.log_sigma",
    ]
    for name in names:
        p0 = model.get_parameter(name)

        def loss_at(values):
            model.set_parameter(name, values if isinstance(values, Tensor) else Tensor(values.data))
            out = nll_loss(model, batch, make_rng(9), training=True)
            return out

        with GradientTape() as tape:
            tape.watch(name, p0)
            model.set_parameter(name, p0)
            loss = nll_loss(model, batch, make_rng(9), training=True)
        analytic = tape.gradients(loss)[name].data
        numeric = finite_difference_gradient(lambda t: loss_at(t), p0, 1e-5).data
        model.set_parameter(name, p0)
        denom = max(np.abs(numeric).max(), np.abs(analytic).max())
        gap = np.abs(analytic - numeric).max()
        if denom < 1e-6:
            assert gap < 1e-6, name  # structurally zero gradient
        else:
            assert gap / denom < 1e-4, name


def test_nll_invariant_under_checkpoint_round_trip(tmp_path):
    model = toy_model()
    randomize_model(model, seed=22, scale=0.2)
    batch = toy_batch(count=3, seed=4)
    before = nll_loss(model, batch, make_rng(11), training=False).item()
    save_checkpoint(model, tmp_path / "m.gnvp")
    loaded = load_checkpoint(tmp_path / "m.gnvp", TOY_SPEC)
    after = nll_loss(loaded, batch, make_rng(11), training=False).item()
    assert before == after


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    model = toy_model()
    state = TrainState.fresh(model)
    grads = {n: Tensor(np.zeros(p.shape)) for n, p in state.params.items()}
    new_state = adam_step(state, grads, TrainConfig(epochs=1, batch_size=1))
    for name, p in state.params.items():
        assert np.array_equal(new_state.params[name].data, p.data)


def test_adam_first_step_magnitude():
    # bias-corrected first step with unit gradient moves by ~alpha
    config = TrainConfig(epochs=1, batch_size=1, adam_alpha=0.001)
    params = {"w": Tensor(np.array(5.0))}
    state = TrainState(
        params=params,
        first_moment={"w": np.zeros(())},
        second_moment={"w": np.zeros(())},
    )
    new_state = adam_step(state, {"w": Tensor(np.array(1.0))}, config)
    delta = float(new_state.params["w"].data) - 5.0
    assert delta == pytest.approx(-0.001, rel=1e-6)


def test_adam_reaches_quadratic_minimum():
    # minimize (w - t)^2 elementwise; closed-form minimum w = t.  Adam's step
    # magnitude stays near alpha, so the target sits within 100 * alpha.
    config = TrainConfig(epochs=1, batch_size=1, adam_alpha=0.001)
    target = np.array([0.05, 0.03, 0.04])
    params = {"w": Tensor(np.zeros(3))}
    state = TrainState(
        params=params,
        first_moment={"w": np.zeros(3)},
        second_moment={"w": np.zeros(3)},
    )
    for _ in range(100):
        w = state.params["w"].data
        grads = {"w": Tensor(2.0 * (w - target))}
        state = adam_step(state, grads, config)
    assert np.abs(state.params["w"].data - target).max() < 1e-3


def test_adam_rejects_mismatched_names():
    model = toy_model()
    state = TrainState.fresh(model)
    with pytest.raises(TrainingError):
        adam_step(state, {"nope": Tensor(np.zeros(1))}, TrainConfig(epochs=1, batch_size=1))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_zero_epochs_leaves_model_unchanged():
    model = toy_model()
    reference = {n: p.data.copy() for n, p in model.named_parameters()}
    dataset = toy_batch(count=8, seed=5)
    _, records = train(model, dataset, TrainConfig(epochs=0, batch_size=4, seed=1))
    assert records == []
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, reference[name])


def test_train_rejects_empty_dataset():
    with pytest.raises(TrainingError):
        train(toy_model(), [], TrainConfig(epochs=1, batch_size=2))


def test_train_is_deterministic():
    dataset = toy_batch(count=12, seed=6)
    config = TrainConfig(epochs=3, batch_size=4, seed=42)

    def run():
        model = toy_model()
        _, records = train(model, dataset, config)
        params = {n: p.data.tobytes() for n, p in model.named_parameters()}
        return [(r.epoch, r.mean_nll, r.sigma) for r in records], params

    first, second = run(), run()
    assert first[0] == second[0]
    assert first[1] == second[1]


def test_train_decreases_loss_on_toy_data():
    dataset = toy_batch(count=16, seed=7)
    model = toy_model()
    _, records = train(model, dataset, TrainConfig(epochs=12, batch_size=8, seed=2))
    assert records[-1].mean_nll < records[0].mean_nll


def test_train_resume_matches_uninterrupted(tmp_path):
    dataset = toy_batch(count=12, seed=8)

    model_full = toy_model(seed=3)
    state_full, records_full = train(model_full, dataset, TrainConfig(epochs=6, batch_size=4, seed=9))

    model_half = toy_model(seed=3)
    state_half, records_half = train(model_half, dataset, TrainConfig(epochs=3, batch_size=4, seed=9))
    save_train_state(tmp_path / "state.npz", state_half, model_half)

    model_resumed = toy_model(seed=3)
    resumed_state = load_train_state(tmp_path / "state.npz", model_resumed)
    _, records_rest = train(
        model_resumed,
        dataset,
        TrainConfig(epochs=6, batch_size=4, seed=9),
        resume_state=resumed_state,
    )

    for name, p in model_full.named_parameters():
        assert np.array_equal(p.data, model_resumed.get_parameter(name).data), name
    merged = records_half + records_rest
    assert [r.mean_nll for r in merged] == [r.mean_nll for r in records_full]


def test_train_writes_checkpoints(tmp_path):
    dataset = toy_batch(count=8, seed=10)
    model = toy_model()
    train(
        model,
        dataset,
        TrainConfig(epochs=4, batch_size=4, seed=3, checkpoint_every=2),
        checkpoint_dir=tmp_path,
    )
    assert (tmp_path / "model.gnvp").exists()
    assert (tmp_path / "epoch_0002.gnvp").exists()
    assert (tmp_path / "epoch_0004.gnvp").exists()
    loaded = load_checkpoint(tmp_path / "model.gnvp", TOY_SPEC)
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, loaded.get_parameter(name).data)


def test_split_dataset_deterministic(qm9_corpus):
    a_train, a_test = split_dataset(qm9_corpus, seed=0)
    b_train, b_test = split_dataset(qm9_corpus, seed=0)
    assert len(a_test) == round(len(qm9_corpus) * 0.1)
    assert len(a_train) + len(a_test) == len(qm9_corpus)
    assert all(x == y for x, y in zip(a_train, b_train))


def test_metrics_csv_format(tmp_path):
    from graphnvp.train import EpochRecord

    records = [
        EpochRecord(epoch=1, mean_nll=100.5, sigma=1.0, wall_seconds=2.5),
        EpochRecord(epoch=2, mean_nll=90.25, sigma=0.98, wall_seconds=2.4),
    ]
    path = tmp_path / "metrics.csv"
    write_metrics_csv(records, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "epoch,mean_nll,sigma,wall_seconds"
    assert lines[2] == "1,100.5,1,"
    write_metrics_csv(records, path, include_timing=True)
    lines = path.read_text().splitlines()
    assert lines[2].endswith("2.500")


def test_loss_finite_on_corpus_batches(qm9_corpus):
    from graphnvp.graphs import qm9lite_spec

    model = FlowModel(qm9lite_spec(), seed=0)
    rng = make_rng(0)
    loss = nll_loss(model, qm9_corpus[:64], rng, training=True)
    assert np.isfinite(loss.item())
