"""Command-line entry point.

Subcommands: train, generate, eval, encode, grid, optimize, sweep.  Every run
is reproducible byte-for-byte given the same inputs and seed; figure-style
outputs (grids, sweeps, traces) are CSV files for external plotting.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Failures print one machine-parsable line: ``gnvp:error:<kind>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .chem import bundled_corpus_path, load_dataset
from .errors import (
    CheckpointError,
    ChemError,
    DatasetError,
    GnvpError,
    GraphError,
    NumericError,
    ShapeError,
    SmilesParseError,
    TrainingError,
)
from .flow import FlowModel, load_checkpoint
from .graphs import GraphSpec, qm9lite_spec, zinclite_spec
from .latent import (
    GridSpec,
    encode_dataset,
    fit_regressor,
    grid_decode,
    optimize_along,
    random_grid_axes,
    write_grid_csv,
    write_optimization_csv,
)
from .sampling import (
    SampleConfig,
    compute_metrics,
    generate,
    temperature_sweep,
    write_generated_smiles,
    write_sweep_csv,
)
from .tensor import make_rng
from .train import TrainConfig, train, write_metrics_csv

_SPECS = {"qm9lite": qm9lite_spec, "zinclite": zinclite_spec}
_DEFAULT_TEMPS = {"qm9lite": 0.85, "zinclite": 0.75}
_DEFAULT_BATCH = {"qm9lite": 256, "zinclite": 128}

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3

_DATA_ERRORS = (DatasetError, ChemError, SmilesParseError, CheckpointError, GraphError, OSError)
_NUMERIC_ERRORS = (NumericError, TrainingError, ShapeError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="gnvp", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser, *, dataset=False, checkpoint=False):
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None, help="random seed (default: $GNVP_SEED or 0)")
        p.add_argument("--spec", choices=sorted(_SPECS), default="qm9lite", help="graph family (default: qm9lite)")
        p.add_argument("--config", default=None, help="key=value config file; flags override it")
        p.add_argument("--threads", type=int, default=1, help="worker cap (reserved; execution is single-threaded)")
        if dataset:
            p.add_argument("--dataset", default=None, help="SMILES file (default: the bundled corpus for --spec)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint file")

    p = sub.add_parser("train", help="fit a model and write checkpoint + metrics log")
    common(p, dataset=True)
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 200)")
    p.add_argument("--batch-size", type=int, default=None, help="minibatch size (default 256 for qm9lite, 128 for zinclite)")
    p.add_argument("--timing", action="store_true", help="record wall-clock seconds in metrics.csv (breaks byte-reproducibility)")

    p = sub.add_parser("generate", help="sample molecules into a SMILES file")
    common(p, checkpoint=True)
    p.add_argument("--samples", type=int, default=1000, help="number of latents to decode (default 1000)")
    p.add_argument("--temp", type=float, default=None, help="sampling temperature (default per spec)")

    p = sub.add_parser("eval", help="generate and score validity/novelty/uniqueness/reconstruction")
    common(p, dataset=True, checkpoint=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--temp", type=float, default=None)

    p = sub.add_parser("encode", help="write noise-free latent vectors for a dataset")
    common(p, dataset=True, checkpoint=True)

    p = sub.add_parser("grid", help="decode a 2-D latent neighborhood of one molecule")
    common(p, dataset=True, checkpoint=True)
    p.add_argument("--steps", type=int, default=2, help="grid extent per axis (default 2)")
    p.add_argument("--step-size", type=float, default=0.5, help="latent grid spacing (default 0.5)")

    p = sub.add_parser("optimize", help="walk the latent space along a property direction")
    common(p, dataset=True, checkpoint=True)
    p.add_argument("--property", default="logp_proxy", help="property name (default logp_proxy)")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=0.5)

    p = sub.add_parser("sweep", help="average metrics over seeds for several temperatures")
    common(p, dataset=True, checkpoint=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--temps", default="0.3,0.6,0.9", help="comma-separated temperatures")

    return parser


def _load_config_file(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path} line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _resolve(args, key: str, file_values: dict[str, str], default, cast):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_values:
        return cast(file_values[key])
    return default


def _resolve_seed(args, file_values) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in file_values:
        return int(file_values["seed"])
    env = os.environ.get("GNVP_SEED")
    return int(env) if env else 0


def _resolve_dataset(args, spec_name: str) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    return bundled_corpus_path(spec_name)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec(args) -> GraphSpec:
    return _SPECS[args.spec]()


def _default_temp(args) -> float:
    if getattr(args, "temp", None) is not None:
        return args.temp
    return _DEFAULT_TEMPS[args.spec]


def _cmd_train(args) -> int:
    file_values = _load_config_file(args.config)
    spec = _spec(args)
    seed = _resolve_seed(args, file_values)
    config = TrainConfig(
        epochs=_resolve(args, "epochs", file_values, 200, int),
        batch_size=_resolve(args, "batch_size", file_values, _DEFAULT_BATCH[args.spec], int),
        adam_alpha=float(file_values.get("adam_alpha", 0.001)),
        adam_beta1=float(file_values.get("adam_beta1", 0.9)),
        adam_beta2=float(file_values.get("adam_beta2", 0.999)),
        adam_eps=float(file_values.get("adam_eps", 1e-8)),
        dequant_noise=float(file_values.get("dequant_noise", 0.9)),
        checkpoint_every=int(file_values.get("checkpoint_every", 0)),
        seed=seed,
    )
    dataset = load_dataset(_resolve_dataset(args, args.spec), spec)
    out = _out_dir(args)
    model = FlowModel(spec, seed=seed)
    _, records = train(model, dataset, config, checkpoint_dir=out)
    write_metrics_csv(records, out / "metrics.csv", include_timing=args.timing)
    for rec in records:
        print(f"epoch {rec.epoch}: mean_nll={rec.mean_nll:.6f} sigma={rec.sigma:.6f}")
    print(f"wrote {out / 'model.gnvp'} and {out / 'metrics.csv'}")
    return 0


def _cmd_generate(args) -> int:
    file_values = _load_config_file(args.config)
    spec = _spec(args)
    seed = _resolve_seed(args, file_values)
    model = load_checkpoint(args.checkpoint, spec)
    config = SampleConfig(num_samples=args.samples, temperature=_default_temp(args), seed=seed)
    samples = generate(model, config)
    out = _out_dir(args)
    write_generated_smiles(samples, out / "generated.smi")
    n_valid = sum(1 for s in samples if s.valid)
    print(f"generated {len(samples)} samples ({n_valid} valid) -> {out / 'generated.smi'}")
    return 0


def _cmd_eval(args) -> int:
    file_values = _load_config_file(args.config)
    spec = _spec(args)
    seed = _resolve_seed(args, file_values)
    model = load_checkpoint(args.checkpoint, spec)
    dataset = load_dataset(_resolve_dataset(args, args.spec), spec)
    config = SampleConfig(num_samples=args.samples, temperature=_default_temp(args), seed=seed)
    samples = generate(model, config)
    report = compute_metrics([s.molecule for s in samples], dataset, model, seed=seed)
    out = _out_dir(args)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["temp", "validity", "novelty", "uniqueness", "reconstruction", "samples", "seed"]
        )
        writer.writerow(
            [
                f"{config.temperature:g}",
                f"{report.validity:.4f}",
                f"{report.novelty:.4f}",
                f"{report.uniqueness:.4f}",
                f"{report.reconstruction:.4f}",
                report.total,
                seed,
            ]
        )
    print("  %V      %N      %U      %R")
    print(
        f"{report.validity:6.2f}  {report.novelty:6.2f}  "
        f"{report.uniqueness:6.2f}  {report.reconstruction:6.2f}"
    )
    return 0


def _cmd_encode(args) -> int:
    file_values = _load_config_file(args.config)
    spec = _spec(args)
    model = load_checkpoint(args.checkpoint, spec)
    dataset = load_dataset(_resolve_dataset(args, args.spec), spec)
    latents = encode_dataset(model, dataset)
    out = _out_dir(args)
    with open(out / "latents.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + [f"z{k}" for k in range(latents.shape[1])])
        for idx in range(latents.shape[0]):
            writer.writerow([idx] + [f"{v:.12g}" for v in latents[idx]])
    print(f"encoded {latents.shape[0]} molecules -> {out / 'latents.csv'}")
    return 0


def _cmd_grid(args) -> int:
    file_values = _load_config_file(args.config)
    spec = _spec(args)
    seed = _resolve_seed(args, file_values)
    model = load_checkpoint(args.checkpoint, spec)
    dataset = load_dataset(_resolve_dataset(args, args.spec), spec)
    rng = make_rng(seed)
    center = dataset[int(rng.integers(len(dataset)))]
    axis_u, axis_v = random_grid_axes(spec.latent_dim, rng)
    grid = GridSpec(center=center, axis_u=axis_u, axis_v=axis_v, extent=args.steps, step=args.step_size)
    cells = grid_decode(model, grid)
    out = _out_dir(args)
    write_grid_csv(cells, out / "grid.csv")
    print(f"decoded {(2 * args.steps + 1) ** 2} grid points -> {out / 'grid.csv'}")
    return 0


def _cmd_optimize(args) -> int:
    file_values = _load_config_file(args.config)
    spec = _spec(args)
    seed = _resolve_seed(args, file_values)
    model = load_checkpoint(args.checkpoint, spec)
    dataset = load_dataset(_resolve_dataset(args, args.spec), spec)
    regressor = fit_regressor(model, dataset, args.property)
    rng = make_rng(seed)
    seed_graph = dataset[int(rng.integers(len(dataset)))]
    steps = optimize_along(model, regressor, seed_graph, args.steps, args.step_size)
    out = _out_dir(args)
    write_optimization_csv(steps, out / "optimize.csv")
    ridge_note = " (ridge fallback)" if regressor.used_ridge else ""
    print(
        f"{args.property}: R^2={regressor.r_squared:.4f}{ridge_note}; "
        f"trace -> {out / 'optimize.csv'}"
    )
    return 0


def _cmd_sweep(args) -> int:
    file_values = _load_config_file(args.config)
    spec = _spec(args)
    seed = _resolve_seed(args, file_values)
    model = load_checkpoint(args.checkpoint, spec)
    dataset = load_dataset(_resolve_dataset(args, args.spec), spec)
    try:
        temps = [float(t) for t in args.temps.split(",") if t.strip()]
    except ValueError:
        raise _UsageError(f"--temps must be comma-separated numbers, got {args.temps!r}")
    config = SampleConfig(num_samples=args.samples, temperature=max(temps), seed=seed)
    rows = temperature_sweep(model, dataset, temps, config)
    out = _out_dir(args)
    write_sweep_csv(rows, out / "sweep.csv")
    print(f"swept {len(temps)} temperatures x {rows[0].seed_count} seeds -> {out / 'sweep.csv'}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "encode": _cmd_encode,
    "grid": _cmd_grid,
    "optimize": _cmd_optimize,
    "sweep": _cmd_sweep,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise _UsageError("--threads must be >= 1")
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"gnvp:error:usage: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except _DATA_ERRORS as exc:
        print(f"gnvp:error:data: {exc}", file=sys.stderr)
        return DATA_EXIT
    except _NUMERIC_ERRORS as exc:
        print(f"gnvp:error:numeric: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except GnvpError as exc:
        print(f"gnvp:error:data: {exc}", file=sys.stderr)
        return DATA_EXIT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
