"""Command-line entry point for reproducible tomography experiments.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Config precedence: flags > config file (key=value) > defaults. The env var
QST_THREADS caps worker threads.
"""

import functools
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .dataset import (
    DatasetError,
    FAMILIES,
    generate_dataset,
    property_names,
    read_dataset,
    train_test_split,
    write_dataset,
)
from .measurements import MeasurementError, measurement_set
from .model import (
    CheckpointError,
    ILRModel,
    desk_config,
    load_checkpoint,
    save_checkpoint,
)
from .report import ReportError, write_report
from .seeding import derive_seed
from .states import StateError
from .train import (
    TrainError,
    TrainPlan,
    evaluate_baseline,
    evaluate_model,
    finetune_qst,
    predict,
    pretrain as run_pretrain,
    read_kv,
    train as run_train,
    write_kv,
    write_loss_history,
    write_metrics_csv,
)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

DATA_ERRORS = (DatasetError, CheckpointError, ReportError, FileNotFoundError)
NUMERICAL_ERRORS = (TrainError, StateError, MeasurementError, np.linalg.LinAlgError)


def _apply_thread_cap():
    cap = os.environ.get("QST_THREADS")
    if cap:
        try:
            torch.set_num_threads(max(1, int(cap)))
        except ValueError:
            raise click.UsageError(f"QST_THREADS must be an integer, got {cap!r}")


def handle_errors(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DATA_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        except NUMERICAL_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)

    return wrapper


def resolve_config(ctx, config_path):
    """Merge a key=value config file under explicit command-line flags.

    Unknown keys are rejected; the resolved mapping is what run directories
    snapshot, so parse -> dump -> parse round-trips.
    """
    params = {k: v for k, v in ctx.params.items() if k != "config"}
    if not config_path:
        return params
    by_name = {p.name: p for p in ctx.command.params}
    for key, raw in read_kv(config_path).items():
        if key == "config" or key not in params:
            raise click.UsageError(f"unknown config key {key!r} in {config_path}")
        source = ctx.get_parameter_source(key)
        if source is not None and source.name == "COMMANDLINE":
            continue  # explicit flag wins
        params[key] = by_name[key].type.convert(raw, by_name[key], ctx)
    return params


def config_snapshot(params) -> dict:
    snap = {k: str(v) for k, v in params.items() if v is not None}
    snap["version"] = __version__
    return snap


def _parse_mask_set(text):
    if not text:
        return ()
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise click.UsageError(f"mask set must be comma-separated integers, got {text!r}")


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing {what}: expected file {path}")
    return path


def _guard_output(path, force):
    path = Path(path)
    if path.exists() and not force:
        raise click.UsageError(f"output {path} exists; pass --force to overwrite")
    return path


def model_options(fn):
    opts = [
        click.option("--embed-size", type=int, default=96, show_default=True),
        click.option("--encoder-layers", type=int, default=3, show_default=True),
        click.option("--heads", type=int, default=6, show_default=True),
        click.option("--head-dim", type=int, default=16, show_default=True),
        click.option("--ffn-hidden", type=int, default=96, show_default=True),
        click.option(
            "--operator-embedding/--no-operator-embedding",
            default=True,
            show_default=True,
            help="Embed operator content into tokens (disable for ablation).",
        ),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def train_options(fn):
    opts = [
        click.option("--n-t", type=int, default=100, show_default=True,
                     help="Shots per detector group."),
        click.option("--strategy", type=click.Choice(["separate", "unified"]),
                     default="separate", show_default=True),
        click.option("--m", type=int, default=0, show_default=True,
                     help="Masked operator count (separate strategy)."),
        click.option("--mask-set", default="", help="Comma list of m values (unified)."),
        click.option("--epochs", type=int, default=50, show_default=True),
        click.option("--batch-size", type=int, default=256, show_default=True),
        click.option("--base-lr", type=float, default=1e-3, show_default=True),
        click.option("--warmup-epochs", type=int, default=4, show_default=True),
        click.option("--seed", type=int, default=1, show_default=True),
        click.option("--test-fraction", type=float, default=0.1, show_default=True),
        click.option("--fixed-noise", is_flag=True,
                     help="Disable per-epoch shot-noise resampling (ablation)."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Quantum state tomography workbench."""
    _apply_thread_cap()


@main.command("gen-data")
@click.option("--qubits", type=int, default=2, show_default=True)
@click.option("--family", type=click.Choice(FAMILIES), default="pure", show_default=True)
@click.option("--scheme", type=click.Choice(["cube", "nn"]), default="cube", show_default=True)
@click.option("--count", type=int, default=10000, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--force", is_flag=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.pass_context
@handle_errors
def gen_data(ctx, **kwargs):
    """Generate a QSTD dataset of simulated states."""
    cfg = resolve_config(ctx, kwargs["config"])
    out = _guard_output(cfg["out"], cfg["force"])
    ds = generate_dataset(
        cfg["family"], cfg["scheme"], cfg["qubits"], cfg["count"], cfg["seed"]
    )
    meta = config_snapshot(cfg)
    meta.pop("force", None)
    write_dataset(ds, out, metadata=meta)
    names = property_names(cfg["family"])
    click.echo(f"wrote {ds.n_samples} samples to {out}")
    for j, name in enumerate(names):
        click.echo(f"mean {name}: {ds.mu[:, j].mean():.6f}")


def _prepare_run(out_dir, cfg, force):
    out_dir = Path(out_dir)
    done = out_dir / "model.qstc"
    if done.exists() and not force:
        click.echo(f"run already complete: {done} exists (use --force to redo)")
        sys.exit(0)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_kv(out_dir / "config.txt", config_snapshot(cfg))
    return out_dir


def _load_split(cfg):
    ds = read_dataset(_require(cfg["data"], "dataset"))
    return ds, train_test_split(ds, cfg["test_fraction"])


@main.command("pretrain")
@click.option("--data", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True, help="Run directory.")
@train_options
@model_options
@click.option("--force", is_flag=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.pass_context
@handle_errors
def pretrain_cmd(ctx, **kwargs):
    """Pre-train the encoder and frequency decoder (masked reconstruction)."""
    cfg = resolve_config(ctx, kwargs["config"])
    out_dir = _prepare_run(cfg["out"], cfg, cfg["force"])
    ds, (train_ds, test_ds) = _load_split(cfg)
    ms = measurement_set(ds.scheme, ds.n_qubits)
    model = ILRModel(_model_config(cfg, ds), ms)
    model.reset_parameters(seed=derive_seed(cfg["seed"], "init"))
    plan = _plan(cfg, stage="pretrain")
    history = run_pretrain(model, train_ds, ms, plan, log=_progress)
    write_loss_history(out_dir / "loss.csv", {"train": history})
    save_checkpoint(model, out_dir / "model.qstc")
    p_hat, f = predict(model, test_ds, ms, cfg["n_t"], m=0, seed=cfg["seed"], target="p")
    mse_model = float(np.mean((p_hat - test_ds.p) ** 2))
    mse_freq = float(np.mean((f - test_ds.p) ** 2))
    write_kv(
        out_dir / "pretrain_eval.txt",
        {"mse_phat_p": f"{mse_model:.6e}", "mse_f_p": f"{mse_freq:.6e}"},
    )
    click.echo(f"final train loss: {history[-1]:.4e}")
    click.echo(f"test MSE(p_hat, p) = {mse_model:.4e}  vs  MSE(f, p) = {mse_freq:.4e}")


@main.command("train-qst")
@click.option("--data", type=click.Path(), required=True)
@click.option("--encoder", type=click.Path(), default=None,
              help="Pre-trained checkpoint (omit with --no-pretrain).")
@click.option("--out", type=click.Path(), required=True, help="Run directory.")
@click.option("--target", type=click.Choice(["nu", "mu"]), default="nu", show_default=True)
@click.option("--no-pretrain", is_flag=True,
              help="Train encoder jointly from scratch (ablation).")
@train_options
@model_options
@click.option("--force", is_flag=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.pass_context
@handle_errors
def train_qst(ctx, **kwargs):
    """Fine-tune the state decoder on a frozen pre-trained encoder."""
    cfg = resolve_config(ctx, kwargs["config"])
    if cfg["encoder"] is None and not cfg["no_pretrain"]:
        raise DatasetError(
            "missing pre-trained encoder: pass --encoder RUN_DIR/model.qstc "
            "or --no-pretrain for the from-scratch ablation"
        )
    out_dir = _prepare_run(cfg["out"], cfg, cfg["force"])
    ds, (train_ds, test_ds) = _load_split(cfg)
    ms = measurement_set(ds.scheme, ds.n_qubits)
    if cfg["no_pretrain"]:
        model = ILRModel(_model_config(cfg, ds), ms)
        model.reset_parameters(seed=derive_seed(cfg["seed"], "init"))
    else:
        model = load_checkpoint(_require(cfg["encoder"], "encoder checkpoint"), ms)
    plan = _plan(cfg, stage="qst", target=cfg["target"])
    history = run_train(
        model, train_ds, ms, plan, freeze_encoder=not cfg["no_pretrain"], log=_progress
    )
    write_loss_history(out_dir / "loss.csv", {"train": history})
    save_checkpoint(model, out_dir / "model.qstc")
    method = "ilr" if not cfg["no_pretrain"] else "ilr-scratch"
    if cfg["target"] == "mu":
        method += "-mu"
    rows = []
    eval_ms = sorted(set(_parse_mask_set(cfg["mask_set"]) or (cfg["m"],)))
    names = _property_names_for(ds)
    for m in eval_ms:
        metrics = evaluate_model(
            model, test_ds, ms, cfg["n_t"], m, seed=cfg["seed"],
            target=cfg["target"], property_names=names,
        )
        metrics["method"] = method
        rows.append(metrics)
        key = "mean_infidelity" if cfg["target"] == "nu" else "property MSE"
        shown = metrics.get("mean_infidelity") or metrics.get(f"mse_{names[0]}")
        click.echo(f"m={m}: {key} = {shown:.4e}")
    write_metrics_csv(out_dir / "metrics.csv", rows)
    click.echo(f"final train loss: {history[-1]:.4e}")


@main.command("baseline")
@click.option("--data", type=click.Path(), required=True)
@click.option("--method", type=click.Choice(["lre", "mle"]), required=True)
@click.option("--n-t", type=int, default=100, show_default=True)
@click.option("--m", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--max-iters", type=int, default=5000, show_default=True)
@click.option("--properties", is_flag=True, help="Also report per-property MSE.")
@click.option("--out", type=click.Path(), required=True, help="Run directory.")
@click.option("--force", is_flag=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.pass_context
@handle_errors
def baseline(ctx, **kwargs):
    """Evaluate an LRE or MLE baseline over a dataset."""
    cfg = resolve_config(ctx, kwargs["config"])
    out_dir = Path(cfg["out"])
    target_csv = out_dir / "metrics.csv"
    if target_csv.exists() and not cfg["force"]:
        raise click.UsageError(f"output {target_csv} exists; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_kv(out_dir / "config.txt", config_snapshot(cfg))
    ds = read_dataset(_require(cfg["data"], "dataset"))
    ms = measurement_set(ds.scheme, ds.n_qubits)
    names = _property_names_for(ds) if cfg["properties"] else None
    metrics = evaluate_baseline(
        cfg["method"], ds, ms, cfg["n_t"], cfg["m"], seed=cfg["seed"],
        property_names=names, max_iters=cfg["max_iters"],
    )
    metrics["method"] = cfg["method"]
    write_metrics_csv(target_csv, [metrics])
    click.echo(
        f"{cfg['method']} n_t={cfg['n_t']} m={cfg['m']}: "
        f"mean infidelity = {metrics['mean_infidelity']:.6e}"
    )


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--data", type=click.Path(), required=True)
@click.option("--n-t", type=int, default=100, show_default=True)
@click.option("--m", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--target", type=click.Choice(["nu", "mu"]), default="nu", show_default=True)
@click.option("--method-name", default="ilr", show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Run directory.")
@click.option("--force", is_flag=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.pass_context
@handle_errors
def eval_cmd(ctx, **kwargs):
    """Evaluate a trained checkpoint on a dataset."""
    cfg = resolve_config(ctx, kwargs["config"])
    out_dir = Path(cfg["out"])
    target_csv = out_dir / "metrics.csv"
    if target_csv.exists() and not cfg["force"]:
        raise click.UsageError(f"output {target_csv} exists; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_kv(out_dir / "config.txt", config_snapshot(cfg))
    ds = read_dataset(_require(cfg["data"], "dataset"))
    ms = measurement_set(ds.scheme, ds.n_qubits)
    model = load_checkpoint(_require(cfg["model_path"], "model checkpoint"), ms)
    metrics = evaluate_model(
        model, ds, ms, cfg["n_t"], cfg["m"], seed=cfg["seed"],
        target=cfg["target"], property_names=_property_names_for(ds),
    )
    metrics["method"] = cfg["method_name"]
    write_metrics_csv(target_csv, [metrics])
    for key in sorted(metrics):
        if key != "method":
            click.echo(f"{key}: {metrics[key]}")


@main.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--out", type=click.Path(), required=True)
@handle_errors
def report(run_dirs, out):
    """Aggregate metrics CSVs from runs; write merged table and figures."""
    artifacts = write_report(run_dirs, out)
    for name in sorted(artifacts):
        click.echo(f"wrote {artifacts[name]}")


# -- helpers ----------------------------------------------------------------


def _model_config(cfg, ds):
    return desk_config(
        ds.n_qubits,
        ds.scheme,
        embed_size=cfg["embed_size"],
        encoder_layers=cfg["encoder_layers"],
        heads=cfg["heads"],
        head_dim=cfg["head_dim"],
        ffn_hidden=cfg["ffn_hidden"],
        use_operator_embedding=cfg["operator_embedding"],
        k_properties=ds.k_properties,
    )


def _plan(cfg, stage, target="nu"):
    return TrainPlan(
        stage=stage,
        strategy=cfg["strategy"],
        n_t=cfg["n_t"],
        epochs=cfg["epochs"],
        m=cfg["m"],
        mask_set=_parse_mask_set(cfg["mask_set"]),
        batch_size=cfg["batch_size"],
        base_lr=cfg["base_lr"],
        warmup_epochs=cfg["warmup_epochs"],
        seed=cfg["seed"],
        target=target,
        resample_noise=not cfg["fixed_noise"],
    )


def _property_names_for(ds):
    from .properties import MIXED_PROPERTIES, PURE_PROPERTIES

    return list(MIXED_PROPERTIES if ds.k_properties == 6 else PURE_PROPERTIES)


def _progress(epoch, loss):
    if epoch % 10 == 0:
        click.echo(f"epoch {epoch}: loss {loss:.4e}")


if __name__ == "__main__":
    main()
