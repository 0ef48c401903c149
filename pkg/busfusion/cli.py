# -*- coding: utf-8 -*-
"""Command line interface for busfusion API.

Parse the INI file passed as argument for retrieving the options, then
executes the choosen command. Every command writes its files in a run
directory holding a ``run_manifest.json``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
error.
"""
import functools

import click

import busfusion.controller as controller
from busfusion.exceptions import BusfusionError, ConfigError
from busfusion.training import PRECISION_MODES


def _warn(messages):
    [click.secho(msg, bg="yellow", fg="black") for msg in messages]


def handle_errors(command):
    """Translate busfusion errors into click errors and echo warnings."""

    @functools.wraps(command)
    def wrapper(ctx, *args, **kwargs):
        try:
            return command(ctx, *args, **kwargs)
        except ConfigError as err:
            click.secho(str(err), bg="red", fg="black")
            raise click.UsageError(str(err), ctx=ctx)
        except BusfusionError as err:
            click.secho(str(err), bg="red", fg="black")
            raise click.ClickException(str(err))
        finally:
            _warn(ctx.obj.log)
            del ctx.obj.log[:]

    return wrapper


@click.group("cli")
@click.argument("ini", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override an option of the INI file, i.e. --set train.epochs=1.",
)
@click.pass_context
def cli(ctx, ini, overrides):
    """Train and evaluate multi-task breast ultrasound models, parsing
    options from a .INI configuration file.
    """
    try:
        ctx.obj = controller.new_controller(ini, overrides)
    except ConfigError as err:
        click.secho(str(err), bg="red", fg="black")
        raise click.UsageError(str(err), ctx=ctx)
    # check for warning messages
    _warn(ctx.obj._ini.log)
    click.secho("Parsed the config file.", bg="green", fg="black")


def run_dir_option(command):
    command = click.option(
        "--force", is_flag=True, help="Overwrite a run directory already used."
    )(command)
    return click.option(
        "-o",
        "run_dir",
        type=click.Path(file_okay=False),
        help="Run directory, defaults to <paths.runs>/<command>.",
    )(command)


@cli.command()
@run_dir_option
@click.pass_context
@handle_errors
def split(ctx, run_dir, force):
    """Stratified train/val/test split of the BUSI dataset.

    Writes the split as ``manifest.csv``, point ``paths.manifest`` to it to
    reuse the split in the next commands.
    """
    path = ctx.obj.split(run_dir, force)
    click.secho("Created file: " + str(path), bg="green", fg="black")


TRAIN_FLAGS = [
    ("--epochs", "epochs", int),
    ("--patience", "patience", int),
    ("--lr-init", "lr_init", float),
    ("--lr-min", "lr_min", float),
    ("--weight-decay", "weight_decay", float),
    ("--grad-clip-norm", "grad_clip_norm", float),
    ("--batch-size", "batch_size", int),
    ("--precision", "precision", click.Choice(PRECISION_MODES)),
    ("--seed", "seed", int),
    ("--device", "device", str),
]


def train_options(command):
    for flag, name, kind in reversed(TRAIN_FLAGS):
        command = click.option(flag, name, type=kind, help=f"Override train.{name}.")(command)
    return command


@cli.command()
@train_options
@click.option(
    "--ensemble",
    is_flag=True,
    help="Train one model per seed of ensemble.seeds, --seed is ignored.",
)
@run_dir_option
@click.pass_context
@handle_errors
def train(ctx, ensemble, run_dir, force, **flags):
    """Train one model on the train split.

    Validation Dice drives early stopping, the best epoch is saved as
    ``best.ckpt`` and the last one as ``last.ckpt``.
    """
    for name, value in flags.items():
        if value is not None:
            ctx.obj._ini.set(f"train.{name}", value)
    if ensemble:
        for member in ctx.obj.train_ensemble(run_dir, force):
            click.echo("Run directory: " + str(member))
        click.secho("Trained the ensemble members.", bg="green", fg="black")
        return
    run_dir, result = ctx.obj.train(run_dir, force)
    click.secho(
        f"Best epoch {result.early_stop.best_epoch} of {len(result.history)}.",
        bg="green",
        fg="black",
    )
    click.echo("Run directory: " + str(run_dir))


@cli.command("eval")
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(exists=True))
@click.option(
    "--dataset",
    type=click.Choice(["busi", "external"]),
    help="Dataset to evaluate on, defaults to data.dataset.",
)
@click.option(
    "--split",
    "split_name",
    type=click.Choice(["train", "val", "test", "all"]),
    default="test",
    show_default=True,
    help="Split of the dataset to evaluate on.",
)
@click.option("--ci", is_flag=True, help="Add bootstrap confidence intervals.")
@click.option(
    "--compare",
    type=click.Path(exists=True, file_okay=False),
    help="Evaluated run to test against with the Wilcoxon signed-rank test.",
)
@run_dir_option
@click.pass_context
@handle_errors
def evaluate(ctx, checkpoints, dataset, split_name, ci, compare, run_dir, force):
    """Evaluate one checkpoint, or the ensemble of several checkpoints.

    Writes ``metrics.json``, ``metrics.rst``, ``per_image.csv`` and
    ``classification.csv``.
    """
    run_dir, report = ctx.obj.evaluate(
        checkpoints, run_dir, dataset, split_name, ci, compare, force
    )
    click.secho(
        f"Dice {report.mean_dice:.4f}, accuracy {report.classification.accuracy:.4f}.",
        bg="green",
        fg="black",
    )
    click.echo("Run directory: " + str(run_dir))


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--fraction",
    "fractions",
    type=float,
    multiple=True,
    help="Fine-tuning fraction, repeat for several, defaults to data.adaptation_fractions.",
)
@click.option("--seed", "seeds", type=int, multiple=True, help="Fine-tuning seed, repeatable.")
@click.option("--reference", type=float, help="Source-domain Dice for the recovery column.")
@run_dir_option
@click.pass_context
@handle_errors
def adapt(ctx, checkpoint, fractions, seeds, reference, run_dir, force):
    """Zero-shot evaluation and fine-tuning on the external dataset.

    Writes the learning curve as ``learning_curve.csv``,
    ``learning_curve.json`` and ``learning_curve.png``.
    """
    run_dir, points = ctx.obj.adapt(
        checkpoint, run_dir, fractions or None, seeds or None, reference, force
    )
    for p in points:
        click.echo(f"{100 * p.fraction:5.1f}%  n={p.n_train_images:4d}  Dice {p.dice_mean:.4f}")
    click.echo("Run directory: " + str(run_dir))


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("image_ids", nargs=-1, required=True)
@click.option("--dataset", type=click.Choice(["busi", "external"]))
@run_dir_option
@click.pass_context
@handle_errors
def interpret(ctx, checkpoint, image_ids, dataset, run_dir, force):
    """Attention validation and Grad-CAM panels for the given image ids."""
    run_dir, table = ctx.obj.interpret(checkpoint, image_ids, run_dir, dataset, force)
    click.echo(table)
    click.echo("Run directory: " + str(run_dir))


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--xlsx", is_flag=True, help="Also write comparison.xlsx.")
@run_dir_option
@click.pass_context
@handle_errors
def report(ctx, run_dirs, xlsx, run_dir, force):
    """Merge the metrics of evaluated runs into one comparison table.

    The first run is the baseline of the significance markers.
    """
    run_dir, table = ctx.obj.report(run_dirs, run_dir, force, xlsx)
    click.echo(table.export("rst"))
    click.echo("Run directory: " + str(run_dir))


@cli.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--size", type=int, default=64, show_default=True, help="Image side.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--counts",
    type=(int, int, int),
    default=(4, 4, 4),
    show_default=True,
    help="Normal, benign and malignant images of the busi dataset.",
)
@click.pass_context
@handle_errors
def synth(ctx, out_dir, size, seed, counts):
    """Write synthetic ``busi`` and ``external`` datasets in OUT_DIR."""
    busi, external = ctx.obj.synth(out_dir, counts=counts, size=size, seed=seed)
    click.secho(
        f"Written {len(busi)} busi and {len(external)} external images.",
        bg="green",
        fg="black",
    )
