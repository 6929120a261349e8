# app/cli.py
"""
Command-line entry point: ``python -m app <verb> [flags]``.

Exit codes: 0 success, 1 contract / format / file / usage errors (and
divergence, after the last good checkpoint is written), 2 failed selfcheck.
"""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import pandas as pd
from pydantic import ValidationError

from app.config import settings
from app.errors import ContractError, DivergenceError, FormatError, SelfcheckFailed
from app.models.command import Command
from app.services import inspect_service, training_service
from app.services.checkpoint_service import load_checkpoint
from app.services.packed_format import export_network, read_packed, write_packed
from app.services.selfcheck_service import run_selfcheck

logger = logging.getLogger(__name__)

# Ensure module logger emits to stderr (stdout carries CSV)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("%(levelname)s:%(name)s:%(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.setLevel(settings.n2uq_log_level)
logger.propagate = False

DEFAULT_CHECKPOINT = settings.n2uq_data_dir / "model.ckpt"


def _emit(frame: pd.DataFrame, out: str | None) -> None:
    """CSV to ``out`` or stdout."""
    text = frame.to_csv(index=False, lineterminator="\n")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        logger.info("[CLI] wrote path=%s rows=%s", out, len(frame))
    else:
        click.echo(text, nl=False)


# ----------------------------
# verb 구현
# ----------------------------
def _train(cmd: Command) -> None:
    config = training_service.load_train_config(cmd.config, cmd.overrides())
    checkpoint = cmd.checkpoint or DEFAULT_CHECKPOINT
    result = training_service.train(config, checkpoint_path=checkpoint, metrics_path=cmd.out)
    if not cmd.out:
        click.echo(result.metrics.to_csv(index=False, float_format="%.6f", lineterminator="\n"), nl=False)


def _eval(cmd: Command) -> None:
    if not cmd.checkpoint and not cmd.config:
        raise click.UsageError("eval needs --checkpoint or --config")
    ckpt = load_checkpoint(cmd.checkpoint) if cmd.checkpoint else None
    if cmd.config or ckpt is None:
        config = training_service.load_train_config(cmd.config, cmd.overrides())
    else:
        config = ckpt.config.model_copy(update=cmd.overrides())
    _, data = training_service.load_datasets(config)

    rows = []
    if ckpt is not None:
        rows.append({"path": "training", "samples": len(data), "accuracy": training_service.evaluate(ckpt, data)})
    if cmd.packed:
        pn = read_packed(cmd.packed)
        rows.append({"path": "packed", "samples": len(data), "accuracy": training_service.evaluate_packed(pn, data, arch=config.arch)})
    _emit(pd.DataFrame(rows, columns=["path", "samples", "accuracy"]), cmd.out)


def _export(cmd: Command) -> None:
    if not cmd.checkpoint or not cmd.out:
        raise click.UsageError("export needs --checkpoint and --out")
    ckpt = load_checkpoint(cmd.checkpoint)
    net = training_service.network_from_checkpoint(ckpt)
    write_packed(export_network(net), cmd.out)


def _inspect(cmd: Command) -> None:
    if not cmd.checkpoint:
        raise click.UsageError("inspect needs --checkpoint")
    ckpt = load_checkpoint(cmd.checkpoint)
    frame = inspect_service.weight_table(ckpt) if cmd.weights else inspect_service.activation_table(ckpt)
    _emit(frame, cmd.out)


def _selfcheck(cmd: Command) -> None:
    report = run_selfcheck(quick=cmd.quick, seed=cmd.seed or 0)
    _emit(report.frame, cmd.out)
    if not report.passed:
        raise SelfcheckFailed(report.frame)


def _ablate(cmd: Command) -> None:
    config = training_service.load_train_config(cmd.config, cmd.overrides())
    _emit(training_service.ablate(config), cmd.out)


HANDLERS = {
    "train": _train,
    "eval": _eval,
    "export": _export,
    "inspect": _inspect,
    "selfcheck": _selfcheck,
    "ablate": _ablate,
}


def execute(cmd: Command) -> None:
    logger.info("[CLI] verb=%s flags=%s", cmd.verb, cmd.model_dump(exclude={"verb"}, exclude_none=True))
    HANDLERS[cmd.verb](cmd)


def _command(verb: str, **flags) -> None:
    try:
        cmd = Command(verb=verb, **flags)
    except ValidationError as e:
        raise click.UsageError(str(e)) from e
    execute(cmd)


# ----------------------------
# click 정의
# ----------------------------
config_opt = click.option("--config", type=str, default=None, help="key=value training config file")
checkpoint_opt = click.option("--checkpoint", type=str, default=None, help="checkpoint path")
out_opt = click.option("--out", type=str, default=None, help="output path (CSV or packed model)")
seed_opt = click.option("--seed", type=int, default=None, help="overrides the config seed")
bits_w_opt = click.option("--bits-w", "bits_w", type=int, default=None, help="weight bit-width K")
bits_a_opt = click.option("--bits-a", "bits_a", type=int, default=None, help="activation bit-width M")


@click.group(name="n2uq")
def cli() -> None:
    """Nonuniform-to-uniform quantization toolkit."""


@cli.command()
@config_opt
@checkpoint_opt
@out_opt
@bits_w_opt
@bits_a_opt
@seed_opt
@click.option("--epochs", type=int, default=None)
def train(**flags) -> None:
    """Train and write a checkpoint plus epoch,train_loss,eval_acc metrics."""
    _command("train", **flags)


@cli.command(name="eval")
@config_opt
@checkpoint_opt
@out_opt
@seed_opt
@click.option("--packed", type=str, default=None, help="packed model written by `export`")
def eval_(**flags) -> None:
    """Accuracy of a checkpoint and/or a packed model."""
    _command("eval", **flags)


@cli.command()
@checkpoint_opt
@out_opt
def export(**flags) -> None:
    """Write the packed bit-plane model."""
    _command("export", **flags)


@cli.command()
@checkpoint_opt
@out_opt
@click.option("--weights", is_flag=True, default=False, help="weight-level histograms instead of intervals")
def inspect(**flags) -> None:
    """Learned intervals / cut points, or weight histograms with entropy."""
    _command("inspect", **flags)


@cli.command()
@out_opt
@seed_opt
@click.option("--quick", is_flag=True, default=False, help="reduced trial counts")
def selfcheck(**flags) -> None:
    """Run the gradient, oracle, bitwise and entropy suites."""
    _command("selfcheck", **flags)


@cli.command()
@config_opt
@out_opt
@bits_w_opt
@bits_a_opt
@seed_opt
@click.option("--epochs", type=int, default=None)
def ablate(**flags) -> None:
    """Seed-matched float / uniform / N2UQ component comparison."""
    _command("ablate", **flags)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cli.main(args=argv, prog_name="n2uq", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except SelfcheckFailed:
        logger.error("[CLI] selfcheck failed")
        return 2
    except DivergenceError as e:
        logger.error("[CLI] training diverged: %s (last good checkpoint: %s)", e, e.last_good)
        return 1
    except (ContractError, FormatError) as e:
        logger.error("[CLI] %s: %s", type(e).__name__, e)
        click.echo(f"error: {e}", err=True)
        return 1
    except FileNotFoundError as e:
        click.echo(f"error: file not found: {e.filename or e}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(run())
