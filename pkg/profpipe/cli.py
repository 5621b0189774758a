import logging
import logging.config
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from typing import Any, Dict, List, Optional

import click
from dotenv import load_dotenv

from . import APP_NAME, utils
from .config import config
from .experiments import EXPERIMENTS, ExperimentSettings, run_experiment
from .models import (
    AggregationStrategy,
    EncoderArchitecture,
    ProficiencyCoding,
    RecognizerMode,
    RunConfig,
    ViewFusion,
)
from .parse import load_run_config, parse_confusion_file
from .runner import Runner, default_output_directory

logger = logging.getLogger(__name__)


def _init_logger():
    logging.config.dictConfig(config.log_config)


def get_version() -> str:
    try:
        return version(APP_NAME)
    except PackageNotFoundError:
        return "unknown"


def _apply_options(f, options):
    for option in reversed(options):
        f = option(f)
    return f


def run_options(f):
    return _apply_options(
        f,
        [
            click.option(
                "-c",
                "--config",
                "config_file",
                type=click.Path(dir_okay=False),
                help="YAML or JSON run configuration. Flags override its values.",
            ),
            click.option(
                "-o",
                "--out",
                "output_dir",
                type=click.Path(file_okay=False),
                help="Output directory. Defaults to $PROFPIPE_OUT or the user data directory.",
            ),
            click.option(
                "--seed",
                type=int,
                help=f"Seed for every stochastic component. Default: {config.default_seed}",
            ),
        ],
    )


def data_option(f):
    return click.option(
        "-d",
        "--data",
        "data_dir",
        type=click.Path(file_okay=False),
        help="Dataset directory holding train.jsonl and val.jsonl. Defaults to the output directory.",
    )(f)


def train_options(f):
    return _apply_options(
        f,
        [
            click.option("--epochs", type=int, help="Training epochs."),
            click.option("--lr", "learning_rate", type=float, help="AdamW learning rate."),
            click.option("--weight-decay", type=float, help="AdamW decoupled weight decay."),
            click.option("--batch-size", type=int, help="Mini-batch size."),
            click.option(
                "--architecture",
                type=click.Choice([a.value for a in EncoderArchitecture]),
                help="Stand-in encoder architecture.",
            ),
            click.option("--feature-dim", type=int, help="Encoder output dimension D."),
            click.option("--crop-size", type=int, help="Spatial crop size after resizing."),
        ],
    )


def _training_overrides(epochs, learning_rate, weight_decay, batch_size, architecture, feature_dim, crop_size):
    return {
        "train": {
            "epochs": epochs,
            "learning_rate": learning_rate,
            "weight_decay": weight_decay,
            "batch_size": batch_size,
        },
        "encoder": {"architecture": architecture, "feature_dim": feature_dim, "crop_size": crop_size},
    }


def resolve_run_config(
    config_file: Optional[str], output_dir: Optional[str], seed: Optional[int], overrides: Dict[str, Any]
) -> RunConfig:
    flags = utils.deep_update(overrides, {"output_dir": output_dir})

    if seed is not None:
        seeded = {"seed": seed}
        flags = utils.deep_update(
            flags, {"dataset": seeded, "encoder": seeded, "train": seeded, "recognizer": seeded}
        )

    run_config = load_run_config(config_file, flags)
    if run_config.output_dir is None:
        run_config = run_config.copy(update={"output_dir": default_output_directory()})

    return run_config


@click.group(APP_NAME, invoke_without_command=True)
@click.option(
    "-V",
    "--version",
    "show_version",
    is_flag=True,
    help="Print project version and exit.",
)
@click.option(
    "--color/--no-color",
    default=True,
    help="Enable colored output. Default: True",
)
@click.pass_context
def main(ctx, show_version, color):
    if show_version:
        print(f"{APP_NAME} {get_version()}")
        ctx.exit()

    config.color = color
    _init_logger()

    if not ctx.invoked_subcommand:
        print(ctx.get_help())
        ctx.exit(1)


@main.command("gen-data")
@run_options
@click.option("--clips-per-scenario", type=int, help="Clips per scenario, a multiple of 4.")
@click.option("--frames-per-stream", type=int, help="Frames per view stream.")
@click.option("--frame-size", type=int, nargs=2, help="Frame height and width.")
@click.option("--signal-strength", type=float, help="Proficiency signal amplitude.")
@click.option("--scenario-strength", type=float, help="Scenario signal amplitude.")
@click.option("--noise-std", type=float, help="Gaussian pixel noise standard deviation.")
@click.option("--pattern-jitter", type=float, help="Level-independent distractor amplitude.")
@click.option(
    "--proficiency-coding",
    type=click.Choice([c.value for c in ProficiencyCoding]),
    help="Whether proficiency amplitudes are shared or rotated per scenario.",
)
@click.option("--val-fraction", type=float, help="Validation share of the stratified split.")
@click.option("--workers", type=int, help="Parallel clip rendering workers.")
@click.option("--split/--no-split", default=True, help="Write train.jsonl and val.jsonl. Default: True")
def gen_data(
    config_file,
    output_dir,
    seed,
    clips_per_scenario,
    frames_per_stream,
    frame_size,
    signal_strength,
    scenario_strength,
    noise_std,
    pattern_jitter,
    proficiency_coding,
    val_fraction,
    workers,
    split,
):
    """
    Generate a synthetic multi-view dataset.
    """
    overrides = {
        "dataset": {
            "clips_per_scenario": clips_per_scenario,
            "frames_per_stream": frames_per_stream,
            "frame_size": list(frame_size) if frame_size else None,
            "signal_strength": signal_strength,
            "scenario_strength": scenario_strength,
            "noise_std": noise_std,
            "pattern_jitter": pattern_jitter,
            "proficiency_coding": proficiency_coding,
            "workers": workers,
        },
        "val_fraction": val_fraction,
    }
    run_config = resolve_run_config(config_file, output_dir, seed, overrides)

    Runner("gen-data", run_config).generate_data(split=split)


@main.command("train-m1")
@run_options
@data_option
@train_options
@click.option("--alpha", type=float, help="Weight of the proficiency loss. Default: 0.5")
@click.option(
    "--view-fusion",
    type=click.Choice([f.value for f in ViewFusion]),
    help="How the five views are combined.",
)
def train_m1(config_file, output_dir, seed, data_dir, alpha, view_fusion, **training):
    """
    Train the multi-task model (Method 1).
    """
    overrides = utils.deep_update(_training_overrides(**training), {"train": {"alpha": alpha}})
    overrides.update({"view_fusion": view_fusion, "data_dir": data_dir})
    run_config = resolve_run_config(config_file, output_dir, seed, overrides)

    Runner("train-m1", run_config).train_multitask()


@main.command("train-m2")
@run_options
@data_option
@train_options
@click.option("--workers", type=int, help="Cells trained in parallel per scenario.")
@click.option("--pooled", is_flag=True, help="Train one pooled classifier for every cell instead.")
def train_m2(config_file, output_dir, seed, data_dir, workers, pooled, **training):
    """
    Train the 6 x 5 classifier bank (Method 2).
    """
    overrides = utils.deep_update(_training_overrides(**training), {"dataset": {"workers": workers}})
    overrides["data_dir"] = data_dir
    run_config = resolve_run_config(config_file, output_dir, seed, overrides)

    Runner("train-m2", run_config).train_bank(pooled=pooled)


@main.command("eval")
@run_options
@data_option
@train_options
@click.option(
    "--method",
    type=click.Choice(["m1", "m2"]),
    default="m2",
    help="Method to evaluate. Default: m2",
)
@click.option(
    "--strategy",
    type=click.Choice(["ego", "exo", "combined", "all"]),
    default="all",
    help="Aggregation strategy for Method 2. Default: all",
)
@click.option(
    "--recognizer",
    type=click.Choice(["oracle", "noisy", "probe"]),
    help="Scenario recognizer for Method 2. Default: oracle",
)
@click.option(
    "--confusion",
    "confusion_file",
    type=click.Path(dir_okay=False),
    help="JSON confusion matrix for the noisy recognizer.",
)
def eval_(config_file, output_dir, seed, data_dir, method, strategy, recognizer, confusion_file, **training):
    """
    Evaluate a trained method on the validation split.
    """
    strategies = AggregationStrategy.from_short_name(strategy)
    overrides = _training_overrides(**training)
    overrides.update({"data_dir": data_dir, "strategies": [s.value for s in strategies]})
    overrides["recognizer"] = {
        "mode": RecognizerMode.from_short_name(recognizer).value if recognizer else None,
        "confusion": parse_confusion_file(confusion_file) if confusion_file else None,
    }
    run_config = resolve_run_config(config_file, output_dir, seed, overrides)

    Runner("eval", run_config).evaluate(method, run_config.strategies)


@main.command()
@click.option("--m1", "m1_path", required=True, type=click.Path(dir_okay=False), help="Method 1 predictions.")
@click.option("--m2", "m2_path", required=True, type=click.Path(dir_okay=False), help="Method 2 predictions.")
@run_options
def compare(m1_path, m2_path, config_file, output_dir, seed):
    """
    Compare Method 1 and Method 2 prediction files.
    """
    run_config = resolve_run_config(config_file, output_dir, seed, {})

    print(Runner("compare", run_config).compare(m1_path, m2_path))


@main.command("loss-plot")
@click.option("--curves", "curves_path", required=True, type=click.Path(dir_okay=False), help="Loss curves CSV.")
@run_options
def loss_plot(curves_path, config_file, output_dir, seed):
    """
    Render loss curves from a CSV file.
    """
    run_config = resolve_run_config(config_file, output_dir, seed, {})

    Runner("loss-plot", run_config).plot_loss_curves(curves_path)


@main.command()
@click.argument("name", type=click.Choice(sorted(EXPERIMENTS)))
@click.option(
    "-o",
    "--out",
    "output_dir",
    type=click.Path(file_okay=False),
    help="Output directory. Defaults to $PROFPIPE_OUT or the user data directory.",
)
@click.option("--seed", type=int, default=config.default_seed, help="Experiment seed. Default: 0")
@click.option("--clips-per-scenario", type=int, help="Clips per scenario.")
@click.option("--epochs", type=int, help="Training epochs.")
@click.option("--lr", "learning_rate", type=float, help="AdamW learning rate.")
def experiment(name, output_dir, seed, clips_per_scenario, epochs, learning_rate):
    """
    Run one of the designed synthetic experiments.
    """
    settings = ExperimentSettings.parse_obj(
        utils.deep_update(
            {"seed": seed},
            {"clips_per_scenario": clips_per_scenario, "epochs": epochs, "learning_rate": learning_rate},
        )
    )
    output_dir = os.path.abspath(output_dir or default_output_directory())
    utils.write_text(
        os.path.join(output_dir, name, config.run_config_file_name), settings.json(indent=2, sort_keys=True) + "\n"
    )

    handler = utils.attach_run_log(utils.ensure_directory(output_dir), f"experiment-{name}")
    try:
        result = run_experiment(name, settings, output_dir)
    finally:
        utils.detach_run_log(handler)

    document = result.json(indent=2, sort_keys=True)
    utils.write_text(os.path.join(output_dir, name, "result.json"), document + "\n")
    print(document)


def run_cli(argv: Optional[List[str]] = None) -> int:
    """
    Runs one subcommand and maps the outcome to an exit code: 0 success, 1 usage or validation error, 2 failure.
    """
    load_dotenv()

    try:
        rv = main.main(args=argv, prog_name=APP_NAME, standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        return 1
    except ValueError as e:
        logger.error(str(e))
        return 1
    except Exception as e:
        logger.exception(str(e))
        return 2

    return rv if isinstance(rv, int) else 0


def entrypoint():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
