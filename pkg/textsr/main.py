"""
Main application file
Entry point of the textsr command line
Loads configuration, sets up logging and registers the command modules
"""

import logging
import secrets
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click

from textsr.checkpoints import CheckpointError
from textsr.config import Config, ConfigError, Settings, dump_config, load_config, parse_assignments


logger = logging.getLogger("textsr")


@dataclass
class Invocation:
    """
    Everything a command needs from the global options
    """

    command: str
    config_path: str
    seed: int
    overrides: dict = field(default_factory=dict)
    config: Config = field(default_factory=Config)
    checkpoint_dir: Path = Path(Settings.CHECKPOINT_DIR)
    device: str = Settings.DEVICE

    def path(self, name):
        """
        Location under the checkpoint directory, for reading
        """

        return self.checkpoint_dir / name

    def output(self, name):
        """
        Location under the checkpoint directory, for writing
        Creates the checkpoint directory on first use
        """

        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)

        return self.path(name)

    def corpus(self, manifest=None):
        """
        Returns (train, held_out) samples from a manifest or the synthetic corpus
        """

        from textsr.services.data import load_manifest, split_holdout, synthetic_corpus

        # A manifest is standardized to the LR/HR sizes
        if manifest:
            return split_holdout(load_manifest(manifest, standardize=True), self.config.holdout_fraction)

        return synthetic_corpus(self.config, Settings.FONT_PATH)


def configure_logging(level):
    logging.basicConfig(
        level=level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def create_cli():
    """
    Command factory
    Creates the command group and registers the command modules
    """

    @click.group(
        name="textsr",
        help=(
            "Recognition-guided latent diffusion for scene-text super-resolution.\n\n"
            "Configuration precedence: preset or --config file < --set key=value."
        ),
    )
    @click.option("--config", "config_path", default=None,
                  help="Preset (default, desk) or key=value file. Without it the desk preset is used.")
    @click.option("--seed", type=int, default=None, help="Run seed; a random seed is drawn and echoed if omitted.")
    @click.option("--checkpoint-dir", type=click.Path(file_okay=False), default=Settings.CHECKPOINT_DIR,
                  show_default=True, help="Directory for checkpoints and every output file.")
    @click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE",
                  help="Override one config key; may be repeated. Takes precedence over --config.")
    @click.option("--device", default=Settings.DEVICE, show_default=True, help="Torch device.")
    @click.option("--log-level", default=Settings.LOG_LEVEL, show_default=True,
                  type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
    @click.pass_context
    def cli(ctx, config_path, seed, checkpoint_dir, assignments, device, log_level):
        configure_logging(log_level)

        # Load configuration: preset or file first, then --set values
        overrides = parse_assignments(assignments)
        config = load_config(config_path, overrides)

        # Draw a seed when none is given; it is always echoed
        if seed is None:
            seed = secrets.randbelow(2 ** 31)

        ctx.obj = Invocation(
            command=ctx.invoked_subcommand,
            config_path=config_path,
            seed=seed,
            overrides=overrides,
            config=config,
            checkpoint_dir=Path(checkpoint_dir),
            device=device,
        )

        click.echo(f"seed: {seed}", err=True)
        logger.info("command %s, seed %d", ctx.invoked_subcommand, seed)
        logger.info("effective config:\n%s", dump_config(config).rstrip())

    # Register command modules
    from textsr.commands.tools import tool_commands
    from textsr.commands.training import training_commands

    for command in training_commands + tool_commands:
        cli.add_command(command)

    return cli


def dispatch(argv=None):
    """
    Runs exactly one command and returns the process exit code
    0 on success, 2 on usage errors, 1 on any other error
    """

    cli = create_cli()

    # Usage errors exit with 2, domain errors with a one-line message and 1
    try:
        result = cli.main(args=argv, prog_name="textsr", standalone_mode=False)

    except click.UsageError as error:
        error.show()
        return 2

    except click.ClickException as error:
        error.show()
        return error.exit_code

    except click.Abort:
        click.echo("aborted", err=True)
        return 1

    except (ConfigError, CheckpointError, FloatingPointError, RuntimeError, ValueError, OSError) as error:
        click.echo(f"error: {error}", err=True)
        return 1

    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(dispatch())
