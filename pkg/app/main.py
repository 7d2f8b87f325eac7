import logging
import sys
from typing import Optional, Sequence

import click

from app.commands import EXIT_USAGE, router
from app.config import settings


@click.group(name="elssa", help="2D-SSA decomposition and analysis of electroluminescence images")
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default=settings.log_level,
    show_default=True,
)
@click.version_option("1.0.0", prog_name="elssa")
def cli(log_level: str) -> None:
    logging.basicConfig(
        level=log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


# Include subcommands
for command in router.commands.values():
    cli.add_command(command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return the process exit code"""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="elssa", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(main())
