import logging
import sys

from rich.panel import Panel

from app.cli.router import router
from app.core.config import settings
from app.core.exceptions import TriadLabError
from app.core.logging import configure_logging, console

logger = logging.getLogger(__name__)


def _failure_panel(exception: Exception) -> Panel:
    return Panel(
        f"{exception}",
        title=exception.__class__.__name__,
        border_style="red",
    )


def main(argv: list[str] | None = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    args = router.parse(argv)
    configure_logging(args.log_level)
    command = " ".join(value for key, value in sorted(vars(args).items()) if key.startswith("command") and value)
    console.print(Panel(command, title=settings.APP_TITLE, border_style="green"))

    try:
        args.handler(args)
    except TriadLabError as exception:
        console.print(_failure_panel(exception))
        logger.debug("Command failed", exc_info=exception)
        return exception.exit_code
    except Exception as exception:
        # anything else is a bug; keep the traceback
        console.print(_failure_panel(exception))
        logger.exception("Unhandled error")
        return 1

    console.print(Panel(f"{command} finished", title=settings.APP_TITLE, border_style="red"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
