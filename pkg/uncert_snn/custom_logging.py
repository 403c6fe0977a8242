import os
import logging
import sys

from rich.theme import Theme
from rich.logging import RichHandler
from rich.console import Console
from rich.pretty import install as pretty_install
from rich.traceback import install as traceback_install

log = None
console = None


def get_console() -> Console:
    """Return the shared rich console, creating it on first use."""
    global console

    if console is None:
        console = Console(
            log_time=True,
            log_time_format="%H:%M:%S-%f",
            theme=Theme(
                {
                    "traceback.border": "black",
                    "traceback.border.syntax_error": "black",
                    "inspect.value.border": "black",
                }
            ),
        )
    return console


def _attach_file_handler(logger: logging.Logger, log_file: str, clean: bool):
    path = os.path.abspath(log_file)
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == path:
            return
    try:
        if clean and os.path.isfile(path):
            os.remove(path)
    except OSError:
        pass
    fh = logging.FileHandler(path, mode="a", encoding="utf-8")
    fh.setFormatter(
        logging.Formatter("%(asctime)s | %(levelname)s | %(pathname)s | %(message)s")
    )
    fh.setLevel(logging.DEBUG)
    logger.addHandler(fh)


def setup_logging(clean=False, debug=False, log_file=None):
    """
    Configure the engine logger once and hand back the same instance afterwards.

    Later calls may still raise the console level to debug or attach a log file,
    which is how the CLI upgrades the logger that modules grabbed at import time.

    Parameters:
    - clean (bool): Remove an existing log file before appending to it.
    - debug (bool): Emit debug records on the console.
    - log_file (str): Optional plain-text log file, appended in UTF-8.

    Returns:
    logging.Logger: the "uncert" logger.
    """
    global log

    if log is None:
        log = logging.getLogger("uncert")
        log.setLevel(logging.DEBUG)
        log.propagate = False

        rich_console = get_console()
        if sys.stderr.isatty():
            pretty_install(console=rich_console)
            traceback_install(
                console=rich_console,
                extra_lines=1,
                width=rich_console.width,
                word_wrap=False,
                indent_guides=False,
                suppress=[],
            )
        rh = RichHandler(
            show_time=True,
            omit_repeated_times=False,
            show_level=True,
            show_path=False,
            markup=False,
            rich_tracebacks=True,
            log_time_format="%H:%M:%S-%f",
            level=logging.DEBUG if debug else logging.INFO,
            console=rich_console,
        )
        rh.set_name("uncert-console")
        log.addHandler(rh)
    elif debug:
        for handler in log.handlers:
            if isinstance(handler, RichHandler):
                handler.setLevel(logging.DEBUG)

    if log_file is not None:
        _attach_file_handler(log, log_file, clean)

    return log
