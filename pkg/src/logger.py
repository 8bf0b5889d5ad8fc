import csv
import logging
import os
from typing import Mapping, Optional

from rich.logging import RichHandler

# Define log directories
LOG_DIR = "logs"
APP_LOG_DIR = os.path.join(LOG_DIR, "app")
STATS_LOG_DIR = os.path.join(LOG_DIR, "stats")
STATS_FILE = os.path.join(STATS_LOG_DIR, "loss_log.csv")

# Frozen column order of the loss log
LOSS_COLUMNS = [
    "render_l2",
    "perceptual",
    "recon_original",
    "recon_cyclic",
    "depth_l1",
    "distill",
    "det",
    "map",
    "motion",
    "plan",
    "total",
]


def setup_logging(log_dir: Optional[str] = None, verbose: bool = False, console: bool = False):
    """Configures the logging system.

    Application events go to ``<log_dir>/app/app.log``; the loss log lives in
    ``<log_dir>/stats/loss_log.csv``. A rich console handler is attached only when
    ``console`` is set (the CLI does, tests do not).
    """
    global APP_LOG_DIR, STATS_LOG_DIR, STATS_FILE

    if log_dir is not None:
        APP_LOG_DIR = os.path.join(log_dir, "app")
        STATS_LOG_DIR = os.path.join(log_dir, "stats")
        STATS_FILE = os.path.join(STATS_LOG_DIR, "loss_log.csv")

    # Create directories if they don't exist
    for directory in [APP_LOG_DIR, STATS_LOG_DIR]:
        os.makedirs(directory, exist_ok=True)

    log_file = os.path.join(APP_LOG_DIR, "app.log")
    handlers = [logging.FileHandler(log_file)]
    handlers[0].setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
    if console:
        rich_handler = RichHandler(show_path=False, markup=False)
        rich_handler.setLevel(logging.INFO if verbose else logging.WARNING)
        handlers.append(rich_handler)

    root = logging.getLogger()
    # Re-running setup (tests, repeated CLI calls in one process) must not stack handlers
    for handler in list(root.handlers):
        if getattr(handler, "_rigsplat", False):
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        handler._rigsplat = True
        root.addHandler(handler)
    root.setLevel(logging.INFO)

    # Initialize stats file with header if it doesn't exist
    if not os.path.exists(STATS_FILE):
        with open(STATS_FILE, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step"] + LOSS_COLUMNS)

    logging.getLogger(__name__).info("Logging initialized.")


def log_losses(step: int, terms: Mapping[str, float], path: Optional[str] = None):
    """Appends one loss row (named terms plus total) to the stats CSV."""
    target = path or STATS_FILE
    try:
        new_file = not os.path.exists(target)
        with open(target, "a", newline="") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(["step"] + LOSS_COLUMNS)
            writer.writerow([step] + [repr(float(terms.get(name, 0.0))) for name in LOSS_COLUMNS])
    except Exception as e:
        logging.getLogger(__name__).error(f"Failed to log loss row: {e}")
