import os
import csv
import logging
import sys
sys.path.append(os.getcwd())
from src import logger as rig_logger
from src.logger import LOSS_COLUMNS, log_losses, setup_logging


def test_logging_system(tmp_path):
    print("🧪 Testing Logging System...")

    # 1. Setup
    setup_logging(str(tmp_path / "logs"))
    app_dir = rig_logger.APP_LOG_DIR
    stats_file = rig_logger.STATS_FILE

    # 2. Verify Directories
    assert app_dir.startswith(str(tmp_path)), "Log directory should follow the argument"
    assert os.path.exists(app_dir), "App log directory should exist"
    assert os.path.exists(os.path.join(app_dir, "app.log")), "App log file should exist"
    assert os.path.exists(stats_file), "Stats file should exist"

    print("✅ Directories and files created.")

    # 3. Test App Logging
    test_message = "Test log message"
    logging.getLogger("src.test").info(test_message)
    for handler in logging.getLogger().handlers:
        handler.flush()

    with open(os.path.join(app_dir, "app.log"), "r") as f:
        assert test_message in f.read(), "App log should contain test message"

    print("✅ App logging works.")

    # 4. Test Loss Logging
    log_losses(3, {"render_l2": 0.125, "recon_cyclic": 0.5, "total": 0.625})

    with open(stats_file, "r") as f:
        rows = list(csv.reader(f))
    # Header + one row
    assert rows[0] == ["step"] + LOSS_COLUMNS
    assert len(rows) == 2, "Stats file should have header and data"
    row = dict(zip(rows[0], rows[1]))
    assert row["step"] == "3"
    assert float(row["render_l2"]) == 0.125
    assert float(row["det"]) == 0.0
    assert float(row["total"]) == 0.625

    print("✅ Loss logging works.")


def test_setup_is_idempotent(tmp_path):
    setup_logging(str(tmp_path / "a"))
    setup_logging(str(tmp_path / "b"))
    ours = [h for h in logging.getLogger().handlers if getattr(h, "_rigsplat", False)]
    assert len(ours) == 1, "Repeated setup must not stack handlers"


def test_loss_row_to_explicit_path(tmp_path):
    path = tmp_path / "custom.csv"
    log_losses(0, {"distill": 2.0}, str(path))
    log_losses(1, {"distill": 1.0}, str(path))
    rows = list(csv.reader(path.open()))
    assert len(rows) == 3
    assert rows[2][LOSS_COLUMNS.index("distill") + 1] == "1.0"


if __name__ == "__main__":
    import tempfile
    import pathlib
    test_logging_system(pathlib.Path(tempfile.mkdtemp()))
