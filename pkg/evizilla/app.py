from __future__ import annotations

import faulthandler
import logging
import os
import sys
import traceback
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

from evizilla.cli import build_parser, dispatch
from evizilla.errors import InputError, TrainingError
from evizilla.paths import APP_NAME

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_TRAINING = 2

LOG_NAME = "run.log"

log = logging.getLogger("evizilla")


def _sidecar_log_path(out_dir: str | Path) -> Path:
    return Path(out_dir) / LOG_NAME


def _append_sidecar_log(path: Path | None, text: str):
    if path is None:
        return
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as f:
            f.write(text.rstrip() + "\n")
    except OSError:
        pass


def _configure_logging(level_name: str | None, sidecar: Path | None) -> list[logging.Handler]:
    """Console handler without timestamps; the sidecar log gets them. Returns the added handlers."""
    level_name = (level_name or os.environ.get("EVIZILLA_LOG_LEVEL") or "INFO").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise InputError(f"unknown log level {level_name!r}")
    log.setLevel(logging.DEBUG)

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handlers: list[logging.Handler] = [console]

    if sidecar is not None:
        sidecar.parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(sidecar, encoding="utf-8")
        fh.setLevel(min(level, logging.INFO))
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handlers.append(fh)
    for h in handlers:
        log.addHandler(h)
    return handlers


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Process entry point used by run.py; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    sidecar = _sidecar_log_path(args.out)

    try:
        handlers = _configure_logging(args.log_level, sidecar)
    except InputError as exc:
        print(f"{APP_NAME}: {exc}", file=sys.stderr)
        return EXIT_INPUT

    # Capture hard crashes (e.g., segfaults in native BLAS) into the sidecar log.
    fault_fh = None
    try:
        fault_fh = sidecar.open("a", encoding="utf-8")
        faulthandler.enable(fault_fh)
    except OSError:
        fault_fh = None
    _append_sidecar_log(sidecar, f"[{datetime.now().isoformat()}] {APP_NAME} {' '.join(sys.argv[1:] if argv is None else argv)}")

    try:
        dispatch(args)
        return EXIT_OK
    except TrainingError as exc:
        log.error("%s", exc)
        return EXIT_TRAINING
    except (InputError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except Exception:
        tb = traceback.format_exc()
        _append_sidecar_log(sidecar, tb)
        print(f"{APP_NAME}: unexpected error; details in {sidecar}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        if fault_fh is not None:
            faulthandler.disable()
            fault_fh.close()
        for h in handlers:
            log.removeHandler(h)
            h.close()


__all__ = ["EXIT_INPUT", "EXIT_OK", "EXIT_TRAINING", "main"]
