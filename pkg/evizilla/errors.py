from __future__ import annotations

from pathlib import Path


class EvizillaError(Exception):
    """Root of every error raised on purpose by the package."""


class InputError(EvizillaError, ValueError):
    """Caller handed in something the operation cannot accept."""


class ParseError(InputError):
    """Malformed dataset or config text."""

    def __init__(self, message: str, *, path: Path | str | None = None, line_number: int | None = None):
        self.path = Path(path) if path is not None else None
        self.line_number = line_number
        where = ""
        if self.path is not None:
            where = f"{self.path}"
            if line_number is not None:
                where += f":{line_number}"
            where += ": "
        elif line_number is not None:
            where = f"line {line_number}: "
        super().__init__(f"{where}{message}")


class DomainError(InputError):
    """Special-function argument outside the positive reals."""


class DogmaticFusionError(InputError):
    """Cumulative fusion of two opinions that both carry zero uncertainty."""


class TrainingError(EvizillaError, RuntimeError):
    """Optimisation diverged."""

    def __init__(self, message: str, *, epoch: int):
        self.epoch = int(epoch)
        super().__init__(f"epoch {self.epoch}: {message}")


__all__ = [
    "DogmaticFusionError",
    "DomainError",
    "EvizillaError",
    "InputError",
    "ParseError",
    "TrainingError",
]
