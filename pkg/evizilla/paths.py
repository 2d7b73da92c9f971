from __future__ import annotations

from pathlib import Path
import os


APP_NAME = "evizilla"


def bundled_root() -> Path:
    return Path(__file__).resolve().parent.parent


def data_root() -> Path:
    # EVIZILLA_DATA_DIR wins; otherwise ./data next to where the command runs.
    env_path = os.environ.get("EVIZILLA_DATA_DIR", "").strip()
    if env_path:
        return Path(env_path).expanduser()
    return Path.cwd() / "data"


def _dataset_candidates(name: str) -> list[Path]:
    """Return candidate locations for a named dataset in priority order."""
    out: list[Path] = [
        Path(name).expanduser(),
        data_root() / name,
        data_root() / name.lower(),
        bundled_root() / "data" / name,
        bundled_root() / "data" / name.lower(),
    ]
    uniq = []
    seen = set()
    for p in out:
        s = str(p)
        if s in seen:
            continue
        seen.add(s)
        uniq.append(p)
    return uniq


def resolve_dataset_path(name: str | Path) -> Path:
    """Map a dataset argument to a path.

    A path that exists (file, directory, or a citation prefix whose
    ``.content`` file exists) is returned as-is; a bare name such as ``cora``
    is looked up under the data root. The first candidate is returned when
    nothing matches so the loader can report the missing file.
    """
    text = str(name).strip()
    candidates = _dataset_candidates(text)
    for p in candidates:
        try:
            if p.exists() or p.with_name(p.name + ".content").exists():
                return p
        except OSError:
            continue
    return candidates[0]


def ensure_out_dir(path: str | Path) -> Path:
    p = Path(path).expanduser()
    p.mkdir(parents=True, exist_ok=True)
    return p


__all__ = [
    "APP_NAME",
    "bundled_root",
    "data_root",
    "ensure_out_dir",
    "resolve_dataset_path",
]
