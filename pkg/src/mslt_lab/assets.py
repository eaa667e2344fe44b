"""Access to files shipped with the package (default probes, demo corpus)."""

from __future__ import annotations

from pathlib import Path

_ASSET_DIR = Path(__file__).parent / "assets"


def asset_path(name):
    path = _ASSET_DIR / name
    if not path.exists():
        raise FileNotFoundError(f"packaged asset not found: {path}")
    return path
