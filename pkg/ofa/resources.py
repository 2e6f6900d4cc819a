import json
import sys
from pathlib import Path


def resource_path(relative_path: str) -> str:
    # Check if running in PyInstaller bundle
    if getattr(sys, "frozen", False):
        base = Path(sys._MEIPASS)
    else:
        base = Path(__file__).resolve().parent.parent  # Go up from ofa/ to project root
    return str(base / relative_path)


def data_path(name: str) -> str:
    """Path of a file shipped in ``ofa/data``."""
    return resource_path(str(Path("ofa") / "data" / name))


def get_current_version() -> str:
    """Get the current project version from version.json."""
    try:
        with open(resource_path("version.json"), "r", encoding="utf-8") as f:
            data = json.load(f)
            return data.get("version", "0.0.0")
    except (FileNotFoundError, json.JSONDecodeError, KeyError, AttributeError):
        return "0.0.0"
