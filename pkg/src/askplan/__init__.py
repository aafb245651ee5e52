"""Self-questioning task planner harness: plan model, symbolic household
simulator, prompt generators, model gateway, episode engine, plan matching
and a benchmark CLI."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def asset_path(relative: str) -> Path:
    """Path to a bundled data file, e.g. ``tasks/mini7.json``."""
    return Path(str(resources.files("askplan").joinpath(relative)))
