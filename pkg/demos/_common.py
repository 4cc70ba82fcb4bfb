"""Shared setup for the demo scripts: the default configuration and the
cached workbench (trained on first use, roughly eight minutes on one core)."""

import os
from pathlib import Path

from semadv.config import parse_config
from semadv.workbench import build_workbench

HERE = Path(__file__).resolve().parent
CACHE = Path(os.environ.get("SEMADV_CACHE", HERE.parent / ".cache" / "workbench"))
OUT = HERE / "out"


def setup():
    config = parse_config(None)
    bench = build_workbench(config, cache_dir=CACHE)
    OUT.mkdir(exist_ok=True)
    return config, bench
