"""CSV/JSON writers and run manifests.

Data files carry no timestamps, so identical runs give identical bytes; wall
time and dates live only in ``manifest.json``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def json_text(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json_text(obj), encoding="utf-8")
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, header, rows) -> Path:
    """Comma-separated, '.' decimal, header first, LF endings, round-trip float formatting."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import scipy

    from . import __version__

    return {
        "corrlab": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
    }


def manifest(command: str, config, outputs, wall_time: float, extra=None) -> dict:
    from datetime import datetime, timezone

    out = {
        "command": command,
        "config_hash": config.config_hash(),
        "master_seed": config.master_seed,
        "config": config.to_dict(),
        "versions": versions(),
        "wall_time_s": wall_time,
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": {Path(p).name: file_digest(p) for p in outputs},
    }
    if extra:
        out.update(extra)
    return out
