"""Line-delimited record files and key=value config files.

Every persisted table in this package (manifests, training logs, metric
profiles, comparison tables) is a text file with one JSON object per line.
Config files are plain ``key=value`` lines; ``#`` starts a comment.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

from .validation import FormatError


def write_records(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: bad record: {exc}") from exc
    return out


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(mapping: dict) -> str:
    lines = [f"{k}={mapping[k]}" for k in sorted(mapping)]
    return "\n".join(lines) + "\n"


def write_config_snapshot(out_dir, mapping: dict, name: str = "config.resolved.cfg") -> Path:
    """Write the fully resolved configuration beside a run's outputs.

    The snapshot is itself a loadable config file, so a run can be repeated
    from it verbatim.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(format_config(mapping), encoding="utf-8")
    return path


def output_root() -> Path:
    """Default root for relative output paths (SEFDET_OUT, else cwd)."""
    return Path(os.environ.get("SEFDET_OUT", "."))
