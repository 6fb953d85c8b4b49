"""Small shared helpers: hashing, canonical JSON, seed mixing, TSV I/O."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

_MIX = 6364136223846793005  # LCG multiplier, used only to decorrelate derived seeds


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def mix_seed(seed: int, index: int) -> int:
    """Derive a stream seed from a base seed and an index, deterministically."""
    return (seed * _MIX + index * 2654435761 + 1) % (1 << 63)


def write_tsv(path: Path | str, header: list[str], rows: list[list], comments: list[str] | None = None) -> None:
    lines = [f"# {c}" for c in (comments or [])]
    lines.append("\t".join(header))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"row {i} has {len(row)} fields, header has {len(header)}")
        lines.append("\t".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tsv(path: Path | str) -> tuple[list[str], list[list[str]], list[str]]:
    """Returns (header, rows, comment lines without the leading '# ')."""
    header: list[str] = []
    rows: list[list[str]] = []
    comments: list[str] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif not header:
            header = line.split("\t")
        else:
            rows.append(line.split("\t"))
    return header, rows, comments
