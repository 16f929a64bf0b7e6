"""Plain-text ``.pts`` landmark files (1-indexed coordinates on disk)."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..landmarks import LandmarkSet

_HEADER = re.compile(r"^\s*(\w+)\s*:\s*(\S+)\s*$")


def parse_pts(text: str) -> LandmarkSet:
    lines = text.splitlines()
    header: dict[str, str] = {}
    i = 0
    while i < len(lines) and lines[i].strip() != "{":
        line = lines[i].strip()
        if line:
            m = _HEADER.match(line)
            if not m:
                raise ParseError(f"malformed header line {line!r}", i + 1)
            header[m.group(1)] = m.group(2)
        i += 1
    if "version" not in header or "n_points" not in header:
        raise ParseError("header must declare version and n_points", min(i + 1, len(lines)) or 1)
    try:
        n = int(header["n_points"])
    except ValueError:
        raise ParseError(f"n_points is not an integer: {header['n_points']!r}", 2) from None
    if i == len(lines):
        raise ParseError("missing '{'", i)
    rows = []
    i += 1
    while i < len(lines) and lines[i].strip() != "}":
        line = lines[i].strip()
        if line:
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ParseError(f"expected 2 or 3 coordinates, got {len(parts)}", i + 1)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"non-numeric token in {line!r}", i + 1) from None
        i += 1
    if i == len(lines):
        raise ParseError("missing '}'", i)
    if len(rows) != n:
        raise ParseError(f"n_points declares {n} points but {len(rows)} were found", i + 1)
    if len({len(r) for r in rows}) > 1:
        raise ParseError("mixed 2- and 3-coordinate rows", i + 1)
    pts = np.asarray(rows, dtype=np.float64).reshape(n, -1)
    pts[:, :2] -= 1.0
    return LandmarkSet(pts)


def format_pts(landmarks: LandmarkSet) -> str:
    out = ["version: 1", f"n_points: {len(landmarks)}", "{"]
    for row in landmarks.points:
        vals = [row[0] + 1.0, row[1] + 1.0, *row[2:]]
        out.append(" ".join(repr(float(v)) for v in vals))
    out.append("}")
    return "\n".join(out) + "\n"


def read_pts(path) -> LandmarkSet:
    return parse_pts(Path(path).read_text(encoding="utf-8"))


def write_pts(path, landmarks: LandmarkSet) -> None:
    Path(path).write_text(format_pts(landmarks), encoding="utf-8", newline="\n")
