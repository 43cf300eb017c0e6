"""Matrix and dipole-geometry containers plus their plain-text file formats.

Matrices are ordinary ``float64`` numpy arrays; :func:`as_matrix` is the single
validating constructor used at every public boundary.

Matrix file format::

    rows cols
    v11,v12,...
    v21,v22,...

Values are written with the shortest decimal string that round-trips, so
``read_matrix(write_matrix(m))`` reproduces ``m`` bit for bit.  Geometry files
hold one ``x,y,z`` line per dipole; row ``i`` of a source matrix belongs to
dipole ``i // 3`` along axis ``i % 3``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    FileDimensionMismatch,
    IndexOutOfRange,
    IoFailure,
    MalformedHeader,
    MatrixFormatError,
    NonFiniteValue,
)

AXES = ("x", "y", "z")


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Return ``values`` as a finite, non-empty 2-D float64 array."""
    arr = np.array(values, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatch(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return arr


def format_float(value: float) -> str:
    """Shortest round-trip decimal; integral values drop the trailing ``.0``."""
    text = repr(float(value))
    if text.endswith(".0"):
        text = text[:-2]
    return text


def _parse_cell(token: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MatrixFormatError(f"line {lineno}: cannot parse {token!r}") from None
    if not math.isfinite(value):
        raise NonFiniteValue(f"line {lineno}: non-finite value {token!r}")
    return value


def matrix_to_text(m) -> str:
    m = as_matrix(m)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines.extend(",".join(format_float(v) for v in row) for row in m)
    return "\n".join(lines) + "\n"


def matrix_from_text(text: str) -> np.ndarray:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MalformedHeader("empty matrix file")
    header = lines[0].split()
    if len(header) != 2 or not all(h.isdigit() for h in header):
        raise MalformedHeader(f"header must be two positive integers, got {lines[0]!r}")
    rows, cols = int(header[0]), int(header[1])
    if rows < 1 or cols < 1:
        raise MalformedHeader(f"header must be two positive integers, got {lines[0]!r}")

    body = lines[1:]
    cells = [[c.strip() for c in line.split(",")] for line in body]
    n_cells = sum(len(row) for row in cells)
    if len(body) != rows or n_cells != rows * cols or any(len(r) != cols for r in cells):
        raise FileDimensionMismatch(
            f"header declares {rows}x{cols} but body has {len(body)} rows / {n_cells} cells"
        )
    out = np.empty((rows, cols), dtype=np.float64)
    for i, row in enumerate(cells):
        for j, token in enumerate(row):
            out[i, j] = _parse_cell(token, i + 2)
    return out


def read_matrix(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return matrix_from_text(text)


def write_matrix(m, path) -> None:
    text = matrix_to_text(m)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class DipoleGeometry:
    """Dipole positions; each dipole owns three consecutive rows of ``B``."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise DimensionMismatch(f"coords must be (n_dipoles, 3), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise NonFiniteValue("geometry contains NaN or Inf")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n_dipoles(self) -> int:
        return self.coords.shape[0]

    @property
    def p(self) -> int:
        return 3 * self.n_dipoles

    def component_of(self, row: int) -> tuple[int, str]:
        if not 0 <= row < self.p:
            raise IndexOutOfRange(f"row {row} outside 0..{self.p - 1}")
        return row // 3, AXES[row % 3]

    def rows_of(self, dipole: int) -> range:
        if not 0 <= dipole < self.n_dipoles:
            raise IndexOutOfRange(f"dipole {dipole} outside 0..{self.n_dipoles - 1}")
        return range(3 * dipole, 3 * dipole + 3)

    def __eq__(self, other):
        if not isinstance(other, DipoleGeometry):
            return NotImplemented
        return np.array_equal(self.coords, other.coords)


def read_geometry(path) -> DipoleGeometry:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != 3:
            raise MatrixFormatError(f"{path}:{lineno}: expected 'x,y,z', got {line!r}")
        rows.append([_parse_cell(c, lineno) for c in cells])
    if not rows:
        raise MatrixFormatError(f"{path}: no dipoles")
    return DipoleGeometry(np.array(rows))


def write_geometry(geometry: DipoleGeometry, path) -> None:
    text = "".join(",".join(format_float(v) for v in xyz) + "\n" for xyz in geometry.coords)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Forward operator ``X`` (n x p), data ``Y`` (n x s) and dipole geometry."""

    X: np.ndarray
    Y: np.ndarray
    geometry: DipoleGeometry
    sample_rate_hz: float = 355.0

    def __post_init__(self):
        X = as_matrix(self.X, "X")
        Y = as_matrix(self.Y, "Y")
        if X.shape[0] != Y.shape[0]:
            raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if X.shape[1] != self.geometry.p:
            raise DimensionMismatch(
                f"X has {X.shape[1]} columns but geometry implies p = {self.geometry.p}"
            )
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ConfigError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def s(self) -> int:
        return self.Y.shape[1]


def dumps_json(obj) -> str:
    """Deterministic JSON text (floats keep their round-trip repr)."""
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_json(obj, path) -> None:
    try:
        Path(path).write_text(dumps_json(obj))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc
    return path
