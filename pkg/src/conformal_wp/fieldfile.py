"""Binary field files: a short text header followed by little-endian float64 data.

Header lines (ASCII, ``\\n`` terminated)::

    dim=3
    shape=16,16,16
    extent=1.0,1.0,1.0
    topology=periodic
    kind=scalar
    #end

Values follow row-major with components innermost; symmetric matrices store
their lower triangle in row order.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .fields import GridSpec, ScalarField, SymMatrixField, VectorField

KINDS = {"scalar": ScalarField, "vector": VectorField, "symmat": SymMatrixField}


class FieldFileError(ValueError):
    pass


def encode_field(f) -> bytes:
    g = f.grid
    header = (
        f"dim={g.dim}\n"
        f"shape={','.join(str(s) for s in g.shape)}\n"
        f"extent={','.join(repr(float(e)) for e in g.extent)}\n"
        f"topology={g.topology}\n"
        f"kind={f.kind}\n"
        "#end\n"
    )
    return header.encode("ascii") + np.ascontiguousarray(f.values, dtype="<f8").tobytes()


def decode_field(data: bytes):
    marker = b"#end\n"
    pos = data.find(marker)
    if pos < 0:
        raise FieldFileError("missing '#end' header terminator")
    meta = {}
    for line in data[:pos].decode("ascii").splitlines():
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FieldFileError(f"malformed header line {line!r}")
        meta[key.strip()] = val.strip()
    try:
        grid = GridSpec(
            dim=int(meta["dim"]),
            shape=tuple(int(s) for s in meta["shape"].split(",")),
            extent=tuple(float(e) for e in meta["extent"].split(",")),
            topology=meta["topology"],
        )
        kind = meta["kind"]
    except KeyError as exc:
        raise FieldFileError(f"header is missing {exc.args[0]!r}") from None
    if kind not in KINDS:
        raise FieldFileError(f"unknown field kind {kind!r}")
    cls = KINDS[kind]
    n = grid.dim
    ncomp = {"scalar": 1, "vector": n, "symmat": n * (n + 1) // 2}[kind]
    payload = np.frombuffer(data[pos + len(marker):], dtype="<f8")
    expected = grid.size * ncomp
    if payload.size != expected:
        raise FieldFileError(f"expected {expected} values, found {payload.size}")
    shape = grid.shape if kind == "scalar" else grid.shape + (ncomp,)
    return cls(grid, payload.astype(np.float64).reshape(shape))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_field(path: str | os.PathLike, f) -> None:
    atomic_write_bytes(path, encode_field(f))


def read_field(path: str | os.PathLike):
    return decode_field(Path(path).read_bytes())
