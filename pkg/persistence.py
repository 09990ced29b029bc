# persistence.py
"""
Result files. Every file carries the schema number, the config hash and the
code version:

* CSV: `# schema=1`, `# config_hash=...`, `# version=...` header lines, the
  table, then optional `# verdict name=true|false|skipped` footer lines.
* JSON: top-level `schema`, `config_hash`, `version` fields; complex arrays as
  {"real": [...], "imag": [...], "shape": [...]}.
* gnuplot `matrix nonuniform` text for Husimi densities.
* Binary container for states and sparse operators: magic PLAB, u32 format
  version, 4-byte kind (STAT or CSRM), 16-byte config hash, u32 ndim, u64
  shape, then little-endian complex128 data (CSR adds int64 indices/indptr).
"""

# Standard library
import io
import json
import logging
import os
import struct
from typing import Any, Dict, Optional, Tuple

# Third-party libraries
import numpy as np
import pandas as pd
from scipy import sparse

# Local
from config import SCHEMA, VERSION
from errors import ValidationError

MAGIC = b"PLAB"
FORMAT_VERSION = 1
KIND_STATE = b"STAT"
KIND_OPERATOR = b"CSRM"


def _ensure_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


# -------------------- CSV --------------------
def write_csv(frame: pd.DataFrame, path: str, config_hash: str, verdicts: Optional[Dict[str, str]] = None):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# schema={SCHEMA}\n# config_hash={config_hash}\n# version={VERSION}\n")
        frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
        for name, verdict in (verdicts or {}).items():
            f.write(f"# verdict {name}={verdict}\n")
    logging.debug(f"Wrote {len(frame)} rows to {path}")


def read_csv(path: str) -> Tuple[pd.DataFrame, Dict[str, str], Dict[str, str]]:
    """Return (table, header fields, verdicts)."""
    header, verdicts, body = {}, {}, []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.startswith("# verdict "):
                name, _, value = line[len("# verdict "):].strip().partition("=")
                verdicts[name] = value
            elif line.startswith("# "):
                key, _, value = line[2:].strip().partition("=")
                header[key] = value
            else:
                body.append(line)
    return pd.read_csv(io.StringIO("".join(body))), header, verdicts


# -------------------- JSON --------------------
def encode_complex(array: np.ndarray) -> Dict[str, Any]:
    array = np.asarray(array, dtype=np.complex128)
    return {
        "real": array.real.reshape(-1).tolist(),
        "imag": array.imag.reshape(-1).tolist(),
        "shape": list(array.shape),
    }


def decode_complex(document: Dict[str, Any]) -> np.ndarray:
    values = np.asarray(document["real"]) + 1j * np.asarray(document["imag"])
    return values.reshape(document["shape"])


def _default(obj):
    if isinstance(obj, np.ndarray):
        return encode_complex(obj) if np.iscomplexobj(obj) else obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, complex):
        return {"real": obj.real, "imag": obj.imag}
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(document: Dict[str, Any], path: str, config_hash: str):
    _ensure_parent(path)
    payload = {"schema": SCHEMA, "config_hash": config_hash, "version": VERSION, **document}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_default, allow_nan=True)
        f.write("\n")


def read_json(path: str, expected_hash: Optional[str] = None) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    if expected_hash is not None and document.get("config_hash") != expected_hash:
        raise ValidationError(f"{path} was written for config {document.get('config_hash')}, not {expected_hash}")
    return document


# -------------------- gnuplot --------------------
def write_gnuplot_matrix(path: str, x: np.ndarray, y: np.ndarray, z: np.ndarray, config_hash: str):
    """`matrix nonuniform`: first row N x_1..x_N, then y_j z_j1..z_jN; z indexed [y, x]."""
    z = np.asarray(z, dtype=float)
    if z.shape != (len(y), len(x)):
        raise ValidationError(f"matrix shape {z.shape} does not match axes ({len(y)}, {len(x)})")
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# schema={SCHEMA}\n# config_hash={config_hash}\n# version={VERSION}\n")
        f.write(" ".join([str(len(x))] + [repr(float(v)) for v in x]) + "\n")
        for yj, row in zip(y, z):
            f.write(" ".join([repr(float(yj))] + [repr(float(v)) for v in row]) + "\n")


# -------------------- Binary container --------------------
def _header(kind: bytes, config_hash: str, shape: Tuple[int, ...]) -> bytes:
    tag = config_hash.encode("ascii")
    if len(tag) != 16:
        raise ValidationError(f"config hash must have 16 characters, got {config_hash!r}")
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + kind + tag + struct.pack(f"<I{len(shape)}Q", len(shape), *shape)


def _read_header(stream, kind: bytes, expected_hash: Optional[str]) -> Tuple[str, Tuple[int, ...]]:
    if stream.read(4) != MAGIC:
        raise ValidationError("not a polaron-lab binary file")
    (version,) = struct.unpack("<I", stream.read(4))
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported binary format version {version}")
    found = stream.read(4)
    if found != kind:
        raise ValidationError(f"expected a {kind.decode()} record, found {found!r}")
    tag = stream.read(16).decode("ascii")
    if expected_hash is not None and tag != expected_hash:
        raise ValidationError(f"record belongs to config {tag}, not {expected_hash}")
    (ndim,) = struct.unpack("<I", stream.read(4))
    shape = struct.unpack(f"<{ndim}Q", stream.read(8 * ndim))
    return tag, tuple(int(s) for s in shape)


def save_state(path: str, amplitudes: np.ndarray, config_hash: str):
    array = np.ascontiguousarray(amplitudes, dtype="<c16")
    _ensure_parent(path)
    with open(path, "wb") as f:
        f.write(_header(KIND_STATE, config_hash, array.shape))
        f.write(array.tobytes())


def load_state(path: str, expected_hash: Optional[str] = None) -> np.ndarray:
    with open(path, "rb") as f:
        _, shape = _read_header(f, KIND_STATE, expected_hash)
        data = f.read()
    count = int(np.prod(shape))
    if len(data) != 16 * count:
        raise ValidationError(f"state record truncated: {len(data)} bytes for shape {shape}")
    return np.frombuffer(data, dtype="<c16").reshape(shape).astype(np.complex128)


def save_operator(path: str, matrix: sparse.spmatrix, config_hash: str):
    matrix = sparse.csr_matrix(matrix, dtype=np.complex128)
    matrix.sort_indices()
    _ensure_parent(path)
    with open(path, "wb") as f:
        f.write(_header(KIND_OPERATOR, config_hash, matrix.shape))
        f.write(struct.pack("<Q", matrix.nnz))
        f.write(np.ascontiguousarray(matrix.data, dtype="<c16").tobytes())
        f.write(np.ascontiguousarray(matrix.indices, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(matrix.indptr, dtype="<i8").tobytes())


def load_operator(path: str, expected_hash: Optional[str] = None) -> sparse.csr_matrix:
    with open(path, "rb") as f:
        _, shape = _read_header(f, KIND_OPERATOR, expected_hash)
        if len(shape) != 2:
            raise ValidationError(f"operator record has shape {shape}")
        (nnz,) = struct.unpack("<Q", f.read(8))
        data = np.frombuffer(f.read(16 * nnz), dtype="<c16")
        indices = np.frombuffer(f.read(8 * nnz), dtype="<i8")
        indptr = np.frombuffer(f.read(8 * (shape[0] + 1)), dtype="<i8")
    if data.size != nnz or indices.size != nnz or indptr.size != shape[0] + 1:
        raise ValidationError("operator record truncated")
    return sparse.csr_matrix((data.astype(np.complex128), indices, indptr), shape=shape)
