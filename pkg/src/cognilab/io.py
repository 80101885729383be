"""On-disk formats: attention dumps, hidden-state dumps and checkpoints.

Attention dump layout (all little-endian)::

    offset  size  field
    0       6     magic b"ATND1\\0"
    6       2     zero padding
    8       12    uint32 L, H, T
    20      4     zero padding
    24      4*L*H*T*T  float32 payload, index order (layer, head, query, key)

A JSON sidecar with the same stem carries prompt id, checkpoint step and
tokenizer hash. Checkpoints are a JSON manifest plus raw ``<f8`` blobs whose
byte offsets are listed in the manifest, so identical state always produces
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATND1\x00"
HEADER_SIZE = 24
_HEADER = struct.Struct("<6s2xIII4x")
ROW_TOL = 1e-5


class DumpError(ValueError):
    """Malformed attention dump."""


class BadMagicError(DumpError):
    pass


class SizeMismatchError(DumpError):
    pass


class NonStochasticError(DumpError):
    pass


def encode_dump(attention: np.ndarray) -> bytes:
    att = np.asarray(attention)
    if att.ndim != 4 or att.shape[2] != att.shape[3]:
        raise DumpError(f"attention must be [L, H, T, T], got {att.shape}")
    L, H, T, _ = att.shape
    return _HEADER.pack(MAGIC, L, H, T) + att.astype("<f4").tobytes(order="C")


def decode_dump(blob: bytes, check_rows: bool = True) -> np.ndarray:
    if len(blob) < HEADER_SIZE:
        raise SizeMismatchError(f"file has {len(blob)} bytes, header needs {HEADER_SIZE}")
    magic, L, H, T = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    expected = HEADER_SIZE + 4 * L * H * T * T
    if len(blob) != expected:
        raise SizeMismatchError(f"expected {expected} bytes for L={L} H={H} T={T}, got {len(blob)}")
    att = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE).reshape(L, H, T, T)
    if check_rows and T:
        sums = att.astype(np.float64).sum(axis=-1)
        bad = np.abs(sums - 1.0) > ROW_TOL
        if np.any(bad) or np.any(att < 0):
            idx = tuple(int(i) for i in np.argwhere(bad)[0]) if np.any(bad) else None
            raise NonStochasticError(f"attention rows are not stochastic (first bad row {idx})")
    return att


def save_dump(path: str | Path, attention: np.ndarray, meta: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_dump(attention))
    if meta is not None:
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_dump(path: str | Path, check_rows: bool = True) -> tuple[np.ndarray, dict | None]:
    path = Path(path)
    att = decode_dump(path.read_bytes(), check_rows)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else None
    return att, meta


def save_hidden(path: str | Path, hidden: list[np.ndarray]) -> None:
    np.save(Path(path), np.stack(hidden).astype("<f8"), allow_pickle=False)


def load_hidden(path: str | Path) -> np.ndarray:
    return np.load(Path(path), allow_pickle=False)


# -- named arrays ------------------------------------------------------------

def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> list[dict]:
    index, offset = [], 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
            offset += len(raw)
    return index


def read_arrays(path: str | Path, index: list[dict]) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    out = {}
    for entry in index:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 8 * count
        if end > len(blob):
            raise SizeMismatchError(f"{path}: array {entry['name']} runs past end of file")
        out[entry["name"]] = np.frombuffer(blob, "<f8", count, entry["offset"]).reshape(shape).astype(np.float64)
    return out


def save_checkpoint(
    directory: str | Path,
    params: dict[str, np.ndarray],
    optim: dict | None,
    meta: dict,
) -> Path:
    """Write ``params.bin``, ``optim.bin`` and ``manifest.json`` into ``directory``.

    ``optim`` is ``{"t": int, "m": {...}, "v": {...}}`` or None.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = dict(meta)
    manifest["params"] = write_arrays(d / "params.bin", params)
    if optim is not None:
        moments = {f"m/{k}": a for k, a in optim["m"].items()}
        moments.update({f"v/{k}": a for k, a in optim["v"].items()})
        manifest["optim"] = {"t": int(optim["t"]), "arrays": write_arrays(d / "optim.bin", moments)}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return d


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict | None, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    params = read_arrays(d / "params.bin", manifest["params"])
    optim = None
    if "optim" in manifest:
        arrays = read_arrays(d / "optim.bin", manifest["optim"]["arrays"])
        optim = {"t": manifest["optim"]["t"],
                 "m": {k[2:]: a for k, a in arrays.items() if k.startswith("m/")},
                 "v": {k[2:]: a for k, a in arrays.items() if k.startswith("v/")}}
    return params, optim, manifest


def checkpoint_steps(run_dir: str | Path) -> list[int]:
    root = Path(run_dir) / "checkpoints"
    if not root.exists():
        return []
    return sorted(int(p.name.split("_", 1)[1]) for p in root.glob("step_*") if p.is_dir())
