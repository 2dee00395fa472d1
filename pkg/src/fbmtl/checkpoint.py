"""Checkpoint files: a text header followed by raw little-endian float64 arrays.

Layout::

    FBMTL-CHECKPOINT 1
    <name>\t<comma-separated shape>\t<byte offset into the data section>
    ...
    END
    <concatenated array bytes>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "FBMTL-CHECKPOINT 1"
_LE = np.dtype("<f8")


class TopologyError(ValueError):
    pass


def save_arrays(arrays: dict[str, np.ndarray], path) -> None:
    lines = [MAGIC]
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"illegal parameter name {name!r}")
        a = np.ascontiguousarray(arr, dtype=_LE)
        lines.append(f"{name}\t{','.join(map(str, a.shape))}\t{offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append("END")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            f.write(b)


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise ValueError(f"{path} is not a checkpoint file")
    header = raw[:end].decode("utf-8").split("\n")[1:]
    body = raw[end + len(b"\nEND\n"):]
    out = {}
    for row in header:
        name, shape_s, off_s = row.split("\t")
        shape = tuple(int(s) for s in shape_s.split(",") if s)
        n = int(np.prod(shape)) if shape else 1
        off = int(off_s)
        out[name] = np.frombuffer(body, dtype=_LE, count=n, offset=off).reshape(shape).astype(np.float64)
    return out


def save_model(model, path) -> None:
    save_arrays({k: v.data for k, v in model.named_parameters().items()}, path)


def load_into(model, path) -> None:
    """Copy checkpoint values into ``model``; names and shapes must match exactly."""
    arrays = load_arrays(path)
    params = model.named_parameters()
    if set(arrays) != set(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise TopologyError(f"checkpoint/model mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise TopologyError(f"{name}: checkpoint shape {arrays[name].shape} != model {p.data.shape}")
        p.data[...] = arrays[name]
