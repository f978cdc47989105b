"""Parameter checkpoints: text header followed by little-endian float64 payloads."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "TGAR-CHECKPOINT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray], spec_hash: str, version: int, step: int,
                    extra: Mapping[str, str] | None = None) -> None:
    names = sorted(params)
    lines = [MAGIC, f"spec_hash {spec_hash}", f"version {int(version)}", f"step {int(step)}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"meta {k} {v}")
    offset = 0
    blobs = []
    for name in names:
        a = np.asarray(params[name], dtype="<f8", order="C")
        shape = ",".join(str(d) for d in a.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset} {a.nbytes}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, expect_hash: str | None = None):
    """Return ``(params, header)``; ``header`` has spec_hash, version, step, meta."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint (bad header)")
    body = raw[end + 5:]
    header = {"meta": {}}
    tensors = []
    try:
        for line in raw[:end].decode("ascii").split("\n")[1:]:
            tok = line.split(" ")
            if tok[0] == "tensor":
                shape = () if tok[2] == "-" else tuple(int(d) for d in tok[2].split(","))
                tensors.append((tok[1], shape, int(tok[3]), int(tok[4])))
            elif tok[0] == "meta":
                header["meta"][tok[1]] = " ".join(tok[2:])
            elif tok[0] in ("version", "step"):
                header[tok[0]] = int(tok[1])
            elif tok[0] == "spec_hash":
                header["spec_hash"] = tok[1]
            else:
                raise ValueError(line)
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    for key in ("spec_hash", "version", "step"):
        if key not in header:
            raise CheckpointError(f"{path}: header lacks {key}")
    if expect_hash is not None and header["spec_hash"] != expect_hash:
        raise CheckpointError(f"{path}: model spec hash {header['spec_hash']} != expected {expect_hash}")
    params = {}
    for name, shape, off, nbytes in tensors:
        if off + nbytes > len(body) or nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        params[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
    return params, header
