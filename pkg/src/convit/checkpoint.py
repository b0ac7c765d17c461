"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"CVIT" | version | repeated { name_len | name (utf-8) | rank | dims[rank] | float32 payload }

Records run to end of file. Parameters and batch-norm running statistics are
both stored, so a loaded model reproduces eval-mode logits bit-exactly when it
was trained in float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVIT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_state(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        a = np.array(arr, dtype="<f4", order="C")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_state(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise CheckpointError("truncated header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    state: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated record at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if name in state:
            raise CheckpointError(f"duplicate record {name!r}")
        state[name] = arr
    return state


def save_checkpoint(module_or_state, path) -> None:
    state = module_or_state if isinstance(module_or_state, dict) else module_or_state.state_dict()
    Path(path).write_bytes(encode_state(state))


def load_checkpoint(path, module=None):
    """Read a checkpoint; load it into ``module`` if given, else return the state dict."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    state = decode_state(p.read_bytes())
    if module is None:
        return state
    try:
        module.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match model: {exc}") from exc
    return module
