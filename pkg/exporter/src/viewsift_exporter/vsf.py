"""Standalone writer for the VSF1 tensor container and set manifests.

This is a second, independent implementation of the wire format (magic,
length-prefixed five-line header, little-endian float32 payload). The toolkit
package validates everything we emit, which keeps the two implementations
honest against each other. All writes are atomic: temp file, then rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"VSF1"


def write_tensor(
    path: str | Path,
    role: str,
    array: np.ndarray,
    view_id: str,
    layer_index: int | None = None,
) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    shape_txt = ",".join(str(int(d)) for d in arr.shape)
    layer_txt = "" if layer_index is None else str(int(layer_index))
    header = (
        f"role={role}\n"
        f"dtype=f32\n"
        f"shape={shape_txt}\n"
        f"layer={layer_txt}\n"
        f"view_id={view_id}\n"
    ).encode("utf-8")
    payload = MAGIC + struct.pack("<I", len(header)) + header + arr.tobytes()
    _atomic_write(Path(path), payload)


def write_manifest(
    path: str | Path,
    set_id: str,
    grid: dict,
    layer: int,
    views: list[dict],
    pose_convention: str = "camera_from_world",
) -> None:
    doc = {
        "set_id": set_id,
        "grid": grid,
        "layer": layer,
        "pose_convention": pose_convention,
        "views": views,
    }
    _atomic_write(Path(path), (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
