"""Writer for the miub capture file pair (manifest + blob + sidecar).

Implemented against the documented byte format, independently of the
consuming toolkit: blob is the 8-byte magic ``MIUBCAP1`` followed by raw
little-endian float32 vectors; the JSON-lines manifest carries absolute
byte offsets; JSON is serialized with sorted keys and compact separators.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MIUBCAP1"
MANIFEST_FILE = "manifest.jsonl"
BLOB_FILE = "captures.bin"
LOGPROBS_FILE = "logprobs.jsonl"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_capture_files(records, meta: dict, out_dir) -> None:
    """Write capture records to ``out_dir``.

    Each record is a mapping with keys ``sample_id``, ``module_id``,
    ``layer``, ``site``, ``base`` and ``adapted`` (1-D arrays; stored as
    little-endian float32).
    """
    out = Path(out_dir)
    blob = bytearray(MAGIC)
    lines = [_dumps({"format": "miub-manifest", "version": 1, "meta": meta})]
    for rec in records:
        base = np.ascontiguousarray(rec["base"], dtype="<f4")
        adapted = np.ascontiguousarray(rec["adapted"], dtype="<f4")
        if base.shape != adapted.shape:
            raise ValueError(
                f"site {rec['module_id']!r}: base shape {base.shape} does not "
                f"match adapted shape {adapted.shape}"
            )
        base_offset = len(blob)
        blob += base.tobytes()
        adapted_offset = len(blob)
        blob += adapted.tobytes()
        lines.append(_dumps({
            "sample_id": int(rec["sample_id"]),
            "module_id": str(rec["module_id"]),
            "layer": int(rec["layer"]),
            "site": str(rec["site"]),
            "dim": int(base.size),
            "base_offset": base_offset,
            "adapted_offset": adapted_offset,
        }))
    _atomic_write(out / BLOB_FILE, bytes(blob))
    _atomic_write(out / MANIFEST_FILE, ("\n".join(lines) + "\n").encode())


def write_logprob_sidecar(per_sample: dict[int, list[float]], out_dir) -> None:
    lines = [
        _dumps({"sample_id": int(sid), "logprobs": [float(x) for x in lps]})
        for sid, lps in sorted(per_sample.items())
    ]
    _atomic_write(Path(out_dir) / LOGPROBS_FILE,
                  ("\n".join(lines) + "\n").encode())
