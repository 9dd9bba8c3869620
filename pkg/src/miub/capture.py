"""Data model and bit-exact file format for paired hidden-state captures.

A capture set is stored as two files in one directory:

``manifest.jsonl``
    JSON lines.  The first line is a header
    ``{"format": "miub-manifest", "version": 1, "meta": {...}}``; every
    following line is one record
    ``{"sample_id": int, "module_id": str, "layer": int, "site": str,
    "dim": int, "base_offset": int, "adapted_offset": int}``.

``captures.bin``
    8-byte magic ``MIUBCAP1`` followed by raw little-endian float32
    vectors back to back.  Offsets in the manifest are absolute byte
    positions into this file.

An optional sidecar ``logprobs.jsonl`` holds per-sample token
log-probabilities in nats (each entry <= 0), one line per sample:
``{"sample_id": int, "logprobs": [...]}``.

Vectors are stored at float32 even though all metrics are computed in
float64: that matches how hidden states come out of real model exports, and
puts the precision loss upstream of every metric uniformly.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MIUBCAP1"
FORMAT_NAME = "miub-manifest"
FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.jsonl"
BLOB_FILE = "captures.bin"
LOGPROBS_FILE = "logprobs.jsonl"

SITES = ("attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_down")

_RECORD_KEYS = {
    "sample_id": int,
    "module_id": str,
    "layer": int,
    "site": str,
    "dim": int,
    "base_offset": int,
    "adapted_offset": int,
}


class CaptureFormatError(Exception):
    """A capture file pair is malformed; the message names the defect."""


def _f32(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, copy=True).ravel()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModuleCapture:
    """One paired (base, adapted) hidden-state vector at one adapter site.

    ``h_base`` is the frozen dense layer's output BEFORE the low-rank delta
    is added; ``h_adapted`` is the residual sum.  Both are held at float32,
    the storage precision.
    """

    sample_id: int
    module_id: str
    layer_index: int
    site: str
    h_base: np.ndarray
    h_adapted: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h_base", _f32(self.h_base))
        object.__setattr__(self, "h_adapted", _f32(self.h_adapted))

    def __eq__(self, other):
        if not isinstance(other, ModuleCapture):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.module_id == other.module_id
            and self.layer_index == other.layer_index
            and self.site == other.site
            and np.array_equal(self.h_base, other.h_base)
            and np.array_equal(self.h_adapted, other.h_adapted)
        )


@dataclass(eq=False)
class CaptureSet:
    """A collection of captures plus run metadata and optional logprobs.

    ``meta`` must carry at least ``model_name``, ``n_params``, ``lora_rank``,
    ``dataset_size``, ``share_k``, ``length_bin`` and ``seed``.
    ``token_logprobs`` maps sample_id to that sample's per-token
    log-probabilities in nats.
    """

    captures: list[ModuleCapture]
    meta: dict
    token_logprobs: dict[int, list[float]] | None = None

    def __eq__(self, other):
        if not isinstance(other, CaptureSet):
            return NotImplemented
        return (
            self.captures == other.captures
            and self.meta == other.meta
            and self.token_logprobs == other.token_logprobs
        )


def validate(cs: CaptureSet) -> list[str]:
    """Return every invariant violation in the set; empty list iff valid."""
    violations: list[str] = []
    meta = cs.meta if isinstance(cs.meta, dict) else {}
    if not isinstance(cs.meta, dict):
        violations.append("meta is not a mapping")
    for key in ("model_name", "n_params", "lora_rank", "dataset_size",
                "share_k", "length_bin", "seed"):
        if key not in meta:
            violations.append(f"meta is missing key {key!r}")
    if "n_params" in meta and not (isinstance(meta["n_params"], (int, float))
                                   and meta["n_params"] > 0):
        violations.append(f"meta.n_params must be > 0, got {meta['n_params']!r}")
    if "lora_rank" in meta and not (isinstance(meta["lora_rank"], (int, float))
                                    and meta["lora_rank"] >= 1):
        violations.append(f"meta.lora_rank must be >= 1, got {meta['lora_rank']!r}")

    seen: set[tuple[int, str]] = set()
    module_dims: dict[str, int] = {}
    for cap in cs.captures:
        tag = f"capture (sample {cap.sample_id}, module {cap.module_id!r})"
        if cap.sample_id < 0:
            violations.append(f"{tag}: negative sample_id")
        if cap.layer_index < 0:
            violations.append(f"{tag}: negative layer_index")
        if cap.site not in SITES:
            violations.append(f"{tag}: unknown site {cap.site!r}")
        if cap.h_base.size != cap.h_adapted.size:
            violations.append(
                f"{tag}: dim mismatch h_base={cap.h_base.size} "
                f"h_adapted={cap.h_adapted.size}"
            )
        if min(cap.h_base.size, cap.h_adapted.size) < 2:
            violations.append(f"{tag}: vectors must have dim >= 2")
        if not np.all(np.isfinite(cap.h_base)):
            violations.append(f"{tag}: non-finite entry in h_base")
        if not np.all(np.isfinite(cap.h_adapted)):
            violations.append(f"{tag}: non-finite entry in h_adapted")
        key = (cap.sample_id, cap.module_id)
        if key in seen:
            violations.append(f"{tag}: duplicate (sample_id, module_id)")
        seen.add(key)
        prev = module_dims.get(cap.module_id)
        if prev is None:
            module_dims[cap.module_id] = cap.h_base.size
        elif prev != cap.h_base.size:
            violations.append(
                f"{tag}: module dim {cap.h_base.size} conflicts with "
                f"previously seen dim {prev}"
            )

    if cs.token_logprobs is not None:
        for sid, lps in cs.token_logprobs.items():
            arr = np.asarray(lps, dtype=np.float64)
            if arr.size == 0:
                violations.append(f"logprobs for sample {sid}: empty sequence")
            elif not np.all(np.isfinite(arr)):
                violations.append(f"logprobs for sample {sid}: non-finite entry")
            elif np.any(arr > 0):
                violations.append(f"logprobs for sample {sid}: positive entry")
    return violations


def _atomic_write(path: Path, data: bytes) -> None:
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


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_capture_set(cs: CaptureSet, path) -> None:
    """Write manifest + blob (+ logprobs sidecar) under directory ``path``.

    The set is validated first; nothing is written if it is invalid.  Each
    file is written atomically (temp file + rename).
    """
    violations = validate(cs)
    if violations:
        raise ValueError(
            "refusing to write invalid capture set:\n  " + "\n  ".join(violations)
        )
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)

    blob = bytearray(MAGIC)
    lines = [_dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION,
                     "meta": cs.meta})]
    for cap in cs.captures:
        base_offset = len(blob)
        blob += cap.h_base.astype("<f4").tobytes()
        adapted_offset = len(blob)
        blob += cap.h_adapted.astype("<f4").tobytes()
        lines.append(_dumps({
            "sample_id": cap.sample_id,
            "module_id": cap.module_id,
            "layer": cap.layer_index,
            "site": cap.site,
            "dim": int(cap.h_base.size),
            "base_offset": base_offset,
            "adapted_offset": adapted_offset,
        }))

    _atomic_write(directory / BLOB_FILE, bytes(blob))
    _atomic_write(directory / MANIFEST_FILE,
                  ("\n".join(lines) + "\n").encode("utf-8"))

    if cs.token_logprobs is not None:
        side = [
            _dumps({"sample_id": sid, "logprobs": [float(x) for x in lps]})
            for sid, lps in sorted(cs.token_logprobs.items())
        ]
        _atomic_write(directory / LOGPROBS_FILE,
                      ("\n".join(side) + "\n").encode("utf-8"))


def _parse_record(line_no: int, obj) -> dict:
    if not isinstance(obj, dict):
        raise CaptureFormatError(f"manifest line {line_no}: record is not an object")
    rec = {}
    for key, typ in _RECORD_KEYS.items():
        if key not in obj:
            raise CaptureFormatError(f"manifest line {line_no}: missing key {key!r}")
        val = obj[key]
        if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
            raise CaptureFormatError(
                f"manifest line {line_no}: {key} must be an integer, got {val!r}"
            )
        if typ is str and not isinstance(val, str):
            raise CaptureFormatError(
                f"manifest line {line_no}: {key} must be a string, got {val!r}"
            )
        rec[key] = val
    if rec["dim"] < 1:
        raise CaptureFormatError(f"manifest line {line_no}: dim must be >= 1")
    return rec


def read_capture_set(path) -> CaptureSet:
    """Read and fully validate a capture set written by ``write_capture_set``.

    Every record's byte extent is checked against the blob before any
    vector is materialized, and the records must cover the blob exactly up
    to its final byte, so truncated files are always detected.
    """
    directory = Path(path)
    manifest_path = directory / MANIFEST_FILE
    blob_path = directory / BLOB_FILE
    if not manifest_path.is_file():
        raise CaptureFormatError(f"manifest not found: {manifest_path}")
    if not blob_path.is_file():
        raise CaptureFormatError(f"blob not found: {blob_path}")

    blob = blob_path.read_bytes()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise CaptureFormatError(
            f"{blob_path} is not a capture file (bad magic)"
        )

    try:
        text = manifest_path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CaptureFormatError(f"manifest is not valid UTF-8: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise CaptureFormatError("manifest is empty (missing header line)")

    def parse_json(line_no: int, line: str):
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise CaptureFormatError(
                f"manifest line {line_no}: invalid JSON ({exc.msg})"
            ) from exc

    header = parse_json(1, lines[0])
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise CaptureFormatError("manifest header is not a miub-manifest header")
    if header.get("version") != FORMAT_VERSION:
        raise CaptureFormatError(
            f"unsupported manifest version {header.get('version')!r} "
            f"(expected {FORMAT_VERSION})"
        )
    meta = header.get("meta")
    if not isinstance(meta, dict):
        raise CaptureFormatError("manifest header is missing the meta object")

    records = [
        _parse_record(i, parse_json(i, line))
        for i, line in enumerate(lines[1:], start=2)
    ]

    # Bounds pass: no vector is materialized until every extent checks out.
    covered_end = len(MAGIC)
    for i, rec in enumerate(records):
        nbytes = rec["dim"] * 4
        for which in ("base_offset", "adapted_offset"):
            off = rec[which]
            if off < len(MAGIC):
                raise CaptureFormatError(
                    f"record {i} (module {rec['module_id']!r}): {which}={off} "
                    "points into the magic header"
                )
            if off + nbytes > len(blob):
                raise CaptureFormatError(
                    f"record {i} (module {rec['module_id']!r}): {which}={off} "
                    f"dim={rec['dim']} extends past end of blob "
                    f"({len(blob)} bytes)"
                )
            covered_end = max(covered_end, off + nbytes)
    if covered_end != len(blob):
        raise CaptureFormatError(
            f"manifest/blob inconsistency: records end at byte {covered_end} "
            f"but blob has {len(blob)} bytes"
        )

    captures = []
    for i, rec in enumerate(records):
        vecs = {}
        for which, attr in (("base_offset", "h_base"),
                            ("adapted_offset", "h_adapted")):
            v = np.frombuffer(blob, dtype="<f4", count=rec["dim"],
                              offset=rec[which]).astype(np.float32)
            if not np.all(np.isfinite(v)):
                raise CaptureFormatError(
                    f"record {i} (module {rec['module_id']!r}): non-finite "
                    f"payload in {attr}"
                )
            vecs[attr] = v
        captures.append(ModuleCapture(
            sample_id=rec["sample_id"],
            module_id=rec["module_id"],
            layer_index=rec["layer"],
            site=rec["site"],
            h_base=vecs["h_base"],
            h_adapted=vecs["h_adapted"],
        ))

    token_logprobs = _read_logprobs(directory / LOGPROBS_FILE)
    cs = CaptureSet(captures=captures, meta=meta, token_logprobs=token_logprobs)
    violations = validate(cs)
    if violations:
        raise CaptureFormatError(
            "capture set fails validation:\n  " + "\n  ".join(violations)
        )
    return cs


def _read_logprobs(path: Path) -> dict[int, list[float]] | None:
    if not path.is_file():
        return None
    out: dict[int, list[float]] = {}
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CaptureFormatError(f"logprobs sidecar is not valid UTF-8: {exc}") from exc
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CaptureFormatError(
                f"logprobs line {i}: invalid JSON ({exc.msg})"
            ) from exc
        if (not isinstance(obj, dict) or "sample_id" not in obj
                or "logprobs" not in obj):
            raise CaptureFormatError(
                f"logprobs line {i}: expected sample_id and logprobs keys"
            )
        sid = obj["sample_id"]
        lps = obj["logprobs"]
        if isinstance(sid, bool) or not isinstance(sid, int):
            raise CaptureFormatError(f"logprobs line {i}: sample_id must be an int")
        if not isinstance(lps, list) or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in lps):
            raise CaptureFormatError(
                f"logprobs line {i}: logprobs must be a list of numbers"
            )
        if sid in out:
            raise CaptureFormatError(f"logprobs line {i}: duplicate sample_id {sid}")
        out[sid] = [float(x) for x in lps]
    return out
