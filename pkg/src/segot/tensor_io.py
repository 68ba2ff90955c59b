"""SGT1 tensor files and JSON pair manifests.

SGT1 layout (little-endian)::

    b"SGT1" | dtype code u8 (0=f32, 1=u8) | ndim u8 | ndim x u64 dims | row-major payload
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from segot.errors import FormatError, ValidationError
from segot.structures import MAX_SEGMENTS, CameraPose, GtAssignment, Intrinsics, MaskSet

MAGIC = b"SGT1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
CODE_OF = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
MAX_NDIM = 4


def _check_tensor(t):
    t = np.asarray(t)
    if t.dtype == np.float32 or t.dtype == np.uint8:
        pass
    elif t.dtype == bool:
        t = t.astype(np.uint8)
    else:
        raise ValidationError(f"unsupported dtype {t.dtype}; SGT1 stores float32 or uint8")
    if not 1 <= t.ndim <= MAX_NDIM:
        raise ValidationError(f"tensor must have 1-4 dimensions, got {t.ndim}")
    if min(t.shape) < 1:
        raise ValidationError(f"all dimensions must be >= 1, got {t.shape}")
    return t


def encode_tensor(t) -> bytes:
    t = _check_tensor(t)
    header = MAGIC + struct.pack("<BB", CODE_OF[t.dtype], t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t, dtype=DTYPE_CODES[CODE_OF[t.dtype]]).tobytes()


def write_tensor(t, sink) -> int:
    """Write ``t`` to a binary sink; returns the number of bytes emitted."""
    payload = encode_tensor(t)
    try:
        sink.write(payload)
    except OSError as exc:
        raise OSError(f"failed writing SGT1 tensor of shape {np.shape(t)}: {exc}") from exc
    return len(payload)


def _read_exact(source, n, what):
    buf = source.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated SGT1 stream: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def read_tensor(source) -> np.ndarray:
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = io.BytesIO(bytes(source))
    magic = source.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    code, ndim = struct.unpack("<BB", _read_exact(source, 2, "header"))
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"ndim {ndim} outside 1..{MAX_NDIM}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(source, 8 * ndim, "shape"))
    if min(shape) < 1:
        raise FormatError(f"zero-sized dimension in shape {shape}")
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.uint64))
    data = _read_exact(source, count * dtype.itemsize, "payload")
    out = np.frombuffer(data, dtype=dtype).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, t) -> int:
    with atomic_write(path, "wb") as fh:
        return write_tensor(t, fh)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        try:
            t = read_tensor(fh)
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload of shape {t.shape}")
    return t


@contextmanager
def atomic_write(path, mode="w"):
    """Write to a temp file next to ``path`` and rename on success only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class Pair:
    """A fully validated image pair; arrays are read-only."""

    features_a: np.ndarray
    features_b: np.ndarray
    masks_a: MaskSet
    masks_b: MaskSet
    gt: GtAssignment | None = None
    pose_a: CameraPose | None = None
    pose_b: CameraPose | None = None
    depth_a: np.ndarray | None = None
    depth_b: np.ndarray | None = None
    intrinsics: Intrinsics | None = None
    patches_a: np.ndarray | None = None
    patches_b: np.ndarray | None = None
    name: str = ""


def _load_checked(base, rel, key, ndim, dtype):
    path = base / rel
    if not path.exists():
        raise FileNotFoundError(f"{key}: {path} does not exist")
    t = load_tensor(path)
    if t.ndim != ndim:
        raise ValidationError(f"{key} ({path}) must have {ndim} dimensions, got shape {t.shape}")
    if t.dtype != dtype:
        raise ValidationError(f"{key} ({path}) must be {dtype}, got {t.dtype}")
    t.setflags(write=False)
    return t


def load_pair(manifest_path) -> Pair:
    """Load and cross-validate a pair manifest; raises before returning anything partial."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{manifest_path}: malformed JSON: {exc}") from exc
    base = manifest_path.parent
    for key in ("features_a", "features_b", "masks_a", "masks_b", "valid_a", "valid_b"):
        if key not in doc:
            raise ValidationError(f"{manifest_path}: missing key {key!r}")

    tensors = {}
    for side in "ab":
        feats = _load_checked(base, doc[f"features_{side}"], f"features_{side}", 3, np.float32)
        masks = _load_checked(base, doc[f"masks_{side}"], f"masks_{side}", 3, np.uint8)
        if feats.shape[:2] != masks.shape[1:]:
            raise ValidationError(
                f"features_{side} is {feats.shape[0]}x{feats.shape[1]} but masks_{side} is "
                f"{masks.shape[1]}x{masks.shape[2]}"
            )
        if masks.shape[0] > MAX_SEGMENTS:
            raise ValidationError(f"masks_{side} has {masks.shape[0]} slots, bound is {MAX_SEGMENTS}")
        valid = doc[f"valid_{side}"]
        if len(valid) != masks.shape[0]:
            raise ValidationError(f"valid_{side} has {len(valid)} flags for {masks.shape[0]} mask slots")
        if not np.isin(masks, (0, 1)).all():
            raise ValidationError(f"masks_{side} contains values other than 0/1")
        tensors[f"features_{side}"] = feats
        tensors[f"masks_{side}"] = MaskSet(masks.astype(bool), np.array(valid, dtype=bool))
        if doc.get(f"depth_{side}") is not None:
            depth = _load_checked(base, doc[f"depth_{side}"], f"depth_{side}", 2, np.float32)
            if depth.shape != feats.shape[:2]:
                raise ValidationError(f"depth_{side} is {depth.shape} but features_{side} is {feats.shape[:2]}")
            tensors[f"depth_{side}"] = depth
        if doc.get(f"patches_{side}") is not None:
            tensors[f"patches_{side}"] = _load_checked(base, doc[f"patches_{side}"], f"patches_{side}", 3, np.float32)
        if doc.get(f"pose_{side}") is not None:
            tensors[f"pose_{side}"] = CameraPose.from_json(doc[f"pose_{side}"])

    gt = None
    if doc.get("gt") is not None:
        gt = GtAssignment.from_json(doc["gt"])
        gt.check_bounds(tensors["masks_a"].count, tensors["masks_b"].count)
    intr = Intrinsics.from_json(doc["intrinsics"]) if doc.get("intrinsics") is not None else None
    return Pair(gt=gt, intrinsics=intr, name=manifest_path.stem, **tensors)


def save_pair(directory, name, pair: Pair) -> Path:
    """Write tensors and a manifest ``<name>.json``; returns the manifest path."""
    directory = Path(directory)
    doc = {}
    for side in "ab":
        feats = f"{name}_features_{side}.sgt"
        masks = f"{name}_masks_{side}.sgt"
        ms = getattr(pair, f"masks_{side}")
        save_tensor(directory / feats, np.asarray(getattr(pair, f"features_{side}"), dtype=np.float32))
        save_tensor(directory / masks, ms.masks.astype(np.uint8))
        doc[f"features_{side}"] = feats
        doc[f"masks_{side}"] = masks
        doc[f"valid_{side}"] = [bool(v) for v in ms.valid]
        for opt in ("depth", "patches"):
            arr = getattr(pair, f"{opt}_{side}")
            if arr is not None:
                rel = f"{name}_{opt}_{side}.sgt"
                save_tensor(directory / rel, np.asarray(arr, dtype=np.float32))
                doc[f"{opt}_{side}"] = rel
        pose = getattr(pair, f"pose_{side}")
        if pose is not None:
            doc[f"pose_{side}"] = pose.to_json()
    if pair.gt is not None:
        doc["gt"] = pair.gt.to_json()
    if pair.intrinsics is not None:
        doc["intrinsics"] = pair.intrinsics.to_json()
    path = directory / f"{name}.json"
    write_json(path, doc)
    return path
