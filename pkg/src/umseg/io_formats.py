"""Readers and writers for every on-disk artifact.

Formats are bit-exact and little-endian throughout:

  tensor (.uft)   magic "UFT1" | dtype u8 (0=f32, 1=f64, 2=u16) | ndim u8 |
                  shape as u64 LE per dim | row-major LE payload
  masks (.json)   {view_id, height, width, masks: [{rle: [counts...]}]},
                  uncompressed row-major RLE, counts alternate starting
                  with the zero run (possibly 0)
  camera (.json)  {fl_x, fl_y, cx, cy, w, h, transform: 16 row-major reals},
                  camera-to-world, -Z forward / +Y up
  cloud (.ply)    ascii or binary_little_endian; float x y z, float
                  f0..f{D-1} features, optional ushort label
  labels (.png)   16-bit grayscale, pixel value = label id, 0 = unlabeled
  dendrogram (.json)  [{id, parent, altitude, leaf}, ...]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .graphs import PointCloud
from .hierarchy import BinaryPartitionTree
from .mask_forest import MaskSet
from .metrics import CameraModel


class FormatError(Exception):
    """Malformed or inconsistent file content."""


TENSOR_MAGIC = b"UFT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u2")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "u2": 2}


def write_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    key = f"{array.dtype.kind}{array.dtype.itemsize}"
    if key not in _CODE_FOR_KIND:
        raise FormatError(f"unsupported tensor dtype {array.dtype} (use f32, f64 or u16)")
    code = _CODE_FOR_KIND[key]
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<BB", code, array.ndim))
        for dim in array.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes())


def read_tensor(path, role: str | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(data) < 6:
        raise FormatError("truncated header")
    code, ndim = struct.unpack_from("<BB", data, 4)
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    off = 6
    if len(data) < off + 8 * ndim:
        raise FormatError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}Q", data, off)
    off += 8 * ndim
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - off
    if actual != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, got {actual}")
    array = np.frombuffer(data, dtype=dtype, count=-1, offset=off).reshape(shape)
    if role == "depth" and array.ndim != 2:
        raise FormatError(f"depth tensor must be 2-d, got {array.ndim}-d")
    if role == "features" and array.ndim != 3:
        raise FormatError(f"feature tensor must be 3-d, got {array.ndim}-d")
    if role == "labels" and (array.ndim != 2 or code != 2):
        raise FormatError("label tensor must be 2-d u16")
    return array.copy()


def decode_rle(counts: list[int], height: int, width: int) -> np.ndarray:
    counts = list(counts)
    if any(c < 0 for c in counts):
        raise FormatError("negative RLE count")
    if sum(counts) != height * width:
        raise FormatError(f"RLE counts sum {sum(counts)} != {height * width}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    return np.repeat(values, counts).reshape(height, width)


def encode_rle(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if len(flat) == 0:
        return []
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)  # runs must start with the zero run
    return [int(c) for c in counts]


def read_masks(path) -> MaskSet:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid mask JSON: {exc}") from exc
    for key in ("view_id", "height", "width", "masks"):
        if key not in payload:
            raise FormatError(f"mask file missing key {key!r}")
    h, w = int(payload["height"]), int(payload["width"])
    masks = []
    errors: list[tuple[int, str]] = []
    for i, entry in enumerate(payload["masks"]):
        try:
            mask = decode_rle(entry["rle"], h, w)
            if not mask.any():
                raise FormatError("mask is empty")
            masks.append(mask)
        except (FormatError, KeyError, TypeError) as exc:
            errors.append((i, str(exc)))
    return MaskSet(str(payload["view_id"]), h, w, masks, decode_errors=errors)


def write_masks(path, ms: MaskSet) -> None:
    payload = {
        "view_id": ms.view_id,
        "height": ms.height,
        "width": ms.width,
        "masks": [{"rle": encode_rle(m)} for m in ms.masks],
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":"), sort_keys=True))


def read_camera(path) -> CameraModel:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid camera JSON: {exc}") from exc
    for key in ("fl_x", "fl_y", "cx", "cy", "w", "h", "transform"):
        if key not in payload:
            raise FormatError(f"camera file missing key {key!r}")
    transform = np.asarray(payload["transform"], dtype=np.float64)
    if transform.shape != (16,):
        raise FormatError("transform must hold 16 reals (row-major 4x4)")
    try:
        return CameraModel(
            fl_x=float(payload["fl_x"]),
            fl_y=float(payload["fl_y"]),
            cx=float(payload["cx"]),
            cy=float(payload["cy"]),
            width=int(payload["w"]),
            height=int(payload["h"]),
            cam_to_world=transform.reshape(4, 4),
        )
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_camera(path, cam: CameraModel) -> None:
    payload = {
        "fl_x": cam.fl_x,
        "fl_y": cam.fl_y,
        "cx": cam.cx,
        "cy": cam.cy,
        "w": cam.width,
        "h": cam.height,
        "transform": [float(x) for x in cam.cam_to_world.ravel()],
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":"), sort_keys=True))


def _ply_dtype(dim: int, with_labels: bool) -> np.dtype:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    fields += [(f"f{d}", "<f4") for d in range(dim)]
    if with_labels:
        fields.append(("label", "<u2"))
    return np.dtype(fields)


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    n = len(cloud)
    dim = cloud.features.shape[1]
    if dim == 0:
        raise FormatError("point cloud has dim-0 features; nothing to write")
    with_labels = cloud.labels is not None
    header = ["ply"]
    header.append(f"format {'binary_little_endian' if binary else 'ascii'} 1.0")
    header.append(f"element vertex {n}")
    header += ["property float x", "property float y", "property float z"]
    header += [f"property float f{d}" for d in range(dim)]
    if with_labels:
        header.append("property ushort label")
    header.append("end_header")
    rec = np.empty(n, dtype=_ply_dtype(dim, with_labels))
    rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
    for d in range(dim):
        rec[f"f{d}"] = cloud.features[:, d].astype(np.float32)
    if with_labels:
        if cloud.labels.min() < 0 or cloud.labels.max() > 0xFFFF:
            raise FormatError("labels out of ushort range")
        rec["label"] = cloud.labels.astype(np.uint16)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                cols = [np.format_float_positional(float(row[name]), trim="0")
                        for name in rec.dtype.names if name != "label"]
                if with_labels:
                    cols.append(str(int(row["label"])))
                fh.write((" ".join(cols) + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file (missing header)")
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    for line in header_lines[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] != "vertex":
                raise FormatError(f"unsupported element {tokens[1]!r}")
            count = int(tokens[2])
        elif tokens[0] == "property":
            if len(tokens) != 3:
                raise FormatError(f"unsupported property line {line!r}")
            props.append((tokens[1], tokens[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise FormatError("missing vertex element")
    names = [name for _, name in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FormatError(f"missing property {axis!r}")
    feat_names = sorted((n for n in names if n.startswith("f") and n[1:].isdigit()),
                        key=lambda n: int(n[1:]))
    if not feat_names or [int(n[1:]) for n in feat_names] != list(range(len(feat_names))):
        raise FormatError("point cloud must carry contiguous f0..f{D-1} feature properties")
    type_map = {"float": "<f4", "float32": "<f4", "double": "<f8",
                "ushort": "<u2", "uint16": "<u2"}
    try:
        dtype = np.dtype([(name, type_map[t]) for t, name in props])
    except KeyError as exc:
        raise FormatError(f"unsupported property type {exc}") from exc

    if fmt == "binary_little_endian":
        expected = count * dtype.itemsize
        if len(body) < expected:
            raise FormatError(f"truncated PLY payload: expected {expected} bytes, got {len(body)}")
        rec = np.frombuffer(body, dtype=dtype, count=count)
    else:
        rows = body.decode("ascii").split()
        ncols = len(props)
        if len(rows) != count * ncols:
            raise FormatError("ascii PLY row count mismatch")
        table = np.array(rows).reshape(count, ncols)
        rec = np.empty(count, dtype=dtype)
        for c, (_, name) in enumerate(props):
            rec[name] = table[:, c].astype(dtype[name])

    positions = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    features = np.column_stack([rec[n] for n in feat_names]).astype(np.float64)
    labels = rec["label"].astype(np.int64) if "label" in names else None
    return PointCloud(positions, features, labels)


def write_labelmap_png(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError("label map must be 2-d")
    if labels.min() < 0 or labels.max() > 0xFFFF:
        raise FormatError(f"label id {int(labels.max())} exceeds 16-bit range")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def read_labelmap_png(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I", "L"):
            raise FormatError(f"label PNG must be grayscale, got mode {img.mode}")
        return np.asarray(img, dtype=np.int64)


def write_dendrogram_json(path, bpt: BinaryPartitionTree) -> None:
    Path(path).write_text(json.dumps(bpt.to_dendrogram(), separators=(",", ":")))


def read_dendrogram_json(path) -> list[dict]:
    nodes = json.loads(Path(path).read_text())
    for node in nodes:
        for key in ("id", "parent", "altitude", "leaf"):
            if key not in node:
                raise FormatError(f"dendrogram node missing {key!r}")
    return nodes
