"""Vertex-only PLY reading and writing (ascii and binary little endian)."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import DEFAULT_GRAY, PointCloud

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
FORMATS = {"ascii": "=", "binary_little_endian": "<", "binary_big_endian": ">"}
LABEL_NAMES = ("label", "class", "gt")


class PlyError(ValueError):
    pass


def _parse_header(fh, path) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    magic = fh.readline().strip()
    if magic != b"ply":
        raise PlyError(f"{path}: not a PLY file (missing 'ply' magic line)")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        raw = fh.readline()
        if not raw:
            raise PlyError(f"{path}: header has no end_header")
        words = raw.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        kw = words[0]
        if kw == "end_header":
            break
        if kw == "format":
            if len(words) < 2 or words[1] not in FORMATS:
                raise PlyError(f"{path}: unsupported format line {raw!r}")
            fmt = words[1]
        elif kw == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyError(f"{path}: malformed element line {raw!r}")
            elements.append((words[1], int(words[2]), []))
        elif kw == "property":
            if not elements:
                raise PlyError(f"{path}: property before any element")
            name = elements[-1][0]
            if len(words) >= 2 and words[1] == "list":
                raise PlyError(f"{path}: list property in element '{name}' is not supported")
            if len(words) != 3 or words[1] not in PLY_TYPES:
                raise PlyError(f"{path}: malformed property in element '{name}': {raw!r}")
            elements[-1][2].append((words[2], PLY_TYPES[words[1]]))
        else:
            raise PlyError(f"{path}: unknown header keyword {kw!r}")
    if fmt is None:
        raise PlyError(f"{path}: header has no format line")
    return fmt, elements


def read_vertices(path: str | Path) -> np.ndarray:
    """Structured array of the ``vertex`` element."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        order = FORMATS[fmt]
        vertex = None
        for name, count, props in elements:
            dtype = np.dtype([(p, order + t) for p, t in props])
            if fmt == "ascii":
                rows = []
                for i in range(count):
                    line = fh.readline()
                    if not line:
                        raise PlyError(f"{path}: element '{name}' ends early at row {i}")
                    words = line.split()
                    if len(words) != len(props):
                        raise PlyError(f"{path}: element '{name}' row {i} has {len(words)} values, expected {len(props)}")
                    rows.append(tuple(words))
                data = np.array(rows, dtype=[(p, "U32") for p, _ in props]) if rows else np.zeros(0, dtype)
                try:
                    data = data.astype(dtype)
                except ValueError as exc:
                    raise PlyError(f"{path}: element '{name}' has unparsable values ({exc})") from None
            else:
                buf = fh.read(dtype.itemsize * count)
                if len(buf) != dtype.itemsize * count:
                    raise PlyError(f"{path}: element '{name}' is truncated")
                data = np.frombuffer(buf, dtype=dtype, count=count)
            if name == "vertex":
                vertex = data
                break
    if vertex is None:
        raise PlyError(f"{path}: no 'vertex' element")
    return vertex


def load_ply(path: str | Path) -> PointCloud:
    path = Path(path)
    v = read_vertices(path)
    names = v.dtype.names or ()
    missing = [c for c in "xyz" if c not in names]
    if missing:
        raise PlyError(f"{path}: element 'vertex' lacks coordinate properties {missing}")
    if len(v) == 0:
        raise PlyError(f"{path}: element 'vertex' is empty")
    positions = np.stack([v[c].astype(np.float64) for c in "xyz"], axis=1)
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([v[c] for c in ("red", "green", "blue")], axis=1)
        if cols.dtype == np.uint8:
            colors = cols.astype(np.float64) / 255.0
        else:
            colors = cols.astype(np.float64)
        if not np.all((colors >= 0) & (colors <= 1)):
            raise PlyError(f"{path}: element 'vertex' has colors outside the valid range")
    else:
        colors = np.full(positions.shape, DEFAULT_GRAY)
    mask = None
    for lname in LABEL_NAMES:
        if lname in names:
            lab = v[lname]
            bad = np.flatnonzero((lab != 0) & (lab != 1))
            if bad.size:
                raise PlyError(f"{path}: element 'vertex' property '{lname}' has value {lab[bad[0]]!r} at row {bad[0]}; expected 0 or 1")
            mask = lab.astype(np.uint8)
            break
    saliency = None
    if "saliency" in names:
        saliency = v["saliency"].astype(np.float64)
        if not np.all((saliency >= 0) & (saliency <= 1)):
            raise PlyError(f"{path}: element 'vertex' property 'saliency' outside [0, 1]")
    return PointCloud(positions, colors, mask, saliency)


def _to_bytes(colors: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)


def save_ply(
    cloud: PointCloud,
    path: str | Path,
    color_override: Optional[np.ndarray] = None,
    binary: bool = True,
    label: Optional[np.ndarray] = None,
) -> None:
    """Write ``cloud`` as a vertex PLY.

    ``label`` overrides the written label column (e.g. a binarized prediction);
    otherwise ``gt_mask`` is written when present.
    """
    path = Path(path)
    colors = cloud.colors if color_override is None else np.asarray(color_override, dtype=np.float64)
    if colors.shape != (cloud.n, 3):
        raise ValueError(f"color_override shape {colors.shape} does not match {cloud.n} points")
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    lab = cloud.gt_mask if label is None else np.asarray(label)
    if lab is not None:
        fields.append(("label", "u1"))
    if cloud.saliency is not None:
        fields.append(("saliency", "<f4"))
    arr = np.empty(cloud.n, dtype=fields)
    for i, c in enumerate("xyz"):
        arr[c] = cloud.positions[:, i]
    rgb = _to_bytes(colors)
    for i, c in enumerate(("red", "green", "blue")):
        arr[c] = rgb[:, i]
    if lab is not None:
        arr["label"] = lab
    if cloud.saliency is not None:
        arr["saliency"] = cloud.saliency
    ply_names = {"<f4": "float", "u1": "uchar"}
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {cloud.n}"]
    header += [f"property {ply_names[t]} {name}" for name, t in fields]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                fh.write(arr.tobytes())
            else:
                fh.write(_ascii_body(arr, fields).encode("ascii"))
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc.strerror or exc}") from exc


def _ascii_body(arr: np.ndarray, fields) -> str:
    cols = []
    for name, t in fields:
        col = arr[name]
        if t == "<f4":
            # shortest repr that round-trips a float32
            cols.append([np.format_float_positional(v, unique=True, trim="-") for v in col])
        else:
            cols.append(col.astype(str).tolist())
    return "".join(" ".join(row) + "\n" for row in zip(*cols))

